//! Helpers shared by the integration tests and the acceptance binary.
#![allow(dead_code)]

use fgno_core::diff::{Graph, ParamStore, Tensor, Var};
use fgno_core::flow::{fm_loss, FlowBatch, FlowConfig};
use fgno_core::model::{FlowTransformer, ModelConfig, TimeInjection};
use fgno_core::probe::{grid_search, metrics, FeatureExtractor, GridConfig, LabeledSet, Metric, ProbeData};
use fgno_core::signal::{Label, Spectrogram, Task};
use fgno_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor so that vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest relative error between reverse-mode and central-difference
/// gradients of `f` with respect to every element of every input.
pub fn grad_check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut store = ParamStore::new();
    let ids = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect::<Result<Vec<_>>>()?;
    let eval = |store: &ParamStore<f64>| -> Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(store, id)).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, loss))
    };
    let (g, loss) = eval(&store)?;
    g.backward(loss, &mut store)?;
    let mut worst = 0.0f64;
    for &id in &ids {
        for k in 0..store.get(id).value.len() {
            let x = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = x + FD_STEP;
            let (g, l) = eval(&store)?;
            let up = g.value(l).item();
            store.get_mut(id).value.data_mut()[k] = x - FD_STEP;
            let (g, l) = eval(&store)?;
            let down = g.value(l).item();
            store.get_mut(id).value.data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(store.get(id).grad.data()[k], numeric));
        }
    }
    Ok(worst)
}

/// Contracts a tensor-valued node with fixed random weights so that every
/// output element reaches the scalar loss with a distinct coefficient.
pub fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_tensor(g.shape(v), &mut rng);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    Ok(g.sum_all(p))
}

type Case = (
    &'static str,
    Vec<Vec<usize>>,
    Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>,
);

fn cases() -> Vec<Case> {
    vec![
        (
            "add",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, x| {
                let y = g.add(x[0], x[1])?;
                project(g, y, 1)
            }),
        ),
        (
            "add_broadcast",
            vec![vec![2, 3, 4], vec![4]],
            Box::new(|g, x| {
                let y = g.add(x[0], x[1])?;
                project(g, y, 2)
            }),
        ),
        (
            "sub",
            vec![vec![3, 2], vec![1, 2]],
            Box::new(|g, x| {
                let y = g.sub(x[0], x[1])?;
                project(g, y, 3)
            }),
        ),
        (
            "mul",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[1])?;
                project(g, y, 4)
            }),
        ),
        (
            "scale",
            vec![vec![5]],
            Box::new(|g, x| {
                let y = g.scale(x[0], -1.7);
                project(g, y, 5)
            }),
        ),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                project(g, y, 6)
            }),
        ),
        (
            "matmul_rank3_by_2",
            vec![vec![2, 3, 4], vec![4, 5]],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                project(g, y, 7)
            }),
        ),
        (
            "matmul_batched",
            vec![vec![2, 2, 3, 4], vec![2, 2, 4, 3]],
            Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                project(g, y, 8)
            }),
        ),
        (
            "permute",
            vec![vec![2, 3, 4]],
            Box::new(|g, x| {
                let y = g.permute(x[0], &[2, 0, 1])?;
                project(g, y, 9)
            }),
        ),
        (
            "transpose",
            vec![vec![2, 3, 4]],
            Box::new(|g, x| {
                let y = g.transpose(x[0])?;
                project(g, y, 10)
            }),
        ),
        (
            "reshape",
            vec![vec![2, 6]],
            Box::new(|g, x| {
                let y = g.reshape(x[0], &[3, 4])?;
                project(g, y, 11)
            }),
        ),
        (
            "concat",
            vec![vec![2, 3], vec![2, 1]],
            Box::new(|g, x| {
                let y = g.concat(&[x[0], x[1]], 1)?;
                project(g, y, 12)
            }),
        ),
        (
            "narrow",
            vec![vec![5, 3]],
            Box::new(|g, x| {
                let y = g.narrow(x[0], 0, 1, 3)?;
                project(g, y, 13)
            }),
        ),
        (
            "sum",
            vec![vec![3, 4]],
            Box::new(|g, x| {
                let y = g.sum(x[0], 0)?;
                project(g, y, 14)
            }),
        ),
        (
            "mean",
            vec![vec![3, 4]],
            Box::new(|g, x| {
                let y = g.mean(x[0], 1)?;
                project(g, y, 15)
            }),
        ),
        (
            "sum_all",
            vec![vec![2, 2]],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[0])?;
                Ok(g.sum_all(y))
            }),
        ),
        (
            "mean_all",
            vec![vec![2, 3]],
            Box::new(|g, x| {
                let y = g.mul(x[0], x[0])?;
                Ok(g.mean_all(y))
            }),
        ),
        (
            "softmax",
            vec![vec![3, 5]],
            Box::new(|g, x| {
                let y = g.softmax(x[0], 1)?;
                project(g, y, 16)
            }),
        ),
        (
            "layer_norm",
            vec![vec![3, 6], vec![6], vec![6]],
            Box::new(|g, x| {
                let y = g.layer_norm(x[0], x[1], x[2])?;
                project(g, y, 17)
            }),
        ),
        (
            "gelu",
            vec![vec![4, 4]],
            Box::new(|g, x| {
                let y = g.gelu(x[0]);
                project(g, y, 18)
            }),
        ),
        (
            "dropout",
            vec![vec![4, 4]],
            Box::new(|g, x| {
                let y = g.dropout(x[0], 0.3, true, 19)?;
                project(g, y, 19)
            }),
        ),
        ("mse", vec![vec![2, 3], vec![2, 3]], Box::new(|g, x| g.mse(x[0], x[1]))),
        (
            "masked_mse",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, x| {
                let mask = Tensor::new(vec![2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
                g.masked_mse(x[0], x[1], &mask)
            }),
        ),
    ]
}

/// Worst relative error of every differentiable primitive.
pub fn primitive_grad_errors() -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    cases()
        .into_iter()
        .map(|(name, shapes, f)| {
            let inputs = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
            Ok((name, grad_check(inputs, f)?))
        })
        .collect()
}

pub fn toy_model_config(injection: TimeInjection) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        num_heads: 2,
        d_ff: 12,
        time_embed_dim: 4,
        time_injection: injection,
        ..ModelConfig::desk(5, 4)
    }
}

/// Worst relative error of the flow-matching loss of a toy backbone with
/// respect to every parameter.
pub fn model_grad_error(injection: TimeInjection) -> Result<f64> {
    let mut model = FlowTransformer::<f64>::new(toy_model_config(injection))?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let phi = random_tensor(&[2, 4, 5], &mut rng);
    let batch = FlowBatch::sample(phi, &FlowConfig::default(), &mut rng)?;
    let loss_of = |m: &FlowTransformer<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = fm_loss(&mut g, m, &batch)?;
        Ok(g.value(l).item())
    };
    let mut g = Graph::new();
    let l = fm_loss(&mut g, &model, &batch)?;
    g.backward(l, model.params_mut())?;
    let grads: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let mut worst = 0.0f64;
    for (pi, grad) in grads.iter().enumerate() {
        for (k, &analytic) in grad.iter().enumerate() {
            let x = model.params().iter().nth(pi).unwrap().value.data()[k];
            let set = |m: &mut FlowTransformer<f64>, v: f64| {
                m.params_mut().iter_mut().nth(pi).unwrap().value.data_mut()[k] = v;
            };
            set(&mut model, x + FD_STEP);
            let up = loss_of(&model)?;
            set(&mut model, x - FD_STEP);
            let down = loss_of(&model)?;
            set(&mut model, x);
            worst = worst.max(rel_err(analytic, (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Window-level stub: cells in `informative` expose the label stored in
/// `value(0, 0)`; every other cell returns a constant feature.
pub struct StubExtractor {
    pub layers: usize,
    pub informative: Vec<(usize, f64)>,
}

impl FeatureExtractor for StubExtractor {
    fn num_layers(&self) -> usize {
        self.layers
    }

    fn pooled(&self, inputs: &[Spectrogram], layers: &[usize], s: f64) -> Result<Vec<Vec<Vec<f64>>>> {
        Ok(layers
            .iter()
            .map(|&l| {
                let on = self.informative.contains(&(l, s));
                inputs
                    .iter()
                    .map(|x| vec![if on { x.get(0, 0) } else { 0.0 }, 1.0])
                    .collect()
            })
            .collect())
    }
}

fn stub_set(n: usize, offset: usize) -> LabeledSet {
    let labels: Vec<Label> = (0..n).map(|i| Label::Class((i + offset) % 2)).collect();
    let inputs = labels
        .iter()
        .map(|l| Spectrogram::new(1, 1, vec![l.value()], 1.0, 1.0, 1.0).unwrap())
        .collect();
    LabeledSet { inputs, labels }
}

pub fn stub_data() -> ProbeData {
    ProbeData {
        task: Task::Classification { num_classes: 2 },
        train: stub_set(20, 0),
        val: stub_set(10, 1),
        test: stub_set(10, 0),
    }
}

/// Number of failed exact checks of the grid-search contract on stubs:
/// unique optima at every cell of a 3x3 grid with the exact 1.0 / 0.5
/// matrix, and lexicographic tie-breaking.
pub fn grid_contract_failures() -> Result<Vec<String>> {
    let times = vec![0.0, 0.5, 1.0];
    let cfg = GridConfig {
        times: times.clone(),
        metric: Metric::Auroc,
        ..Default::default()
    };
    let mut failures = Vec::new();
    for l in 1..=3 {
        for &s in &times {
            let stub = StubExtractor {
                layers: 3,
                informative: vec![(l, s)],
            };
            let r = grid_search(&stub, &stub_data(), &cfg)?;
            let want: Vec<Vec<f64>> = (1..=3)
                .map(|li| {
                    times
                        .iter()
                        .map(|&t| if (li, t) == (l, s) { 1.0 } else { 0.5 })
                        .collect()
                })
                .collect();
            if (r.selected_layer, r.selected_time) != (l, s) || r.val_metric != want {
                failures.push(format!(
                    "unique optimum at ({l}, {s}) gave ({}, {})",
                    r.selected_layer, r.selected_time
                ));
            }
        }
    }
    type Cell = (usize, f64);
    let ties: [(&[Cell], Cell); 3] = [
        (&[(3, 0.0), (2, 1.0), (2, 0.5)], (2, 0.5)),
        (&[(1, 1.0), (3, 0.0)], (1, 1.0)),
        (&[(2, 0.0), (2, 0.5), (2, 1.0)], (2, 0.0)),
    ];
    for (cells, want) in ties {
        for metric in [Metric::Auroc, Metric::Loss, Metric::Accuracy] {
            let stub = StubExtractor {
                layers: 3,
                informative: cells.to_vec(),
            };
            let r = grid_search(&stub, &stub_data(), &GridConfig { metric, ..cfg.clone() })?;
            if (r.selected_layer, r.selected_time) != want {
                failures.push(format!(
                    "tie {cells:?} under {metric} gave ({}, {})",
                    r.selected_layer, r.selected_time
                ));
            }
        }
    }
    Ok(failures)
}

/// Largest deviation between the metric implementations and brute-force
/// oracles over `instances` random small problems with frequent ties.
pub fn metric_oracle_worst(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(2..30);
        let k = rng.random_range(2..5);
        let mut y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        y[0] = 0;
        y[1] = 1;
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 4.0).collect();

        // Pair enumeration in half-units keeps the oracle an exact rational.
        let pos: Vec<bool> = y.iter().map(|&c| c == 1).collect();
        let (mut halves, mut pairs) = (0u64, 0u64);
        for i in 0..n {
            for j in 0..n {
                if pos[i] && !pos[j] {
                    pairs += 1;
                    halves += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        worst = worst.max((metrics::auroc(&scores, &pos)? - halves as f64 / (2 * pairs) as f64).abs());

        let hits = pred.iter().zip(&y).filter(|(p, t)| p == t).count();
        worst = worst.max((metrics::accuracy(&pred, &y)? - hits as f64 / n as f64).abs());

        let mut confusion = vec![vec![0u64; k]; k];
        for (&t, &p) in y.iter().zip(&pred) {
            confusion[t][p] += 1;
        }
        let f1: f64 = (0..k)
            .map(|c| {
                let tp = confusion[c][c];
                let fp: u64 = (0..k).map(|t| confusion[t][c]).sum::<u64>() - tp;
                let fneg: u64 = confusion[c].iter().sum::<u64>() - tp;
                if tp == 0 {
                    0.0
                } else {
                    (2 * tp) as f64 / (2 * tp + fp + fneg) as f64
                }
            })
            .sum::<f64>()
            / k as f64;
        worst = worst.max((metrics::macro_f1(&pred, &y, k)? - f1).abs());

        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut sq = 0.0;
        for (p, t) in a.iter().zip(&b) {
            sq += (p - t) * (p - t);
        }
        worst = worst.max((metrics::rmse(&a, &b)? - (sq / n as f64).sqrt()).abs());
    }
    Ok(worst)
}

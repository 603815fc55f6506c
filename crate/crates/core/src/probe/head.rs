//! Linear probing heads on frozen features.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::metrics;
use crate::error::{invalid, Result};
use crate::signal::{Label, Task, STD_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// L2 penalty on weights; the bias is not penalized.
    pub lambda: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            max_iters: 2000,
            tolerance: 1e-6,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters must be >= 1"));
        }
        Ok(())
    }
}

/// Per-feature z-scoring fitted on the head's training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[Vec<f64>]) -> Self {
        let n = x.len() as f64;
        let d = x[0].len();
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| v.sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    fn matrix(&self, x: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = self.mean.len();
        if let Some(row) = x.iter().find(|r| r.len() != d) {
            return Err(invalid(format!(
                "feature width {} differs from the fitted {d}",
                row.len()
            )));
        }
        Ok(DMatrix::from_fn(x.len(), d, |i, j| {
            (x[i][j] - self.mean[j]) / self.std[j]
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProbeHead {
    /// Multinomial logistic regression; `weights` is `d x K` row-major.
    Logistic {
        standardizer: Standardizer,
        weights: Vec<f64>,
        bias: Vec<f64>,
        num_classes: usize,
        iterations: usize,
    },
    Ridge {
        standardizer: Standardizer,
        weights: Vec<f64>,
        bias: f64,
    },
}

/// Validation or test scores of a fitted head. `loss` is cross-entropy for
/// classification and mean squared error for regression.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub loss: f64,
    pub auroc: Option<f64>,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub rmse: Option<f64>,
}

fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = logits.clone();
    for mut row in p.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let sum = row.sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    p
}

fn check_inputs(features: &[Vec<f64>], labels: &[Label]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(invalid(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if features.len() < 2 {
        return Err(invalid("a probing head needs at least 2 samples"));
    }
    if features[0].is_empty() {
        return Err(invalid("empty feature vectors"));
    }
    Ok(())
}

fn classes(labels: &[Label]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|l| {
            l.class()
                .ok_or_else(|| invalid("regression label given to a classifier"))
        })
        .collect()
}

/// Largest eigenvalue of `A^T A / n` for `A = [X 1]`.
fn curvature_bound(x: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let a = x.clone().insert_column(x.ncols(), 1.0);
    let gram = a.transpose() * &a / n as f64;
    gram.symmetric_eigenvalues().max()
}

impl ProbeHead {
    pub fn fit(features: &[Vec<f64>], labels: &[Label], task: Task, config: &HeadConfig) -> Result<Self> {
        config.validate()?;
        check_inputs(features, labels)?;
        match task {
            Task::Classification { num_classes } => Self::fit_logistic(features, labels, num_classes, config),
            Task::Regression => Self::fit_ridge(features, labels, config),
        }
    }

    fn fit_logistic(features: &[Vec<f64>], labels: &[Label], k: usize, config: &HeadConfig) -> Result<Self> {
        let y = classes(labels)?;
        let mut counts = vec![0usize; k];
        for &c in &y {
            *counts
                .get_mut(c)
                .ok_or_else(|| invalid(format!("class {c} outside 0..{k}")))? += 1;
        }
        if counts.iter().filter(|&&c| c > 0).count() < 2 {
            return Err(invalid("classification head needs at least 2 classes present"));
        }
        let standardizer = Standardizer::fit(features);
        let x = standardizer.matrix(features)?;
        let (n, d) = x.shape();
        let onehot = DMatrix::from_fn(n, k, |i, j| if y[i] == j { 1.0 } else { 0.0 });
        let lambda = config.lambda;
        // The softmax Hessian is bounded by half the feature Gram matrix.
        let step = 1.0 / (0.5 * curvature_bound(&x) + lambda);

        let grad = |w: &DMatrix<f64>, b: &DVector<f64>| {
            let mut logits = &x * w;
            for mut row in logits.row_iter_mut() {
                row += b.transpose();
            }
            let g = (softmax_rows(&logits) - &onehot) / n as f64;
            let gw = x.transpose() * &g + w * lambda;
            let gb: DVector<f64> = g.row_sum().transpose();
            (gw, gb)
        };

        let mut w = DMatrix::zeros(d, k);
        // Log class frequencies: the optimum when the weights are forced to 0.
        let mut b = DVector::from_iterator(k, counts.iter().map(|&c| (c.max(1) as f64 / n as f64).ln()));
        let (mut w_prev, mut b_prev) = (w.clone(), b.clone());
        let mut iterations = config.max_iters;
        for it in 1..=config.max_iters {
            let m = (it as f64 - 1.0) / (it as f64 + 2.0);
            let wy = &w + (&w - &w_prev) * m;
            let by = &b + (&b - &b_prev) * m;
            let (gw, gb) = grad(&wy, &by);
            let norm = (gw.norm_squared() + gb.norm_squared()).sqrt();
            w_prev = std::mem::replace(&mut w, &wy - gw * step);
            b_prev = std::mem::replace(&mut b, &by - gb * step);
            if norm < config.tolerance {
                (w, b) = (wy, by);
                iterations = it;
                break;
            }
        }
        let mut weights = Vec::with_capacity(d * k);
        for i in 0..d {
            for j in 0..k {
                weights.push(w[(i, j)]);
            }
        }
        Ok(ProbeHead::Logistic {
            standardizer,
            weights,
            bias: b.iter().copied().collect(),
            num_classes: k,
            iterations,
        })
    }

    fn fit_ridge(features: &[Vec<f64>], labels: &[Label], config: &HeadConfig) -> Result<Self> {
        let y: Vec<f64> = labels
            .iter()
            .map(|l| match l {
                Label::Value(v) => Ok(*v),
                Label::Class(_) => Err(invalid("class label given to a regressor")),
            })
            .collect::<Result<_>>()?;
        let standardizer = Standardizer::fit(features);
        let x = standardizer.matrix(features)?;
        let (n, d) = x.shape();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        // Standardized columns are centered, so the bias decouples.
        let mut a = x.transpose() * &x / n as f64;
        for i in 0..d {
            a[(i, i)] += config.lambda;
        }
        let rhs = x.transpose() * yc / n as f64;
        let w = match a.clone().cholesky() {
            Some(c) => c.solve(&rhs),
            None => a
                .svd(true, true)
                .solve(&rhs, 1e-12)
                .map_err(|e| invalid(format!("ridge solve failed: {e}")))?,
        };
        Ok(ProbeHead::Ridge {
            standardizer,
            weights: w.iter().copied().collect(),
            bias: y_mean,
        })
    }

    pub fn weights(&self) -> &[f64] {
        match self {
            ProbeHead::Logistic { weights, .. } | ProbeHead::Ridge { weights, .. } => weights,
        }
    }

    /// Class probabilities, one row per sample.
    pub fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let ProbeHead::Logistic {
            standardizer,
            weights,
            bias,
            num_classes,
            ..
        } = self
        else {
            return Err(invalid("predict_proba on a regression head"));
        };
        let x = standardizer.matrix(features)?;
        let w = DMatrix::from_row_slice(x.ncols(), *num_classes, weights);
        let mut logits = x * w;
        for mut row in logits.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        let p = softmax_rows(&logits);
        Ok(p.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    pub fn predict_class(&self, features: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(features)?
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (k, &v)| if v > best.1 { (k, v) } else { best },
                    )
                    .0
            })
            .collect())
    }

    pub fn predict_value(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let ProbeHead::Ridge {
            standardizer,
            weights,
            bias,
        } = self
        else {
            return Err(invalid("predict_value on a classification head"));
        };
        let x = standardizer.matrix(features)?;
        let w = DVector::from_column_slice(weights);
        Ok((x * w).iter().map(|v| v + bias).collect())
    }

    /// Scores on held-out rows. AUROC is omitted when a class is missing.
    pub fn score(&self, features: &[Vec<f64>], labels: &[Label]) -> Result<Scores> {
        if features.len() != labels.len() || features.is_empty() {
            return Err(invalid(format!(
                "{} feature rows for {} labels",
                features.len(),
                labels.len()
            )));
        }
        match self {
            ProbeHead::Logistic { num_classes, .. } => {
                let y = classes(labels)?;
                let probs = self.predict_proba(features)?;
                let pred = self.predict_class(features)?;
                let all_present = (0..*num_classes).all(|k| y.contains(&k));
                Ok(Scores {
                    loss: metrics::cross_entropy(&probs, &y)?,
                    auroc: if all_present {
                        Some(metrics::macro_auroc(&probs, &y, *num_classes)?)
                    } else {
                        None
                    },
                    accuracy: Some(metrics::accuracy(&pred, &y)?),
                    macro_f1: Some(metrics::macro_f1(&pred, &y, *num_classes)?),
                    rmse: None,
                })
            }
            ProbeHead::Ridge { .. } => {
                let y: Vec<f64> = labels.iter().map(Label::value).collect();
                let pred = self.predict_value(features)?;
                let rmse = metrics::rmse(&pred, &y)?;
                Ok(Scores {
                    loss: rmse * rmse,
                    rmse: Some(rmse),
                    ..Default::default()
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const BINARY: Task = Task::Classification { num_classes: 2 };

    #[test]
    fn separable_classes_are_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..60 {
            let c = i % 2;
            let shift = if c == 0 { -2.0 } else { 2.0 };
            x.push(vec![shift + rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            y.push(Label::Class(c));
        }
        let cfg = HeadConfig {
            lambda: 1e-8,
            ..Default::default()
        };
        let head = ProbeHead::fit(&x, &y, BINARY, &cfg).unwrap();
        let s = head.score(&x, &y).unwrap();
        assert_eq!(s.accuracy, Some(1.0));
        assert_eq!(s.auroc, Some(1.0));
    }

    #[test]
    fn converges_to_small_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..80)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<Label> = x
            .iter()
            .map(|r| Label::Class(usize::from(r[0] + 0.5 * r[1] + rng.random_range(-0.5..0.5) > 0.0)))
            .collect();
        let head = ProbeHead::fit(
            &x,
            &y,
            BINARY,
            &HeadConfig {
                lambda: 1e-2,
                ..Default::default()
            },
        )
        .unwrap();
        let ProbeHead::Logistic { iterations, .. } = head else {
            unreachable!()
        };
        assert!(iterations < 2000, "did not converge");
    }

    #[test]
    fn heavy_penalty_returns_the_prior() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<Label> = (0..10).map(|i| Label::Class(usize::from(i >= 7))).collect();
        let head = ProbeHead::fit(
            &x,
            &y,
            BINARY,
            &HeadConfig {
                lambda: 1e9,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(head.weights().iter().all(|w| w.abs() < 1e-8));
        for p in head.predict_proba(&x).unwrap() {
            assert!((p[1] - 0.3).abs() < 1e-8);
        }
        let yr: Vec<Label> = (0..10).map(|i| Label::Value(i as f64 * 2.0)).collect();
        let ridge = ProbeHead::fit(
            &x,
            &yr,
            Task::Regression,
            &HeadConfig {
                lambda: 1e12,
                ..Default::default()
            },
        )
        .unwrap();
        for v in ridge.predict_value(&x).unwrap() {
            assert!((v - 9.0).abs() < 1e-9);
        }
    }

    /// Normal-equation oracle on the raw (unstandardized) design `[X 1]`.
    #[test]
    fn ridge_recovers_exact_linear_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (40, 4);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let w_true = [1.5, -0.5, 2.0, 0.25];
        let y: Vec<f64> = x
            .iter()
            .map(|r| r.iter().zip(&w_true).map(|(a, b)| a * b).sum::<f64>() + 0.7)
            .collect();
        let labels: Vec<Label> = y.iter().map(|&v| Label::Value(v)).collect();
        let head = ProbeHead::fit(
            &x,
            &labels,
            Task::Regression,
            &HeadConfig {
                lambda: 1e-10,
                ..Default::default()
            },
        )
        .unwrap();
        let pred = head.predict_value(&x).unwrap();
        assert!(metrics::rmse(&pred, &y).unwrap() < 1e-8);

        let a = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[i][j] } else { 1.0 });
        let beta = (a.transpose() * &a)
            .lu()
            .solve(&(a.transpose() * DVector::from_vec(y.clone())))
            .unwrap();
        for (j, w) in w_true.iter().enumerate() {
            assert!((beta[j] - w).abs() < 1e-9);
        }
        let oracle: Vec<f64> = (a * beta).iter().copied().collect();
        for (p, o) in pred.iter().zip(&oracle) {
            assert!((p - o).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_degenerate_training_sets() {
        let x = vec![vec![1.0], vec![2.0]];
        let one_class = vec![Label::Class(0), Label::Class(0)];
        assert!(ProbeHead::fit(&x, &one_class, BINARY, &HeadConfig::default()).is_err());
        assert!(ProbeHead::fit(&x[..1], &one_class[..1], BINARY, &HeadConfig::default()).is_err());
        assert!(ProbeHead::fit(&x, &one_class[..1], BINARY, &HeadConfig::default()).is_err());
    }
}

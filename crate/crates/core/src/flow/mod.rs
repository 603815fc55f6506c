//! Flow-matching machinery: noisy interpolation between clean grids and
//! Gaussian noise, the conditional target field, the regression loss and an
//! explicit Euler sampler for `dg/ds = u(s, g)`.

mod schedule;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};

pub use schedule::VarianceSchedule;

pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowConfig {
    pub schedule: VarianceSchedule,
    pub sigma_floor: f64,
    pub s_min: f64,
    pub s_max: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            schedule: VarianceSchedule::Linear,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            s_min: 0.0,
            s_max: 0.995,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        check_bounds(self.s_min, self.s_max)?;
        if self.schedule.sigma(self.s_max) <= self.sigma_floor {
            return Err(invalid(format!(
                "s_max {} reaches the sigma floor {}",
                self.s_max, self.sigma_floor
            )));
        }
        Ok(())
    }
}

fn check_bounds(s_min: f64, s_max: f64) -> Result<()> {
    if !(0.0 <= s_min && s_min < s_max && s_max <= 1.0) {
        return Err(invalid(format!(
            "flow time bounds must satisfy 0 <= s_min < s_max <= 1, got [{s_min}, {s_max}]"
        )));
    }
    Ok(())
}

fn check_time(s: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&s) {
        return Err(invalid(format!("flow time {s} outside [0, 1]")));
    }
    Ok(())
}

/// `g = s * phi + sigma(s) * epsilon`.
pub fn interpolate<T: Real>(
    phi: &Tensor<T>,
    epsilon: &Tensor<T>,
    s: f64,
    schedule: VarianceSchedule,
) -> Result<Tensor<T>> {
    if phi.shape() != epsilon.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate",
            lhs: phi.shape().to_vec(),
            rhs: epsilon.shape().to_vec(),
        });
    }
    check_time(s)?;
    let (a, b) = (T::lit(s), T::lit(schedule.sigma(s)));
    Ok(phi.zip_map(epsilon, |p, e| a * p + b * e))
}

/// `v = sigma'(s) / sigma(s) * (g - s * phi) + phi`.
pub fn target_field<T: Real>(
    g: &Tensor<T>,
    phi: &Tensor<T>,
    s: f64,
    schedule: VarianceSchedule,
    sigma_floor: f64,
) -> Result<Tensor<T>> {
    if phi.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "target_field",
            lhs: g.shape().to_vec(),
            rhs: phi.shape().to_vec(),
        });
    }
    check_time(s)?;
    let sigma = schedule.sigma(s);
    if sigma <= sigma_floor {
        return Err(Error::Singularity {
            s,
            sigma,
            floor: sigma_floor,
        });
    }
    let ratio = T::lit(schedule.sigma_prime(s) / sigma);
    let st = T::lit(s);
    Ok(g.zip_map(phi, |gv, p| ratio * (gv - st * p) + p))
}

/// Uniform draw on `[s_min, s_max]`.
pub fn sample_flow_time(rng: &mut impl Rng, s_min: f64, s_max: f64) -> Result<f64> {
    check_bounds(s_min, s_max)?;
    Ok(rng.random_range(s_min..=s_max))
}

/// Elementwise standard normal noise.
pub fn gaussian_noise<T: Real>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(StandardNormal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("noise shape is valid")
}

/// A time-conditioned vector field over `[batch, frames, bins]` grids.
pub trait VelocityField<T: Real> {
    /// Records `u(s_b, g_b)` for every batch item `b` on `graph`.
    fn velocity(&self, graph: &mut Graph<T>, g: Var, s: &[f64]) -> Result<Var>;
}

/// One training batch: clean grids, their noise, flow times, interpolants
/// and targets. All grids are `[batch, frames, bins]`.
#[derive(Clone, Debug)]
pub struct FlowBatch<T> {
    pub phi: Tensor<T>,
    pub epsilon: Tensor<T>,
    pub s: Vec<f64>,
    pub g: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> FlowBatch<T> {
    /// Draws `s` and `epsilon` per item and derives `g` and `v`.
    pub fn sample(phi: Tensor<T>, config: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        let batch = phi.shape()[0];
        let s = (0..batch)
            .map(|_| sample_flow_time(rng, config.s_min, config.s_max))
            .collect::<Result<Vec<_>>>()?;
        let epsilon = gaussian_noise(phi.shape(), rng);
        Self::from_parts(phi, epsilon, s, config)
    }

    pub fn from_parts(phi: Tensor<T>, epsilon: Tensor<T>, s: Vec<f64>, config: &FlowConfig) -> Result<Self> {
        if phi.shape() != epsilon.shape() {
            return Err(Error::ShapeMismatch {
                op: "flow batch",
                lhs: phi.shape().to_vec(),
                rhs: epsilon.shape().to_vec(),
            });
        }
        let batch = phi.shape()[0];
        if s.len() != batch {
            return Err(invalid(format!("{} flow times for a batch of {batch}", s.len())));
        }
        let item_shape = &phi.shape()[1..];
        let per = phi.len() / batch;
        let mut g = Vec::with_capacity(phi.len());
        let mut v = Vec::with_capacity(phi.len());
        for (b, &sb) in s.iter().enumerate() {
            let range = b * per..(b + 1) * per;
            let p = Tensor::new(item_shape.to_vec(), phi.data()[range.clone()].to_vec())?;
            let e = Tensor::new(item_shape.to_vec(), epsilon.data()[range].to_vec())?;
            let gb = interpolate(&p, &e, sb, config.schedule)?;
            let vb = target_field(&gb, &p, sb, config.schedule, config.sigma_floor)?;
            g.extend_from_slice(gb.data());
            v.extend_from_slice(vb.data());
        }
        let shape = phi.shape().to_vec();
        Ok(Self {
            g: Tensor::new(shape.clone(), g)?,
            v: Tensor::new(shape, v)?,
            phi,
            epsilon,
            s,
        })
    }
}

/// Mean squared error between `u(s, g)` and the target field, averaged over
/// batch items and grid elements.
pub fn fm_loss<T: Real, M: VelocityField<T> + ?Sized>(
    graph: &mut Graph<T>,
    model: &M,
    batch: &FlowBatch<T>,
) -> Result<Var> {
    let g = graph.constant(batch.g.clone());
    let pred = model.velocity(graph, g, &batch.s)?;
    let target = graph.constant(batch.v.clone());
    graph.mse(pred, target)
}

/// Explicit Euler: `g <- g + ds * u(s, g)` with `ds = (s_end - s_start) / steps`.
pub fn euler_integrate<T: Real, M: VelocityField<T> + ?Sized>(
    model: &M,
    g0: &Tensor<T>,
    s_start: f64,
    s_end: f64,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 {
        return Err(invalid("euler_integrate needs at least one step"));
    }
    if !(s_start < s_end) {
        return Err(invalid(format!("s_start {s_start} must be < s_end {s_end}")));
    }
    let batch = g0.shape()[0];
    let ds = (s_end - s_start) / steps as f64;
    let mut g = g0.clone();
    for k in 0..steps {
        let s = s_start + k as f64 * ds;
        let mut graph = Graph::new();
        let input = graph.constant(g.clone());
        let u = model.velocity(&mut graph, input, &vec![s; batch])?;
        let step = T::lit(ds);
        let uv = graph.value(u);
        if uv.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: "euler_integrate",
                lhs: g.shape().to_vec(),
                rhs: uv.shape().to_vec(),
            });
        }
        for (x, &d) in g.data_mut().iter_mut().zip(uv.data()) {
            *x += step * d;
        }
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(x: f64) -> Tensor<f64> {
        Tensor::scalar(x)
    }

    #[test]
    fn interpolation_endpoints_and_scalar_case() {
        let phi = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let eps = Tensor::new(vec![3], vec![0.3, 0.7, -1.1]).unwrap();
        let lin = VarianceSchedule::Linear;
        assert_eq!(interpolate(&phi, &eps, 1.0, lin).unwrap(), phi);
        assert_eq!(interpolate(&phi, &eps, 0.0, lin).unwrap(), eps);
        let g = interpolate(&scalar(2.0), &scalar(1.0), 0.5, lin).unwrap();
        assert_eq!(g.item(), 1.5);
        assert!(interpolate(&phi, &scalar(1.0), 0.5, lin).is_err());
    }

    #[test]
    fn target_field_closed_form() {
        let lin = VarianceSchedule::Linear;
        let v = target_field(&scalar(1.5), &scalar(2.0), 0.5, lin, DEFAULT_SIGMA_FLOOR).unwrap();
        assert!((v.item() - 1.0).abs() < 1e-15);
        let err = target_field(&scalar(2.0), &scalar(2.0), 1.0, lin, DEFAULT_SIGMA_FLOOR);
        assert!(matches!(err, Err(Error::Singularity { .. })));
        let at_floor = 1.0 - 0.5 * DEFAULT_SIGMA_FLOOR;
        let err = target_field(&scalar(2.0), &scalar(2.0), at_floor, lin, DEFAULT_SIGMA_FLOOR);
        assert!(matches!(err, Err(Error::Singularity { .. })));
    }

    #[test]
    fn flow_time_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws: Vec<f64> = (0..100_000)
            .map(|_| sample_flow_time(&mut rng, 0.0, 1.0).unwrap())
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        assert!((0..1000).all(|_| {
            let s = sample_flow_time(&mut rng, 0.2, 0.3).unwrap();
            (0.2..=0.3).contains(&s)
        }));
        let a: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..10).map(|_| sample_flow_time(&mut r, 0.0, 1.0).unwrap()).collect()
        };
        let b: Vec<f64> = {
            let mut r = ChaCha8Rng::seed_from_u64(5);
            (0..10).map(|_| sample_flow_time(&mut r, 0.0, 1.0).unwrap()).collect()
        };
        assert_eq!(a, b);
        assert!(sample_flow_time(&mut rng, 0.6, 0.4).is_err());
    }

    struct Constant(f64);

    impl VelocityField<f64> for Constant {
        fn velocity(&self, graph: &mut Graph<f64>, g: Var, _s: &[f64]) -> Result<Var> {
            let c = Tensor::full(graph.shape(g), self.0);
            Ok(graph.constant(c))
        }
    }

    #[test]
    fn euler_exact_for_constant_field() {
        let g0 = Tensor::new(vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        for steps in [1, 3, 10] {
            let out = euler_integrate(&Constant(0.25), &g0, 0.2, 0.8, steps).unwrap();
            for (a, b) in out.data().iter().zip(g0.data()) {
                assert!((a - (b + 0.6 * 0.25)).abs() < 1e-14);
            }
        }
        assert!(euler_integrate(&Constant(0.25), &g0, 0.0, 1.0, 0).is_err());
        assert!(euler_integrate(&Constant(0.25), &g0, 1.0, 0.5, 2).is_err());
    }

    /// Returns the batch target plus a constant.
    struct Offset {
        target: Tensor<f64>,
        c: f64,
    }

    impl VelocityField<f64> for Offset {
        fn velocity(&self, graph: &mut Graph<f64>, _g: Var, _s: &[f64]) -> Result<Var> {
            Ok(graph.constant(self.target.map(|x| x + self.c)))
        }
    }

    #[test]
    fn constant_offset_loss_is_offset_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let phi = gaussian_noise::<f64>(&[3, 4, 5], &mut rng);
        let batch = FlowBatch::sample(phi, &FlowConfig::default(), &mut rng).unwrap();
        for c in [0.0, 0.5, -2.0] {
            let model = Offset {
                target: batch.v.clone(),
                c,
            };
            let mut graph = Graph::new();
            let loss = fm_loss(&mut graph, &model, &batch).unwrap();
            assert!((graph.value(loss).item() - c * c).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_target_is_data_minus_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let phi = gaussian_noise::<f64>(&[2, 3, 4], &mut rng);
        let batch = FlowBatch::sample(phi, &FlowConfig::default(), &mut rng).unwrap();
        for ((v, p), e) in batch.v.data().iter().zip(batch.phi.data()).zip(batch.epsilon.data()) {
            assert!((v - (p - e)).abs() <= 1e-9 * (p - e).abs().max(1.0));
        }
    }
}

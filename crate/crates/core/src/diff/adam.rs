use super::params::ParamStore;
use super::tensor::{Real, Tensor};

/// Adam with bias correction. Zeroes gradients after each step.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.first.len() != store.len() {
            self.first = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::one() - T::lit(self.beta1.powi(self.step));
        let c2 = T::one() - T::lit(self.beta2.powi(self.step));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for ((p, m), v) in store.iter_mut().zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
            let values = p.value.data_mut();
            for (((w, &g), mi), vi) in values.iter_mut().zip(p.grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap())
            .unwrap();
        s.get_mut(id).grad.data_mut().copy_from_slice(grads);
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(&[1.0, -2.0], &[0.0, 0.0]);
        Adam::new(1e-3).step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        // Hand-evaluated recurrence at t = 1: m_hat = g, v_hat = g^2, so the
        // update is -lr * g / (|g| + eps).
        let g = [0.3, -5.0, 1e-3];
        let mut s = store(&[0.0; 3], &g);
        let lr = 1e-2;
        Adam::new(lr).step(&mut s);
        let p = s.iter().next().unwrap();
        for (&w, &gi) in p.value.data().iter().zip(&g) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
            assert!((w.abs() - lr).abs() < lr * 1e-4);
        }
        assert!(p.grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store(&[0.5, 0.25], &[0.0, 0.0]);
            let mut opt = Adam::new(1e-2);
            for k in 0..20 {
                let id = s.find("w").unwrap();
                let w = s.get(id).value.data().to_vec();
                let grad: Vec<f64> = w.iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                s.get_mut(id).grad.data_mut().copy_from_slice(&grad);
                opt.step(&mut s);
            }
            let id = s.find("w").unwrap();
            s.get(id).value.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}

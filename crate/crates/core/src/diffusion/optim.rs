use std::collections::HashMap;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Adam with bias correction; moments are kept per parameter name in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            moments: HashMap::new(),
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    /// Completed optimizer steps.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Starts a new step; call once before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.steps += 1;
    }

    pub fn update<S: Scalar>(&mut self, name: &str, param: &mut Tensor<S>, grad: &Tensor<S>) -> Result<()> {
        if param.shape() != grad.shape() {
            return shape_err("Adam::update", param.shape(), grad.shape());
        }
        let n = param.numel();
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        let t = self.steps.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            let g = g.as_f64();
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let step = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            *p = S::from_f64(p.as_f64() - step);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut opt = Adam::new(0.1);
        let mut p = Tensor::<f64>::from_vec(vec![1.0, -1.0]);
        let g = Tensor::from_vec(vec![3.0, -0.5]);
        opt.begin_step();
        opt.update("p", &mut p, &g).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut opt = Adam::new(1e-3);
        let mut p = Tensor::<f32>::from_vec(vec![0.25, 2.0]);
        let before = p.clone();
        for _ in 0..3 {
            opt.begin_step();
            opt.update("p", &mut p, &Tensor::zeros(vec![2])).unwrap();
        }
        assert!(p.bit_eq(&before));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut opt = Adam::new(0.05);
        let mut p = Tensor::<f64>::from_vec(vec![3.0, -2.0]);
        for _ in 0..500 {
            let g = p.map(|v| 2.0 * (v - 1.0));
            opt.begin_step();
            opt.update("p", &mut p, &g).unwrap();
        }
        assert!(p.data().iter().all(|v| (v - 1.0).abs() < 1e-2), "{p:?}");
    }
}

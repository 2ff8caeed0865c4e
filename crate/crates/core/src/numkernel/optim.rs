use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Optimizer hyper-parameters plus the per-parameter moment buffers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter tensor in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer step",
                dimension: "parameter count",
                expected: params.len(),
                found: grads.len(),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            g.expect_shape("optimizer step", p.shape())?;
        }
        if self.kind == OptimizerKind::Adam {
            if self.first.is_empty() {
                self.first = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
                self.second = self.first.clone();
            }
            for (p, m) in params.iter().zip(&self.first) {
                m.expect_shape("optimizer moments", p.shape())?;
            }
        }
        self.step += 1;
        let lr = T::from_f64(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let b1 = T::from_f64(self.beta1);
                let b2 = T::from_f64(self.beta2);
                let c1 = T::from_f64(1.0 / (1.0 - self.beta1.powi(t)));
                let c2 = T::from_f64(1.0 / (1.0 - self.beta2.powi(t)));
                let eps = T::from_f64(self.epsilon);
                let one = T::one();
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    for (((w, &d), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *m = b1 * *m + (one - b1) * d;
                        *v = b2 * *v + (one - b2) * d * d;
                        let m_hat = *m * c1;
                        let v_hat = *v * c2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_single_step() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let g = Tensor::scalar(0.5);
        let mut opt = OptimizerState::sgd(0.1);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-12);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::full(&[3], 2.0);
        let g = Tensor::full(&[3], 1.0);
        let mut opt = OptimizerState::adam(0.001);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        for &v in p.data() {
            // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
            assert!((2.0 - v - 0.001 / (1.0 + 1e-8)).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut p = Tensor::<f32>::from_fn(&[4], |i| i as f32);
        let before = p.clone();
        let g = Tensor::zeros(&[4]);
        let mut opt = OptimizerState::adam(0.001);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut opt = OptimizerState::sgd(0.1);
        assert!(opt.step(&mut [&mut p], &[&g]).is_err());
    }
}

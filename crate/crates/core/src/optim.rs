//! First-order optimizers over flat parameter vectors.
//!
//! Both optimizers fold L2 weight decay into the raw gradient before any
//! momentum bookkeeping. State is plain data and serializes with the
//! checkpoints, so a resumed run continues bit-identically.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam or SGD-with-momentum over one flat parameter vector.
///
/// `beta1`/`beta2` are Adam's moment decays; for SGD, `beta1` doubles as the
/// momentum coefficient and `beta2` is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn adam(
        learning_rate: f64,
        beta1: f64,
        beta2: f64,
        weight_decay: f64,
        param_count: usize,
    ) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1,
            beta2,
            weight_decay,
            epsilon: 1e-8,
            t: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn sgd(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        param_count: usize,
    ) -> Optimizer {
        Optimizer {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: momentum,
            beta2: 0.0,
            weight_decay,
            epsilon: 0.0,
            t: 0,
            m: vec![0.0; param_count],
            v: Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.m.len()
    }

    /// One update step. `params` and `grads` must match the vector this
    /// optimizer was sized for.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(CoreError::Incompatible(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::Adam => {
                let bc1 = 1.0 - self.beta1.powi(self.t as i32);
                let bc2 = 1.0 - self.beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    let g = grads[i] + self.weight_decay * params[i];
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            }
            OptimizerKind::Sgd => {
                for i in 0..params.len() {
                    let g = grads[i] + self.weight_decay * params[i];
                    self.m[i] = self.beta1 * self.m[i] + g;
                    params[i] -= self.learning_rate * self.m[i];
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
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut params = vec![0.3, -0.7, 1.1];
        let before = params.clone();
        let grads = vec![1.0, -2.0, 0.5];
        let mut adam = Optimizer::adam(0.0, 0.9, 0.999, 5e-4, 3);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
        let mut sgd = Optimizer::sgd(0.0, 0.9, 5e-4, 3);
        sgd.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr_toward_negative_gradient() {
        // With zero decay, Adam's bias-corrected first step is exactly
        // lr * g / (|g| + eps) ~= lr * sign(g).
        let mut params = vec![0.0];
        let mut opt = Optimizer::adam(0.01, 0.9, 0.999, 0.0, 1);
        opt.step(&mut params, &[3.0]).unwrap();
        assert!((params[0] + 0.01).abs() < 1e-7, "got {}", params[0]);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut params = vec![0.0];
        let mut opt = Optimizer::sgd(0.1, 0.5, 0.0, 1);
        opt.step(&mut params, &[1.0]).unwrap(); // v = 1.0, p = -0.1
        assert!((params[0] + 0.1).abs() < 1e-15);
        opt.step(&mut params, &[1.0]).unwrap(); // v = 1.5, p = -0.25
        assert!((params[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_shrinks_parameters_without_gradient() {
        let mut params = vec![1.0];
        let mut opt = Optimizer::sgd(0.1, 0.0, 0.5, 1);
        opt.step(&mut params, &[0.0]).unwrap(); // g = 0.5 -> p -= 0.05
        assert!((params[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn state_survives_serde_round_trip_exactly() {
        let mut params = vec![0.2, -0.4];
        let mut opt = Optimizer::adam(1e-3, 0.9, 0.999, 1e-4, 2);
        opt.step(&mut params, &[0.3, -0.1]).unwrap();
        let json = serde_json::to_string(&opt).unwrap();
        let mut back: Optimizer = serde_json::from_str(&json).unwrap();
        assert_eq!(opt, back);
        // Both copies must evolve identically afterwards.
        let mut p2 = params.clone();
        opt.step(&mut params, &[0.05, 0.7]).unwrap();
        back.step(&mut p2, &[0.05, 0.7]).unwrap();
        assert_eq!(params, p2);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let mut opt = Optimizer::adam(1e-3, 0.9, 0.999, 0.0, 2);
        let mut params = vec![0.0; 3];
        assert!(opt.step(&mut params, &[0.0; 3]).is_err());
    }
}

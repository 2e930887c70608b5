//! First-order parameter updates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateRule {
    /// Adaptive moment estimation with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
    /// Plain gradient descent, `w -= lr * g`.
    Sgd,
}

impl UpdateRule {
    pub const ADAM: UpdateRule = UpdateRule::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 };
}

/// Optimizer state carried across steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    rule: UpdateRule,
    learning_rate: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(rule: UpdateRule, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(contract!("learning rate must be positive, got {}", learning_rate));
        }
        Ok(Self { rule, learning_rate, first: Vec::new(), second: Vec::new(), step: 0 })
    }

    pub fn adam(learning_rate: f64) -> Result<Self> {
        Self::new(UpdateRule::ADAM, learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Result<Self> {
        Self::new(UpdateRule::Sgd, learning_rate)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update using the gradients stored on `params`, then
    /// clears them.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(contract!("parameter {} has no gradient", i));
        }
        if self.step == 0 {
            self.first = params.iter().map(|p| alloc::vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len() || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(contract!("parameter set changed shape between optimizer steps"));
        }
        self.step += 1;
        let lr = self.learning_rate;
        match self.rule {
            UpdateRule::Sgd => {
                for p in params.iter_mut() {
                    let g = p.take_grad().expect("checked above");
                    for (w, d) in p.data_mut().iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
            }
            UpdateRule::Adam { beta1, beta2, eps } => {
                let t = self.step as f64;
                let c1 = 1.0 - libm::pow(beta1, t);
                let c2 = 1.0 - libm::pow(beta2, t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    let g = p.take_grad().expect("checked above");
                    for (((w, d), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * d;
                        *vi = beta2 * *vi + (1.0 - beta2) * d * d;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *w -= lr * mhat / (libm::sqrt(vhat) + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

//! ADADELTA.
//!
//! Per coordinate, with decay `ρ` and conditioning `ε`:
//!
//! ```text
//! E[g²]  ← ρ·E[g²] + (1−ρ)·g²
//! Δx     = −(√(E[Δx²]+ε) / √(E[g²]+ε)) · g
//! E[Δx²] ← ρ·E[Δx²] + (1−ρ)·Δx²
//! x      ← x + lr·Δx
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdadeltaConfig {
    pub learning_rate: f64,
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig {
            learning_rate: 1.0,
            rho: 0.95,
            epsilon: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdadeltaState<T: Scalar> {
    pub config: AdadeltaConfig,
    /// `E[g²]` per parameter tensor.
    pub sq_grad: Vec<Vec<T>>,
    /// `E[Δx²]` per parameter tensor.
    pub sq_update: Vec<Vec<T>>,
    pub steps: u64,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn new(config: AdadeltaConfig, lens: &[usize]) -> Self {
        AdadeltaState {
            config,
            sq_grad: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            sq_update: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: 0,
        }
    }

    pub fn for_tensors(config: AdadeltaConfig, tensors: &[&Tensor<T>]) -> Self {
        let lens: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        Self::new(config, &lens)
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.sq_grad.len() || grads.len() != self.sq_grad.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.sq_grad.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.sq_grad[i].len() || g.len() != self.sq_grad[i].len() {
                return Err(Error::Dimension(format!(
                    "tensor {i}: state {} values, parameter {}, gradient {}",
                    self.sq_grad[i].len(),
                    p.len(),
                    g.len()
                )));
            }
        }
        let rho = T::from_f64(self.config.rho);
        let decay = T::one() - rho;
        let eps = T::from_f64(self.config.epsilon);
        let lr = T::from_f64(self.config.learning_rate);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let eg = &mut self.sq_grad[i];
            let ex = &mut self.sq_update[i];
            for (((x, &gi), eg), ex) in p.data_mut().iter_mut().zip(g).zip(eg.iter_mut()).zip(ex.iter_mut()) {
                *eg = rho * *eg + decay * gi * gi;
                let dx = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * gi;
                *ex = rho * *ex + decay * dx * dx;
                *x = *x + lr * dx;
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn reset(&mut self) {
        for acc in self.sq_grad.iter_mut().chain(self.sq_update.iter_mut()) {
            acc.iter_mut().for_each(|v| *v = T::zero());
        }
        self.steps = 0;
    }
}

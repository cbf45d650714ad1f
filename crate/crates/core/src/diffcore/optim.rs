use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{DiffError, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Sgd { momentum: 0.0 }, learning_rate }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig { kind: OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }, learning_rate }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning_rate must be positive");
        }
        match self.kind {
            OptimizerKind::Sgd { momentum } if !(0.0..1.0).contains(&momentum) => Err("momentum must be in [0, 1)"),
            OptimizerKind::Adam { beta1, beta2, epsilon }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || epsilon <= 0.0 =>
            {
                Err("adam betas must be in [0, 1) and epsilon > 0")
            }
            _ => Ok(()),
        }
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
///
/// Buffers are allocated on the first step so they always mirror the
/// parameter shapes they were created for. SGD uses only `first_moment`
/// (the velocity).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState<T = f32> {
    pub config: OptimizerConfig,
    pub step_count: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState { config, step_count: 0, first_moment: Vec::new(), second_moment: Vec::new() }
    }

    /// One update. Nothing is modified when any gradient is non-finite or
    /// shapes disagree.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<(), DiffError> {
        if grads.len() != params.len() {
            return Err(DiffError::InvalidArgument {
                op: "optimizer_step",
                detail: format!("{} gradients for {} parameters", grads.len(), params.len()),
            });
        }
        for (i, ((name, p), g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(DiffError::ShapeMismatch {
                    op: "optimizer_step",
                    shapes: alloc::vec![p.shape().to_vec(), g.shape().to_vec()],
                });
            }
            if !g.is_finite() {
                return Err(DiffError::NonFinite(format!("gradient of `{name}`")));
            }
            if let Some(m) = self.first_moment.get(i) {
                if m.shape() != p.shape() {
                    return Err(DiffError::ShapeMismatch {
                        op: "optimizer_step",
                        shapes: alloc::vec![m.shape().to_vec(), p.shape().to_vec()],
                    });
                }
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            if matches!(self.config.kind, OptimizerKind::Adam { .. }) {
                self.second_moment = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            }
        }
        self.step_count += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd { momentum } => {
                for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut self.first_moment) {
                    for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        let vel = momentum * vi.f64() + gi.f64();
                        *vi = T::of(vel);
                        *w = T::of(w.f64() - lr * vel);
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let t = self.step_count as i32;
                let bc1 = 1.0 - libm::pow(beta1, t as f64);
                let bc2 = 1.0 - libm::pow(beta2, t as f64);
                let moments = self.first_moment.iter_mut().zip(self.second_moment.iter_mut());
                for ((p, g), (m, v)) in params.tensors_mut().zip(grads).zip(moments) {
                    let lanes = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
                    for ((w, &gi), (mi, vi)) in lanes {
                        let gi = gi.f64();
                        let m1 = beta1 * mi.f64() + (1.0 - beta1) * gi;
                        let v1 = beta2 * vi.f64() + (1.0 - beta2) * gi * gi;
                        *mi = T::of(m1);
                        *vi = T::of(v1);
                        let update = lr * (m1 / bc1) / (libm::sqrt(v1 / bc2) + epsilon);
                        *w = T::of(w.f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

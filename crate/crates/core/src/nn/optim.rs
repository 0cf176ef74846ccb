use serde::{Deserialize, Serialize};

use super::tensor::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

/// Moment accumulators and hyperparameters of an Adam-family optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, store: &ParamStore) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(format!(
                "weight decay {weight_decay} must be nonnegative"
            )));
        }
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Optimizer {
            state: OptimizerState {
                kind,
                lr,
                weight_decay,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                first_moment: zeros.clone(),
                second_moment: zeros,
            },
        })
    }

    pub fn adam(lr: f64, store: &ParamStore) -> Result<Self> {
        Self::new(OptimizerKind::Adam, lr, 0.0, store)
    }

    pub fn adamw(lr: f64, weight_decay: f64, store: &ParamStore) -> Result<Self> {
        Self::new(OptimizerKind::AdamW, lr, weight_decay, store)
    }

    pub fn from_state(state: OptimizerState, store: &ParamStore) -> Result<Self> {
        let matches = state.first_moment.len() == store.len()
            && state.second_moment.len() == store.len()
            && store
                .iter()
                .zip(&state.first_moment)
                .zip(&state.second_moment)
                .all(|(((_, t), m), v)| m.len() == t.len() && v.len() == t.len());
        if !matches {
            return Err(Error::shape("optimizer moments do not match parameter shapes"));
        }
        Ok(Optimizer { state })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn into_state(self) -> OptimizerState {
        self.state
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) {
        let s = &mut self.state;
        s.step += 1;
        let bc1 = 1.0 - s.beta1.powi(s.step as i32);
        let bc2 = 1.0 - s.beta2.powi(s.step as i32);
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut s.first_moment[i], &mut s.second_moment[i]);
            let data = t.data_mut();
            for j in 0..grad.len() {
                let mut gj = grad[j];
                if s.kind == OptimizerKind::Adam && s.weight_decay > 0.0 {
                    gj += s.weight_decay * data[j];
                }
                m[j] = s.beta1 * m[j] + (1.0 - s.beta1) * gj;
                v[j] = s.beta2 * v[j] + (1.0 - s.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + s.eps);
                if s.kind == OptimizerKind::AdamW {
                    data[j] -= s.lr * s.weight_decay * data[j];
                }
                data[j] -= s.lr * update;
            }
            t.zero_grad();
        }
    }
}

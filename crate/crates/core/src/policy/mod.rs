//! Goal-conditioned learners: outcome-conditioned behavioral cloning (OCBC)
//! and its Q-conditioned extension, each with an MLP (RvS) and a causal
//! transformer (DT) backbone.
//!
//! The Q-conditioned variants learn two things at once: actions conditioned
//! on a goal-reaching probability `Q`, and an expectile regression of `Q`
//! itself. With `m` close to 1 the regression approaches the largest
//! in-dataset value, and inference conditions the actor on that prediction.
//!
//! | variant     | backbone | tokens / inputs per step | loss                    |
//! |-------------|----------|--------------------------|-------------------------|
//! | `ocbc_rvs`  | MLP      | `(s, g)`                 | action MSE              |
//! | `gcrsl_rvs` | MLP      | `v(s, g)`, `π(s, g, Q)`  | action MSE + expectile  |
//! | `ocbc_dt`   | DT       | `⟨s, g, a⟩`              | action MSE              |
//! | `gcrsl_dt`  | DT       | `⟨s, g, Q, a⟩`           | action MSE + expectile  |
//!
//! Discrete actions are regressed onto one-hot targets and decoded by argmax
//! with ties going to the lowest index.

mod data;
mod dt;
mod model;
mod train;

pub use data::{TrainingSample, TrainingSet};
pub use dt::DtStep;
pub use model::{argmax, PolicyArch, PolicyModel, PolicyRunner, CHECKPOINT_KIND};
pub use train::{train, train_return_conditioned, TracePoint, TrainedPolicy};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::ExpectileParam;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    OcbcRvs,
    OcbcDt,
    GcrslRvs,
    GcrslDt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::OcbcRvs, Variant::OcbcDt, Variant::GcrslRvs, Variant::GcrslDt];

    pub fn is_dt(self) -> bool {
        matches!(self, Variant::OcbcDt | Variant::GcrslDt)
    }

    /// Q-conditioned with an expectile value term.
    pub fn uses_q(self) -> bool {
        matches!(self, Variant::GcrslRvs | Variant::GcrslDt)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::OcbcRvs => "ocbc_rvs",
            Variant::OcbcDt => "ocbc_dt",
            Variant::GcrslRvs => "gcrsl_rvs",
            Variant::GcrslDt => "gcrsl_dt",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub variant: Variant,
    pub m: ExpectileParam,
    /// Context length `K` in timesteps (DT only).
    pub context: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Goal-swap probability applied to training tuples (OCBC only).
    pub augment_probability: f64,
    pub seed: u64,
    /// Hidden widths of the RvS value and actor MLPs.
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub log_every: usize,
}

impl PolicyConfig {
    pub fn new(variant: Variant) -> Self {
        PolicyConfig {
            variant,
            m: ExpectileParam::new(0.99).expect("valid expectile"),
            context: 10,
            lr: 1e-3,
            steps: 50_000,
            batch_size: 256,
            augment_probability: 0.0,
            seed: 0,
            hidden: vec![256, 256],
            embed_dim: 64,
            layers: 2,
            heads: 4,
            log_every: 500,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.is_dt() {
            if self.context < 2 {
                return Err(Error::Config(format!(
                    "context length {} must be at least 2 for sequence models",
                    self.context
                )));
            }
            if self.heads == 0 || self.embed_dim % self.heads != 0 {
                return Err(Error::Config("embed_dim must be a multiple of heads".into()));
            }
            if self.layers == 0 {
                return Err(Error::Config("need at least one transformer layer".into()));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(Error::Config("augment_probability must lie in [0, 1]".into()));
        }
        if self.augment_probability > 0.0 && self.variant.uses_q() {
            return Err(Error::Config(
                "goal-swap augmentation would invalidate Q labels; use it with OCBC variants".into(),
            ));
        }
        Ok(())
    }
}

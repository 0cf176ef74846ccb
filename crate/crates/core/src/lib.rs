//! Offline goal-conditioned RL laboratory built around Q-conditioned
//! maximization supervised learning.
//!
//! A CVAE estimates the behavior policy's goal-reaching probability, an
//! expectile-regression head learns the in-distribution maximum of that
//! probability, and the policy is conditioned on it at inference time.
//! Exact tabular oracles in [`oracle`] serve as the ground truth for the
//! density estimator and the probability/Q-function equivalence.
//!
//! Module map:
//!
//! - [`nn`]: tensors, reverse-mode autodiff, layers, optimizers, losses, checkpoints
//! - [`envs`]: the illustrative MDP, the noisy 5x5 gridworld and discrete mazes
//! - [`datagen`]: region-restricted collection, relabeling, augmentation, MC labels
//! - [`oracle`]: exact discounted occupancy and tabular policy evaluation
//! - [`cvae`]: goal-reaching density model and importance-sampled estimator
//! - [`policy`]: OCBC and Q-conditioned RvS / DT learners
//! - [`eval`]: rollouts, bootstrap CIs, probability of improvement, sweeps

pub mod cvae;
pub mod datagen;
pub mod envs;
pub mod error;
pub mod eval;
pub mod hashing;
pub mod nn;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod svg;

pub use error::{Error, Result};
pub use nn::{ExpectileParam, Tensor};

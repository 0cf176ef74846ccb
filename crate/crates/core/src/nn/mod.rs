//! Minimal dense tensor library with reverse-mode automatic differentiation.
//!
//! Parameters live in a [`ParamStore`]; each forward pass records onto a fresh
//! [`Graph`] which is consumed by [`Graph::backward`]. Layers in [`layers`]
//! hold [`ParamId`]s rather than data so that checkpoints and optimizers only
//! ever deal with the store.

pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Gradients, Graph, Var};
pub use layers::{CausalSelfAttention, LayerNorm, Linear, Mlp, TransformerBlock};
pub use loss::{expectile_argmin_oracle, expectile_loss, expectile_loss_mean, gaussian_kl_to_standard, ExpectileParam};
pub use optim::{Optimizer, OptimizerKind, OptimizerState};
pub use tensor::{ParamId, ParamStore, Tensor};

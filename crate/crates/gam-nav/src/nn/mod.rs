//! Minimal neural-network substrate: dense layers, an LSTM cell, losses,
//! optimizers, a finite-difference gradient checker, and checkpoint IO.
//! All gradients are analytic; there is no general autodiff graph.

pub mod checkpoint;
pub mod grad_check;
pub mod lstm;
pub mod mlp;
pub mod ops;
pub mod param_store;

pub use checkpoint::{load_blocks, load_stores, save_blocks, save_stores, CheckpointBlock};
pub use grad_check::grad_check;
pub use lstm::{Lstm, LstmState, LstmTape};
pub use mlp::{sigmoid, Activation, Mlp, MlpSpec, MlpTape, OutputMode};
pub use ops::{binary_cross_entropy, binary_cross_entropy_grad, clamp_prob, entropy, softmax};
pub use param_store::{Block, ParamStore};

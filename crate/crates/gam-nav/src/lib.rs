//! Topological graph memory navigation.
//!
//! The pipeline: explore a discrete maze, train a siamese similarity
//! classifier on temporally-labeled observation pairs, build a topological
//! graph from the classifier's connection probabilities, extract guided
//! attention features by recurrent graph aggregation, and train an A2C
//! agent that consumes those features. Ships with convergence diagnostics
//! for the recurrent aggregation (stationary-distribution oracle) and
//! reactive / recurrent baselines for comparison.
//!
//! See the `examples/` directory for one runnable example per capability,
//! or the `gam-nav` binary for the staged CLI pipeline.

// Indexed loops are used deliberately in the numerical kernels where
// several same-length buffers are read and written per iteration.
#![allow(clippy::needless_range_loop)]

pub mod agent;
pub mod error;
pub mod gam;
pub mod harness;
pub mod maze;
pub mod memory;
pub mod nn;

pub use error::{GamError, Result};

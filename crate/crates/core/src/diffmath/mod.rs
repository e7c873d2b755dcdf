//! Dense float64 tensor operations with reverse-mode gradients.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays them backwards to accumulate gradients, which is all the
//! machinery full-graph training needs: matrix products, activations,
//! gather/segment reductions for message passing, dropout and a weighted
//! cross-entropy head. [`adam_step`] and [`OneCycleSchedule`] drive the
//! optimisation; [`grad_check`] verifies any tape-built scalar function
//! against central finite differences.

mod gradcheck;
mod optim;
mod tape;

pub use gradcheck::grad_check;
pub use optim::{adam_step, AdamState, OneCycleSchedule};
pub use tape::{softmax_rows, Tape, TensorRef};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite gradient for parameter {key}")]
    NonFiniteGradient { key: String },
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
}

//! Minimal dense-array kernel with reverse-mode differentiation.
//!
//! Double precision throughout. The building blocks:
//!
//! - [`Tape`]: append-only computation record over vectors/matrices with
//!   a single reverse pass ([`Tape::backward`]).
//! - [`ParameterStore`]: named trainable tensors with gradient slots and
//!   adaptive-moment optimizer state ([`ParameterStore::optimizer_step`]).
//! - [`gru_cell`]: the recurrent memory updater.
//! - [`finite_difference_check`]: central-difference gradient audit.

mod check;
mod graph;
mod gru;
mod params;

pub use check::finite_difference_check;
pub use graph::{Shape, Tape, TensorError, TensorId, COSINE_EPS};
pub use gru::{gru_cell, GruLeaves, GruParams};
pub use params::{AdamConfig, ParamError, ParamId, ParameterStore, CHECKPOINT_FORMAT};

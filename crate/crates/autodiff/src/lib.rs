//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Values live in [`Tensor`]s. A forward pass records primitive ops on a
//! [`Tape`]; [`Tape::backward`] replays them in reverse and returns the
//! gradients. Trainable weights are kept in a [`ParamSet`] and updated with
//! [`Sgd`].

mod error;
pub mod kernels;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use params::{Adam, Bound, ParamId, ParamSet, Sgd};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

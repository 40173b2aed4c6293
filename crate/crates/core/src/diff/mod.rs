//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation is a method on [`Tape`] that computes its output eagerly and
//! records a [`Backward`] implementation. [`Tape::backward`] replays the record
//! in reverse and returns the gradients of all tracked leaves.

mod adam;
mod conv;
mod elementwise;
pub mod gradcheck;
mod linear;
mod norm;
mod shuffle;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::conv_out_extent;
pub use elementwise::{sigmoid, smooth_l1};
pub use linear::softmax_temperature;
pub use norm::{BatchNormState, Mode};
pub use tape::{Backward, BackwardCtx, Gradients, Tape, Var};
pub use tensor::Tensor;

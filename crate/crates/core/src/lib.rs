//! Dynamic iterative refinement network for hand keypoint estimation.
//!
//! The crate is generic over the floating point type through [`Scalar`];
//! training runs on `f32` and gradient checks on `f64`.

pub mod backbone;
pub mod diff;
pub mod evalkit;
pub mod gating;
pub mod model;
pub mod nn;
pub mod posehead;
mod error;
pub mod scalar;
pub mod synthdata;
pub mod training;
pub mod uncertainty;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = diff::Tensor<f32>;
pub type Tensor64 = diff::Tensor<f64>;
pub type Tape32 = diff::Tape<f32>;
pub type Tape64 = diff::Tape<f64>;

//! Dense tensors with tape-based reverse-mode differentiation, SGD and
//! parameter checkpoints.

pub mod gradcheck;
mod params;
mod tape;

pub use params::{Bound, Parameters, Sgd};
pub use tape::{conv_out_dim, Gradients, ShapeError, Tape, Tensor};

/// Numeric type of the engine.
#[cfg(not(feature = "single-precision"))]
pub type Float = f64;
/// Numeric type of the engine.
#[cfg(feature = "single-precision")]
pub type Float = f32;

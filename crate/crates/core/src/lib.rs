//! Cross-domain object detection on synthetic scenes with rotation
//! prediction and augmentation consistency as auxiliary tasks.

pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod harness;
pub mod imaging;
pub mod numerics;
pub mod objectives;
pub mod scenegen;

pub use error::{Error, GeometryError, Result};

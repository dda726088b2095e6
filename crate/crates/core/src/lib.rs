//! Multi-task CNN micro-framework built around NDDR fusion layers:
//! channel concatenation of per-task features followed by a learned 1×1
//! projection over batch-normalized inputs, trained with weight decay.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

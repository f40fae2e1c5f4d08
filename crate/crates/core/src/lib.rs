//! Knowledge distillation for bird's-eye-view object detectors on a CPU
//! toy substrate.

pub mod bench;
pub mod detector;
pub mod error;
pub mod eval;
pub mod kd;
pub mod metrics;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};

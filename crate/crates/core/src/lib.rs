//! 2-D liver segmentation from CT slices, built on a small reverse-mode
//! autodiff engine.

pub mod arch;
pub mod autodiff;
pub mod checks;
pub mod data;
pub mod error;
pub mod experiments;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

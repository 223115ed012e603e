//! Desk-scale post-training weight quantization lab.
//!
//! Round-to-nearest, GPTQ and AWQ quantizers over a tiny Llama-style decoder,
//! calibration-set builders for multilingual corpora, and the diagnostics used
//! to compare calibration choices.

pub mod awq;
pub mod calibkit;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod gptq;
pub mod nanomodel;
pub mod numerics;
pub mod quantgrid;

pub use error::{ErrorKind, QlabError, Result};
pub use numerics::Matrix;
pub use quantgrid::{Method, QuantSpec, QuantizedTensor};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Post-training quantization by block reconstruction.
//!
//! The crate covers a small dense tensor engine with reverse-mode autodiff,
//! fake quantization with learned rounding, a calibration engine that matches
//! block outputs under a squared-gradient weighting, second-order oracles for
//! tiny models and a genetic search over per-layer bit widths.

pub mod autograd;
pub mod container;
pub mod data;
pub mod error;
pub mod fixtures;
pub mod forward;
pub mod gradcheck;
pub mod hessian;
pub mod mixedprec;
pub mod model;
pub mod optim;
pub mod quant;
pub mod recon;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Any-precision deep neural networks.
//!
//! A single set of float master weights is trained jointly at several integer
//! bit-widths, each with its own BatchNorm statistics, so that the deployed
//! model can switch precision at runtime by truncating stored 8-bit codes.

pub mod cli;
pub mod config;
pub mod data;
pub mod diag;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod precision;
pub mod quant;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use precision::Precision;
pub use tensor::{Tape, Tensor, Var};

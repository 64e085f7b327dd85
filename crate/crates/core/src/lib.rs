//! Probabilistic imputation of graph-structured multivariate time series
//! with a conditional diffusion model whose denoiser combines bidirectional
//! selective state-space blocks with graph message passing and
//! virtual-node attention.
//!
//! Everything runs on `f64` arrays with a small tape-based reverse-mode
//! autodiff engine ([`tape`]).

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mamba;
pub mod masking;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{ScanMode, Tape, Var};
pub use tensor::NdArray;

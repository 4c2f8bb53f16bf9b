//! Desk-scale training engine for quantized dynamic low-rank adapters.
//!
//! Frozen base weights live in double-quantized 4-bit NormalFloat; trainable
//! low-rank adapters are truncated to a freshly sampled rank each training
//! step, so one run yields a model usable at every rank in a configured
//! range. The crate covers the dense math, the quantizer, the adapters, the
//! training loop, rank-sweep evaluation, bit-exact checkpoints, and the
//! `qdlr` command-line binary that ties them together.

pub mod adapter;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod model;
pub mod quant;
pub mod run;
pub mod tensor;
pub mod train;

pub use adapter::{AdapterConfig, DynamicLoraLayer, RankDistribution, RankSampler};
pub use error::{Error, Result};
pub use quant::{quantize, quantize_single_level, Nf4Codebook, QuantizedMatrix};
pub use tensor::{Mat, Matrix, Rng};

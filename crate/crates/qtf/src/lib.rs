//! Simulator for FP4/FP8 mixed-precision transformer training.
//!
//! Low-precision arithmetic is emulated: operand tensors are snapped onto
//! ExMy format grids before each GEMM while storage and accumulation stay
//! full precision. On top of the quantizer sit quantization-aware
//! transformer blocks with straight-through-estimator weight handling, a
//! trainer with full-precision master weights and a two-stage precision
//! schedule, and diagnostics (underflow statistics, attention-map
//! divergence, a theoretical compute-cost model).

pub mod analysis;
pub mod config;
pub mod corpus;
pub mod error;
pub mod formats;
pub mod model;
pub mod quant;
pub mod recipe;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use formats::{FpFormat, FpGrid};
pub use quant::{
    quantize_tensor, AxisSemantics, Granularity, QuantConfig, QuantMode, QuantStats, ScaleParams,
    ScalePolicy,
};

pub use tensor::Tensor;

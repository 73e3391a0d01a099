//! Quantization-guided training (QGT) for small classifiers.
//!
//! Training adds the weighted squared distance of each kernel from its own
//! quantization grid to the task loss, pulling weights toward values that
//! survive low-bit quantization. The crate provides the autodiff engine,
//! the quantizers, the training and diagnostic routines, a bit-exact packed
//! model format, and dataset tooling.
//!
//! Numeric code is generic over [`scalar::Real`]; the aliases below fix the
//! scalar to `f32` (training) or `f64` (gradient checks and oracles).

// Negated float comparisons in this crate are deliberate so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod bytes;
pub mod config;
pub mod data;
pub mod format;
pub mod qgt;
pub mod quant;
pub mod scalar;
pub mod tensor;

use thiserror::Error;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Parameter32 = autodiff::Parameter<f32>;
pub type QuantParams32 = quant::QuantParams<f32>;
pub type QuantizedTensor32 = quant::QuantizedTensor<f32>;

/// Any error the library can raise.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] config::ConfigError),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Format(#[from] format::FormatError),
    #[error(transparent)]
    Graph(#[from] autodiff::GraphError),
    #[error(transparent)]
    Qgt(#[from] qgt::QgtError),
    #[error(transparent)]
    Quant(#[from] quant::QuantError),
}

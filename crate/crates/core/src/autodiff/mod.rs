//! A small reverse-mode differentiation engine for sequential classifiers.
//!
//! A [`Graph`] is an ordered list of layers followed by a softmax
//! cross-entropy head. `forward` in train mode records a tape of the
//! intermediate values each layer needs; `backward` walks the tape in reverse
//! and fills every parameter's gradient.

mod arch;
mod gradcheck;
mod graph;
mod ops;
mod optim;

pub use arch::{Architecture, LayerSpec};
pub use gradcheck::{finite_difference_check, GradCheckOptions, GradCheckReport};
pub use graph::{ForwardOutput, Graph, Layer, Mode, NormSettings};
pub use ops::{batch_norm, conv2d_forward, conv_extent, softmax_cross_entropy, ConvGeometry, Padding};
pub use optim::{sgd_step, Adam, Optimizer, OptimizerError, Sgd};

use crate::scalar::Real;
use crate::tensor::{ShapeError, Tensor};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("dimension error in `{layer}`: {detail}")]
    Dimension { layer: String, detail: String },
    #[error("{0}")]
    State(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Kernel,
    Bias,
    BnGamma,
    BnBeta,
    BnMean,
    BnVar,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::Kernel,
        ParamKind::Bias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::BnMean,
        ParamKind::BnVar,
    ];

    pub fn is_batch_norm(self) -> bool {
        matches!(
            self,
            ParamKind::BnGamma | ParamKind::BnBeta | ParamKind::BnMean | ParamKind::BnVar
        )
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParamKind::Kernel => "kernel",
            ParamKind::Bias => "bias",
            ParamKind::BnGamma => "bn_gamma",
            ParamKind::BnBeta => "bn_beta",
            ParamKind::BnMean => "bn_mean",
            ParamKind::BnVar => "bn_var",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub id: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
    pub kind: ParamKind,
}

impl<T: Real> Parameter<T> {
    pub fn new(id: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> Self {
        let grad = Tensor::zeros(value.shape());
        let trainable = !matches!(kind, ParamKind::BnMean | ParamKind::BnVar);
        Self {
            id: id.into(),
            value,
            grad,
            trainable,
            kind,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

//! Quantization-guided training: the regularized loss
//! `L + Σ λᵢ ||D(Q(wᵢ)) - wᵢ||²`, the training loop that optimizes it,
//! post-training quantization, dequantized evaluation, batch-norm folding,
//! and the diagnostics built on the per-parameter quantization error.

mod eval;
mod fold;
mod report;
mod sweep;
mod train;

pub use eval::{dequantized_copy, evaluate, pack_graph, ptq, unpack_into, EvalMode, PtqResult};
pub use fold::fold_batch_norm;
pub use report::{
    bottleneck_report, export_histograms, histogram, sanitize_id, BottleneckEntry, BottleneckReport, Histogram,
};
pub use sweep::{lambda_sweep, SweepRow};
pub use train::{
    epoch_batches, train, EpochLog, OptimizerKind, StepLog, TrainConfig, TrainingReport, SHUFFLE_STREAM,
};

use crate::autodiff::{GraphError, OptimizerError, ParamKind, Parameter};
use crate::data::DataError;
use crate::quant::{error_grad_from, roundtrip, squared_distance, QuantError, QuantizerSpec};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QgtError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite loss at step {step}: largest term `{term}` = {value}")]
    NonFinite { step: usize, term: String, value: f64 },
    #[error("cannot write `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("run with lambda = {lambda} failed: {source}")]
    Sweep {
        lambda: f64,
        #[source]
        source: Box<QgtError>,
    },
}

fn default_excluded() -> Vec<ParamKind> {
    vec![
        ParamKind::Bias,
        ParamKind::BnGamma,
        ParamKind::BnBeta,
        ParamKind::BnMean,
        ParamKind::BnVar,
    ]
}

/// Which parameters carry a quantization-error term, with what weight and
/// which quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QgtConfig {
    /// λ for every eligible parameter without an entry in `lambdas`.
    #[serde(default)]
    pub lambda: f64,
    /// Per-parameter λ, keyed by parameter id.
    #[serde(default)]
    pub lambdas: BTreeMap<String, f64>,
    /// Quantizer for every eligible parameter without an entry in `quantizers`.
    pub quantizer: QuantizerSpec,
    #[serde(default)]
    pub quantizers: BTreeMap<String, QuantizerSpec>,
    /// Parameter kinds that never receive a term and stay full precision.
    #[serde(default = "default_excluded")]
    pub exclude_kinds: Vec<ParamKind>,
    /// Individual parameter ids excluded in addition to `exclude_kinds`.
    #[serde(default)]
    pub exclude_params: Vec<String>,
}

impl QgtConfig {
    pub fn new(lambda: f64, quantizer: QuantizerSpec) -> Self {
        Self {
            lambda,
            lambdas: BTreeMap::new(),
            quantizer,
            quantizers: BTreeMap::new(),
            exclude_kinds: default_excluded(),
            exclude_params: Vec::new(),
        }
    }

    /// Same configuration with every λ set to `lambda`.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            lambdas: self.lambdas.keys().map(|k| (k.clone(), lambda)).collect(),
            ..self.clone()
        }
    }

    pub fn is_eligible<T: Real>(&self, p: &Parameter<T>) -> bool {
        !self.exclude_kinds.contains(&p.kind) && !self.exclude_params.contains(&p.id)
    }

    /// `true` when every λ is zero, so training reduces to plain training.
    pub fn is_ptq_equivalent(&self) -> bool {
        self.lambda == 0.0 && self.lambdas.values().all(|&l| l == 0.0)
    }

    /// Resolves the configuration against a parameter list.
    pub fn resolve<T: Real>(&self, params: &[Parameter<T>]) -> Result<Vec<Term>, QgtError> {
        let check = |l: f64, what: &str| {
            if l.is_finite() && l >= 0.0 {
                Ok(())
            } else {
                Err(QgtError::Config(format!("{what} must be finite and non-negative, got {l}")))
            }
        };
        check(self.lambda, "lambda")?;
        for kind in [ParamKind::BnMean, ParamKind::BnVar] {
            if !self.exclude_kinds.contains(&kind) {
                return Err(QgtError::Config(format!("{kind} parameters are running statistics and cannot be quantization-guided")));
            }
        }
        let known = |id: &str| params.iter().find(|p| p.id == id);
        for id in &self.exclude_params {
            known(id).ok_or_else(|| QgtError::Config(format!("excluded parameter `{id}` does not exist")))?;
        }
        for (id, &l) in &self.lambdas {
            check(l, &format!("lambda for `{id}`"))?;
            self.require_eligible(known(id), id, "lambda")?;
        }
        for id in self.quantizers.keys() {
            self.require_eligible(known(id), id, "quantizer")?;
        }
        Ok(params
            .iter()
            .enumerate()
            .filter(|(_, p)| self.is_eligible(p))
            .map(|(index, p)| Term {
                index,
                id: p.id.clone(),
                lambda: self.lambdas.get(&p.id).copied().unwrap_or(self.lambda),
                spec: self.quantizers.get(&p.id).copied().unwrap_or(self.quantizer),
            })
            .collect())
    }

    fn require_eligible<T: Real>(&self, p: Option<&Parameter<T>>, id: &str, what: &str) -> Result<(), QgtError> {
        match p {
            None => Err(QgtError::Config(format!("{what} given for unknown parameter `{id}`"))),
            Some(p) if !self.is_eligible(p) => Err(QgtError::Config(format!(
                "{what} given for `{id}`, which is excluded from quantization"
            ))),
            Some(_) => Ok(()),
        }
    }
}

/// One resolved regularizer term.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    /// Position in the parameter list.
    pub index: usize,
    pub id: String,
    pub lambda: f64,
    pub spec: QuantizerSpec,
}

/// The assembled loss and its parts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub total: f64,
    /// Unweighted quantization error per eligible parameter.
    pub errors: BTreeMap<String, f64>,
}

impl LossBreakdown {
    /// The term with the largest magnitude, treating non-finite values as
    /// largest.
    pub fn largest_term(&self, terms: &[Term]) -> (String, f64) {
        let mut best = ("task".to_string(), self.task);
        let key = |v: f64| if v.is_finite() { v.abs() } else { f64::INFINITY };
        for t in terms {
            let v = t.lambda * self.errors[&t.id];
            if key(v) > key(best.1) {
                best = (t.id.clone(), v);
            }
        }
        best
    }
}

/// `task + Σ λᵢ ||D(Q(wᵢ)) - wᵢ||²` over the resolved terms.
pub fn assemble_loss<T: Real>(task_loss: f64, params: &[Parameter<T>], terms: &[Term]) -> Result<LossBreakdown, QgtError> {
    let mut errors = BTreeMap::new();
    let mut total = task_loss;
    for t in terms {
        let w = &params[t.index].value;
        let e = squared_distance(roundtrip(w, &t.spec)?.data(), w.data());
        total += t.lambda * e;
        errors.insert(t.id.clone(), e);
    }
    Ok(LossBreakdown {
        task: task_loss,
        total,
        errors,
    })
}

/// Adds `λᵢ · 2 (wᵢ - D(Q(wᵢ)))` to each eligible gradient and returns the
/// assembled loss. Parameters are refit from the current values.
pub fn apply_regularizer<T: Real>(
    task_loss: f64,
    params: &mut [Parameter<T>],
    terms: &[Term],
) -> Result<LossBreakdown, QgtError> {
    let mut errors = BTreeMap::new();
    let mut total = task_loss;
    for t in terms {
        let p = &mut params[t.index];
        let wq = roundtrip(&p.value, &t.spec)?;
        let e = squared_distance(wq.data(), p.value.data());
        let g = error_grad_from(&p.value, &wq);
        let lambda = T::of(t.lambda);
        for (acc, &gi) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *acc += lambda * gi;
        }
        total += t.lambda * e;
        errors.insert(t.id.clone(), e);
    }
    Ok(LossBreakdown {
        task: task_loss,
        total,
        errors,
    })
}

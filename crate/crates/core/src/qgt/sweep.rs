use super::train::{train, TrainConfig};
use super::{QgtConfig, QgtError};
use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::scalar::Real;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub accuracy_fp32: f64,
    pub accuracy_dequantized: f64,
    /// Summed unweighted quantization error of the final weights.
    pub total_error: f64,
}

/// One independent training run per λ, each from a fresh graph and the same
/// seeds, run in parallel. Rows come back sorted by λ.
pub fn lambda_sweep<T, F>(
    graph_factory: F,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    qgt: &QgtConfig,
    lambdas: &[f64],
) -> Result<Vec<SweepRow>, QgtError>
where
    T: Real,
    F: Fn() -> Result<Graph<T>, QgtError> + Sync,
{
    if lambdas.is_empty() {
        return Err(QgtError::Config("the sweep needs at least one lambda".into()));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(QgtError::Config(format!("sweep lambdas must be finite and non-negative, got {bad}")));
    }
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .par_iter()
        .map(|&lambda| {
            let run = || -> Result<SweepRow, QgtError> {
                let mut graph = graph_factory()?;
                let report = train(&mut graph, data, eval, cfg, &qgt.with_lambda(lambda))?;
                Ok(SweepRow {
                    lambda,
                    accuracy_fp32: report.final_accuracy_fp32,
                    accuracy_dequantized: report.final_accuracy_dequantized,
                    total_error: report.total_final_error(),
                })
            };
            run().map_err(|e| QgtError::Sweep {
                lambda,
                source: Box::new(e),
            })
        })
        .collect()
}

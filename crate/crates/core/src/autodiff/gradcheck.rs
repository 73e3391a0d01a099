use super::graph::{Graph, Mode};
use super::GraphError;
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Step is `rel_step * max(|w|, 1)`.
    pub rel_step: f64,
    pub tolerance: f64,
    /// Relative errors are taken against `max(|analytic|, |numeric|, denom_floor)`.
    pub denom_floor: f64,
    /// Above this many entries a seeded random subsample is checked.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-3,
            tolerance: 1e-3,
            denom_floor: 1e-6,
            max_entries: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub param_id: String,
    pub checked: usize,
    /// Entries whose ±h probes flipped a ReLU, where the loss is not smooth.
    pub skipped_nonsmooth: usize,
    pub max_rel_error: f64,
    pub flagged: Vec<FlaggedEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Compares the backward-pass gradient of `param_id` against central
/// differences of the train-mode loss on one batch. The graph is cloned and
/// left untouched.
pub fn finite_difference_check<T: Real>(
    graph: &Graph<T>,
    input: &Tensor<T>,
    labels: &[usize],
    param_id: &str,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, GraphError> {
    let mut g = graph.clone();
    let pi = g
        .param_index(param_id)
        .ok_or_else(|| GraphError::UnknownParam(param_id.to_string()))?;
    g.forward(input, labels, Mode::Train)?;
    let pattern = g.relu_pattern();
    g.backward()?;
    let analytic = g.params()[pi].grad.clone();
    let n = analytic.len();
    let indices: Vec<usize> = if n <= opts.max_entries {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = rand::seq::index::sample(&mut rng, n, opts.max_entries).into_vec();
        idx.sort_unstable();
        idx
    };

    let mut report = GradCheckReport {
        param_id: param_id.to_string(),
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_error: 0.0,
        flagged: Vec::new(),
    };
    for i in indices {
        let w = g.params()[pi].value.data()[i];
        let h = T::of(opts.rel_step * w.as_f64().abs().max(1.0));
        let (wp, wm) = (w + h, w - h);
        let mut probe = |value: T| -> Result<(f64, Vec<bool>), GraphError> {
            g.params_mut()[pi].value.data_mut()[i] = value;
            let out = g.forward(input, labels, Mode::Train)?;
            Ok((out.loss.as_f64(), g.relu_pattern()))
        };
        let (lp, pat_p) = probe(wp)?;
        let (lm, pat_m) = probe(wm)?;
        g.params_mut()[pi].value.data_mut()[i] = w;
        if pat_p != pattern || pat_m != pattern {
            report.skipped_nonsmooth += 1;
            continue;
        }
        let numeric = (lp - lm) / (wp - wm).as_f64();
        let a = analytic.data()[i].as_f64();
        let denom = a.abs().max(numeric.abs()).max(opts.denom_floor);
        let rel = (a - numeric).abs() / denom;
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if !(rel <= opts.tolerance) {
            report.flagged.push(FlaggedEntry {
                index: i,
                analytic: a,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

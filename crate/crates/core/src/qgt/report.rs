use super::{assemble_loss, QgtConfig, QgtError};
use crate::autodiff::Graph;
use crate::quant::{roundtrip, Granularity, Scheme};
use crate::scalar::Real;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottleneckEntry {
    pub param_id: String,
    /// `||D(Q(w)) - w||²`.
    pub error: f64,
    /// `error / elements`.
    pub normalized_error: f64,
    pub elements: usize,
    pub scheme: Scheme,
    pub bits: u8,
    pub granularity: Granularity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BottleneckReport {
    /// Eligible parameters, largest normalized error first.
    pub entries: Vec<BottleneckEntry>,
}

/// Ranks the eligible parameters by per-element quantization error; ties
/// keep graph order.
pub fn bottleneck_report<T: Real>(graph: &Graph<T>, qgt: &QgtConfig) -> Result<BottleneckReport, QgtError> {
    let terms = qgt.resolve(graph.params())?;
    let errors = assemble_loss(0.0, graph.params(), &terms)?.errors;
    let mut entries: Vec<BottleneckEntry> = terms
        .iter()
        .map(|t| {
            let elements = graph.params()[t.index].len();
            let error = errors[&t.id];
            BottleneckEntry {
                param_id: t.id.clone(),
                error,
                normalized_error: error / elements as f64,
                elements,
                scheme: t.spec.scheme(),
                bits: t.spec.bits(),
                granularity: t.spec.granularity(),
            }
        })
        .collect();
    entries.sort_by(|a, b| b.normalized_error.total_cmp(&a.normalized_error));
    Ok(BottleneckReport { entries })
}

/// Raw and dequantized counts over shared, equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub raw: Vec<usize>,
    pub dequantized: Vec<usize>,
}

impl Histogram {
    pub fn occupied_dequantized(&self) -> usize {
        self.dequantized.iter().filter(|&&c| c > 0).count()
    }

    /// `Σ |raw - dequantized|` as a fraction of `2 · count`, in `[0, 1]`.
    pub fn l1_distance(&self) -> f64 {
        let total: usize = self.raw.iter().sum();
        let diff: usize = self.raw.iter().zip(&self.dequantized).map(|(a, b)| a.abs_diff(*b)).sum();
        diff as f64 / (2 * total.max(1)) as f64
    }
}

/// Bins both tensors over the union of their ranges. A zero-width range is
/// widened by one half on each side.
pub fn histogram<T: Real>(raw: &[T], dequantized: &[T], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let all = raw.iter().chain(dequantized).map(|v| v.as_f64());
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let count = |values: &[T]| {
        let mut c = vec![0usize; bins];
        for v in values {
            let pos = ((v.as_f64() - lo) / width).floor();
            c[(pos.max(0.0) as usize).min(bins - 1)] += 1;
        }
        c
    };
    Histogram {
        edges,
        raw: count(raw),
        dequantized: count(dequantized),
    }
}

/// File-name-safe form of a parameter id: `conv2d_0/kernel` becomes
/// `conv2d_0__kernel`.
pub fn sanitize_id(id: &str) -> String {
    let mut out = String::with_capacity(id.len() + 2);
    for c in id.chars() {
        match c {
            '/' => out.push_str("__"),
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' => out.push(c),
            _ => out.push('_'),
        }
    }
    out
}

/// Writes one CSV per eligible parameter into `dir` with columns
/// `bin_left,bin_right,count_raw,count_dequantized`.
pub fn export_histograms<T: Real>(
    graph: &Graph<T>,
    qgt: &QgtConfig,
    bins: usize,
    dir: &Path,
) -> Result<Vec<(String, PathBuf, Histogram)>, QgtError> {
    let terms = qgt.resolve(graph.params())?;
    if terms.is_empty() {
        return Err(QgtError::Config("no parameter is eligible for quantization".into()));
    }
    if bins == 0 {
        return Err(QgtError::Config("histograms need at least one bin".into()));
    }
    let io = |source: std::io::Error| QgtError::Io {
        path: dir.to_path_buf(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut out = Vec::with_capacity(terms.len());
    for t in &terms {
        let w = &graph.params()[t.index].value;
        let wq = roundtrip(w, &t.spec)?;
        let h = histogram(w.data(), wq.data(), bins);
        let path = dir.join(format!("{}.csv", sanitize_id(&t.id)));
        let fail = |e: csv::Error| QgtError::Io {
            path: path.clone(),
            source: e.into(),
        };
        let mut wtr = csv::Writer::from_path(&path).map_err(fail)?;
        wtr.write_record(["bin_left", "bin_right", "count_raw", "count_dequantized"])
            .map_err(fail)?;
        for b in 0..bins {
            wtr.write_record([
                h.edges[b].to_string(),
                h.edges[b + 1].to_string(),
                h.raw[b].to_string(),
                h.dequantized[b].to_string(),
            ])
            .map_err(fail)?;
        }
        wtr.flush().map_err(|e| QgtError::Io {
            path: path.clone(),
            source: e,
        })?;
        out.push((t.id.clone(), path, h));
    }
    Ok(out)
}

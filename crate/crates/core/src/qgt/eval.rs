use super::{QgtConfig, QgtError};
use crate::autodiff::Graph;
use crate::data::{DataError, Dataset};
use crate::format::PackedModel;
use crate::quant::{dequantize, quantize_fitted, QuantizedTensor};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Raw weights.
    Fp32,
    /// Every eligible weight replaced by `D(Q(w))`.
    Dequantized,
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fp32" => Ok(EvalMode::Fp32),
            "dequantized" => Ok(EvalMode::Dequantized),
            other => Err(format!("unknown evaluation mode `{other}`")),
        }
    }
}

/// Copy of `graph` with every eligible parameter projected onto its grid.
pub fn dequantized_copy<T: Real>(graph: &Graph<T>, qgt: &QgtConfig) -> Result<Graph<T>, QgtError> {
    Ok(ptq(graph, qgt)?.graph)
}

/// Eval-mode top-1 accuracy. Activations stay full precision in both modes.
pub fn evaluate<T: Real>(graph: &Graph<T>, data: &Dataset, mode: EvalMode, qgt: &QgtConfig) -> Result<f64, QgtError> {
    if data.is_empty() {
        return Err(DataError::Invalid("evaluation set is empty".into()).into());
    }
    let projected;
    let g = match mode {
        EvalMode::Fp32 => graph,
        EvalMode::Dequantized => {
            projected = dequantized_copy(graph, qgt)?;
            &projected
        }
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch::<T>(chunk);
        let pred = g.predict_classes(&x)?;
        correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct PtqResult<T> {
    /// The input graph with eligible parameters replaced by their
    /// dequantized codes.
    pub graph: Graph<T>,
    /// Codes and fitted parameters per eligible parameter id.
    pub quantized: Vec<(String, QuantizedTensor<T>)>,
}

/// Post-training quantization: fits and quantizes every eligible
/// parameter without any training. λ values are ignored.
pub fn ptq<T: Real>(graph: &Graph<T>, qgt: &QgtConfig) -> Result<PtqResult<T>, QgtError> {
    let terms = qgt.resolve(graph.params())?;
    let mut out = graph.clone();
    let mut quantized = Vec::with_capacity(terms.len());
    for t in &terms {
        let q = quantize_fitted(&out.params()[t.index].value, &t.spec)?;
        out.params_mut()[t.index].value = dequantize(&q);
        quantized.push((t.id.clone(), q));
    }
    Ok(PtqResult { graph: out, quantized })
}

/// Packs every parameter of `graph`: eligible ones as codes, the rest as
/// raw `f32`.
pub fn pack_graph(graph: &Graph<f32>, qgt: &QgtConfig) -> Result<PackedModel, QgtError> {
    let terms = qgt.resolve(graph.params())?;
    let mut model = PackedModel::new();
    for (i, p) in graph.params().iter().enumerate() {
        match terms.iter().find(|t| t.index == i) {
            Some(t) => model.push_codes(p.id.clone(), quantize_fitted(&p.value, &t.spec)?),
            None => model.push_raw(p.id.clone(), p.value.clone()),
        }
    }
    Ok(model)
}

/// Loads the values of a packed model into a graph with the same
/// parameter ids and shapes.
pub fn unpack_into(graph: &mut Graph<f32>, model: &PackedModel) -> Result<(), QgtError> {
    for rec in &model.records {
        if graph.param(&rec.name).is_none() {
            return Err(QgtError::Config(format!(
                "packed tensor `{}` has no counterpart in the architecture",
                rec.name
            )));
        }
    }
    let ids: Vec<String> = graph.params().iter().map(|p| p.id.clone()).collect();
    for id in ids {
        let payload = model
            .get(&id)
            .ok_or_else(|| QgtError::Config(format!("packed model lacks parameter `{id}`")))?;
        graph.set_param(&id, payload.values())?;
    }
    Ok(())
}

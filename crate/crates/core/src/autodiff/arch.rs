use super::ops::Padding;
use serde::{Deserialize, Serialize};

/// Serializable description of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: Padding,
    },
    Relu,
    BatchNorm,
    Flatten,
}

fn one() -> usize {
    1
}

/// Per-sample input shape plus the layer list. The last layer's output
/// width is the class count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// conv(8, 3x3) → BN → relu → conv(16, 3x3, stride 2) → BN → relu →
    /// flatten → dense(classes), over 16×16×1 images.
    pub fn reference(classes: usize) -> Self {
        Self {
            input: vec![16, 16, 1],
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 8,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    filters: 16,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Same,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { units: classes },
            ],
        }
    }

    /// The same network with every batch-norm layer removed, which is the
    /// shape of a graph after batch-norm folding.
    pub fn without_batch_norm(&self) -> Self {
        Self {
            input: self.input.clone(),
            layers: self
                .layers
                .iter()
                .filter(|l| **l != LayerSpec::BatchNorm)
                .cloned()
                .collect(),
        }
    }

    /// Two dense layers with a ReLU between them over flat features.
    pub fn mlp(features: usize, hidden: usize, classes: usize) -> Self {
        Self {
            input: vec![features],
            layers: vec![
                LayerSpec::Dense { units: hidden },
                LayerSpec::Relu,
                LayerSpec::Dense { units: classes },
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_specs_parse_from_toml() {
        #[derive(Deserialize)]
        struct Doc {
            layers: Vec<LayerSpec>,
        }
        let doc: Doc = toml::from_str(
            r#"layers = [
                { type = "conv2d", filters = 4, kernel = 3, stride = 2, padding = "valid" },
                { type = "batch_norm" },
                { type = "relu" },
                { type = "flatten" },
                { type = "dense", units = 3 },
            ]"#,
        )
        .unwrap();
        assert_eq!(doc.layers.len(), 5);
        assert_eq!(
            doc.layers[0],
            LayerSpec::Conv2d {
                filters: 4,
                kernel: 3,
                stride: 2,
                padding: Padding::Valid
            }
        );
        let bad: Result<Doc, _> = toml::from_str(r#"layers = [{ type = "dense", units = 3, extra = 1 }]"#);
        assert!(bad.is_err());
    }
}

use crate::autodiff::{Graph, GraphError, Layer};
use crate::scalar::Real;

/// Absorbs every batch-norm layer into the dense or conv2d layer right
/// before it, using the running statistics:
///
/// `k'[.., c] = k[.., c] · γ_c / √(σ²_c + ε)` and
/// `b'_c = (b_c − μ_c) · γ_c / √(σ²_c + ε) + β_c`.
///
/// The batch-norm nodes and their parameters are removed; eval-mode outputs
/// are unchanged up to rounding.
pub fn fold_batch_norm<T: Real>(graph: &Graph<T>) -> Result<Graph<T>, GraphError> {
    let eps = T::of(graph.norm().epsilon);
    let mut params = graph.params().to_vec();
    let mut removed = vec![false; params.len()];
    let mut kept_layers: Vec<Layer> = Vec::new();
    for layer in graph.layers() {
        let Layer::BatchNorm {
            name,
            gamma,
            beta,
            mean,
            var,
        } = layer
        else {
            kept_layers.push(layer.clone());
            continue;
        };
        let (kernel, bias) = match kept_layers.last() {
            Some(Layer::Dense { kernel, bias, .. }) | Some(Layer::Conv2d { kernel, bias, .. }) => (*kernel, *bias),
            _ => {
                return Err(GraphError::Architecture(format!(
                    "cannot fold `{name}`: it does not directly follow a dense or conv2d layer"
                )))
            }
        };
        let scale: Vec<T> = params[*gamma]
            .value
            .data()
            .iter()
            .zip(params[*var].value.data())
            .map(|(&g, &v)| g / (v + eps).sqrt())
            .collect();
        let channels = scale.len();
        for (i, k) in params[kernel].value.data_mut().iter_mut().enumerate() {
            *k *= scale[i % channels];
        }
        let mu = params[*mean].value.data().to_vec();
        let be = params[*beta].value.data().to_vec();
        for (c, b) in params[bias].value.data_mut().iter_mut().enumerate() {
            *b = (*b - mu[c]) * scale[c] + be[c];
        }
        for i in [*gamma, *beta, *mean, *var] {
            removed[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; params.len()];
    let mut next = 0;
    for (i, gone) in removed.iter().enumerate() {
        if !gone {
            remap[i] = next;
            next += 1;
        }
    }
    let layers = kept_layers
        .into_iter()
        .map(|layer| match layer {
            Layer::Dense { name, kernel, bias } => Layer::Dense {
                name,
                kernel: remap[kernel],
                bias: remap[bias],
            },
            Layer::Conv2d {
                name,
                kernel,
                bias,
                stride,
                padding,
            } => Layer::Conv2d {
                name,
                kernel: remap[kernel],
                bias: remap[bias],
                stride,
                padding,
            },
            other => other,
        })
        .collect();
    let params = params
        .into_iter()
        .zip(&removed)
        .filter(|(_, &gone)| !gone)
        .map(|(mut p, _)| {
            p.grad.fill(T::zero());
            p
        })
        .collect();
    Ok(Graph::from_parts(
        graph.input_shape().to_vec(),
        graph.classes(),
        layers,
        params,
        graph.norm(),
    ))
}

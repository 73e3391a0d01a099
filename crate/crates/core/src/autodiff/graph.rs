use super::arch::{Architecture, LayerSpec};
use super::ops::{self, ConvGeometry, Padding};
use super::{GraphError, ParamKind, Parameter};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Batch-norm epsilon and running-statistics momentum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSettings {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for NormSettings {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

/// A node of the graph. Parameter fields index into the graph's registry.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense {
        name: String,
        kernel: usize,
        bias: usize,
    },
    Conv2d {
        name: String,
        kernel: usize,
        bias: usize,
        stride: usize,
        padding: Padding,
    },
    Relu {
        name: String,
    },
    BatchNorm {
        name: String,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Flatten {
        name: String,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense { name, .. }
            | Layer::Conv2d { name, .. }
            | Layer::Relu { name }
            | Layer::BatchNorm { name, .. }
            | Layer::Flatten { name } => name,
        }
    }
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Dense { input: Tensor<T> },
    Conv { input: Tensor<T>, geom: ConvGeometry },
    Relu { mask: Vec<bool> },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Flatten,
}

#[derive(Debug, Clone)]
struct Tape<T> {
    caches: Vec<Cache<T>>,
    dlogits: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Mean cross-entropy over the batch.
    pub loss: T,
    /// Softmax probabilities, `[batch, classes]`.
    pub predictions: Tensor<T>,
    pub logits: Tensor<T>,
}

struct Propagation<T> {
    logits: Tensor<T>,
    caches: Vec<Cache<T>>,
    running: Vec<(usize, usize, Vec<T>, Vec<T>)>,
}

#[derive(Debug, Clone)]
pub struct Graph<T> {
    input_shape: Vec<usize>,
    classes: usize,
    layers: Vec<Layer>,
    params: Vec<Parameter<T>>,
    norm: NormSettings,
    tape: Option<Tape<T>>,
}

impl<T: Real> Graph<T> {
    /// Builds a graph with He-style uniform fan-in initialization drawn from
    /// a ChaCha stream seeded by `seed`.
    pub fn from_architecture(arch: &Architecture, seed: u64) -> Result<Self, GraphError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(arch, NormSettings::default(), &mut rng)
    }

    pub fn build(arch: &Architecture, norm: NormSettings, rng: &mut impl Rng) -> Result<Self, GraphError> {
        if arch.input.is_empty() || arch.input.contains(&0) {
            return Err(GraphError::Architecture(format!("bad input shape {:?}", arch.input)));
        }
        let mut shape = arch.input.clone();
        let mut layers = Vec::new();
        let mut params: Vec<Parameter<T>> = Vec::new();
        let mut counters = [0usize; 5];
        let mut next_name = |slot: usize, base: &str| {
            let n = counters[slot];
            counters[slot] += 1;
            format!("{base}_{n}")
        };
        let push = |params: &mut Vec<Parameter<T>>, id: String, value: Tensor<T>, kind| {
            params.push(Parameter::new(id, value, kind));
            params.len() - 1
        };
        for spec in &arch.layers {
            match *spec {
                LayerSpec::Dense { units } => {
                    let name = next_name(0, "dense");
                    let &[d_in] = shape.as_slice() else {
                        return Err(GraphError::Dimension {
                            layer: name,
                            detail: format!("dense expects flat features, got {shape:?}; add a flatten layer"),
                        });
                    };
                    if units == 0 {
                        return Err(GraphError::Architecture(format!("{name} has zero units")));
                    }
                    let k = he_uniform(&[d_in, units], d_in, rng);
                    let kernel = push(&mut params, format!("{name}/kernel"), k, ParamKind::Kernel);
                    let bias = push(&mut params, format!("{name}/bias"), Tensor::zeros(&[units]), ParamKind::Bias);
                    layers.push(Layer::Dense { name, kernel, bias });
                    shape = vec![units];
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel: size,
                    stride,
                    padding,
                } => {
                    let name = next_name(1, "conv2d");
                    let &[h, w, cin] = shape.as_slice() else {
                        return Err(GraphError::Dimension {
                            layer: name,
                            detail: format!("conv2d expects [h, w, c] samples, got {shape:?}"),
                        });
                    };
                    if filters == 0 || size == 0 || stride == 0 {
                        return Err(GraphError::Architecture(format!("{name} has a zero filter/kernel/stride")));
                    }
                    let g = ConvGeometry::new(&name, &[1, h, w, cin], &[size, size, cin, filters], stride, padding)?;
                    let k = he_uniform(&[size, size, cin, filters], size * size * cin, rng);
                    let kernel = push(&mut params, format!("{name}/kernel"), k, ParamKind::Kernel);
                    let bias = push(&mut params, format!("{name}/bias"), Tensor::zeros(&[filters]), ParamKind::Bias);
                    layers.push(Layer::Conv2d {
                        name,
                        kernel,
                        bias,
                        stride,
                        padding,
                    });
                    shape = vec![g.out_h, g.out_w, filters];
                }
                LayerSpec::Relu => layers.push(Layer::Relu {
                    name: next_name(2, "relu"),
                }),
                LayerSpec::BatchNorm => {
                    let name = next_name(3, "batch_norm");
                    let c = *shape.last().expect("non-empty shape");
                    let gamma = push(&mut params, format!("{name}/gamma"), Tensor::full(&[c], T::one()), ParamKind::BnGamma);
                    let beta = push(&mut params, format!("{name}/beta"), Tensor::zeros(&[c]), ParamKind::BnBeta);
                    let mean = push(&mut params, format!("{name}/moving_mean"), Tensor::zeros(&[c]), ParamKind::BnMean);
                    let var = push(&mut params, format!("{name}/moving_var"), Tensor::full(&[c], T::one()), ParamKind::BnVar);
                    layers.push(Layer::BatchNorm {
                        name,
                        gamma,
                        beta,
                        mean,
                        var,
                    });
                }
                LayerSpec::Flatten => {
                    layers.push(Layer::Flatten {
                        name: next_name(4, "flatten"),
                    });
                    shape = vec![shape.iter().product()];
                }
            }
        }
        let &[classes] = shape.as_slice() else {
            return Err(GraphError::Architecture(format!(
                "network must end in flat logits, ends in {shape:?}"
            )));
        };
        if classes < 2 {
            return Err(GraphError::Architecture("need at least two classes".into()));
        }
        Ok(Self {
            input_shape: arch.input.clone(),
            classes,
            layers,
            params,
            norm,
            tape: None,
        })
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        classes: usize,
        layers: Vec<Layer>,
        params: Vec<Parameter<T>>,
        norm: NormSettings,
    ) -> Self {
        Self {
            input_shape,
            classes,
            layers,
            params,
            norm,
            tape: None,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn norm(&self) -> NormSettings {
        self.norm
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.params
    }

    pub fn param_index(&self, id: &str) -> Option<usize> {
        self.params.iter().position(|p| p.id == id)
    }

    pub fn param(&self, id: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.id == id)
    }

    pub fn param_mut(&mut self, id: &str) -> Option<&mut Parameter<T>> {
        self.params.iter_mut().find(|p| p.id == id)
    }

    /// Replaces a parameter's value; the shape must not change.
    pub fn set_param(&mut self, id: &str, value: Tensor<T>) -> Result<(), GraphError> {
        let p = self
            .param_mut(id)
            .ok_or_else(|| GraphError::UnknownParam(id.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(GraphError::Dimension {
                layer: id.to_string(),
                detail: format!("expected shape {:?}, got {:?}", p.value.shape(), value.shape()),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    /// Same graph in another scalar type; the tape is dropped.
    pub fn cast<U: Real>(&self) -> Graph<U> {
        Graph {
            input_shape: self.input_shape.clone(),
            classes: self.classes,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    id: p.id.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                    kind: p.kind,
                })
                .collect(),
            norm: self.norm,
            tape: None,
        }
    }

    /// Computes the mean cross-entropy and class probabilities. Train mode
    /// uses batch statistics in batch norm, updates running statistics, and
    /// records the tape consumed by [`Graph::backward`].
    pub fn forward(&mut self, input: &Tensor<T>, labels: &[usize], mode: Mode) -> Result<ForwardOutput<T>, GraphError> {
        let batch = self.check_input(input)?;
        if labels.len() != batch {
            return Err(GraphError::Dimension {
                layer: "softmax_cross_entropy".into(),
                detail: format!("{} labels for a batch of {batch}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(GraphError::Dimension {
                layer: "softmax_cross_entropy".into(),
                detail: format!("label {bad} out of range for {} classes", self.classes),
            });
        }
        let prop = self.propagate(input, mode)?;
        let (loss, probs) = ops::softmax_cross_entropy(prop.logits.data(), self.classes, labels);
        let predictions = Tensor::new(vec![batch, self.classes], probs).expect("probabilities shape");
        self.tape = match mode {
            Mode::Train => {
                for (mi, vi, m, v) in prop.running {
                    let momentum = T::of(self.norm.momentum);
                    let (lo, hi) = self.params.split_at_mut(vi.max(mi));
                    let (mean, var) = if mi < vi { (&mut lo[mi], &mut hi[0]) } else { (&mut hi[0], &mut lo[vi]) };
                    ops::update_running(mean.value.data_mut(), var.value.data_mut(), &m, &v, momentum);
                }
                let inv = T::one() / T::of_usize(batch);
                let mut dlogits = predictions.data().to_vec();
                for (row, &y) in dlogits.chunks_exact_mut(self.classes).zip(labels) {
                    row[y] -= T::one();
                    row.iter_mut().for_each(|d| *d *= inv);
                }
                Some(Tape {
                    caches: prop.caches,
                    dlogits,
                })
            }
            Mode::Eval => None,
        };
        Ok(ForwardOutput {
            loss,
            predictions,
            logits: prop.logits,
        })
    }

    /// Eval-mode logits; leaves the graph untouched.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>, GraphError> {
        self.check_input(input)?;
        Ok(self.propagate(input, Mode::Eval)?.logits)
    }

    /// Eval-mode arg-max class per sample.
    pub fn predict_classes(&self, input: &Tensor<T>) -> Result<Vec<usize>, GraphError> {
        let logits = self.logits(input)?;
        Ok(logits
            .data()
            .chunks_exact(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<usize, GraphError> {
        let shape = input.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(GraphError::Dimension {
                layer: "input".into(),
                detail: format!(
                    "expected [batch, {}], got {shape:?}",
                    self.input_shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
                ),
            });
        }
        Ok(shape[0])
    }

    fn propagate(&self, input: &Tensor<T>, mode: Mode) -> Result<Propagation<T>, GraphError> {
        let train = mode == Mode::Train;
        let eps = T::of(self.norm.epsilon);
        let mut caches = Vec::new();
        let mut running = Vec::new();
        let mut x = input.clone();
        for layer in &self.layers {
            match layer {
                Layer::Dense { name, kernel, bias } => {
                    let k = &self.params[*kernel].value;
                    let (d_in, d_out) = (k.shape()[0], k.shape()[1]);
                    if x.rank() != 2 || x.shape()[1] != d_in {
                        return Err(GraphError::Dimension {
                            layer: name.clone(),
                            detail: format!("expected [batch, {d_in}], got {:?}", x.shape()),
                        });
                    }
                    let n = x.shape()[0];
                    let y = ops::dense_apply(x.data(), k.data(), self.params[*bias].value.data(), n, d_in, d_out);
                    let y = Tensor::new(vec![n, d_out], y)?;
                    if train {
                        caches.push(Cache::Dense { input: x });
                    }
                    x = y;
                }
                Layer::Conv2d {
                    name,
                    kernel,
                    bias,
                    stride,
                    padding,
                } => {
                    let k = &self.params[*kernel].value;
                    let geom = ConvGeometry::new(name, x.shape(), k.shape(), *stride, *padding)?;
                    let y = ops::conv2d_apply(x.data(), k.data(), Some(self.params[*bias].value.data()), &geom);
                    if train {
                        caches.push(Cache::Conv { input: x, geom });
                    }
                    x = y;
                }
                Layer::Relu { .. } => {
                    if train {
                        caches.push(Cache::Relu {
                            mask: x.data().iter().map(|&v| v > T::zero()).collect(),
                        });
                    }
                    x.data_mut().iter_mut().for_each(|v| {
                        if !(*v > T::zero()) {
                            *v = T::zero();
                        }
                    });
                }
                Layer::BatchNorm {
                    name,
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let g = self.params[*gamma].value.data();
                    let c = *x.shape().last().expect("rank >= 1");
                    if c != g.len() {
                        return Err(GraphError::Dimension {
                            layer: name.clone(),
                            detail: format!("{} channels expected, input has {c}", g.len()),
                        });
                    }
                    let b = self.params[*beta].value.data();
                    let shape = x.shape().to_vec();
                    let y = if train {
                        let (m, v) = ops::channel_stats(x.data(), c);
                        let (y, xhat, inv_std) = ops::batch_norm_apply(x.data(), g, b, &m, &v, eps);
                        caches.push(Cache::BatchNorm { xhat, inv_std });
                        running.push((*mean, *var, m, v));
                        y
                    } else {
                        let m = self.params[*mean].value.data();
                        let v = self.params[*var].value.data();
                        ops::batch_norm_apply(x.data(), g, b, m, v, eps).0
                    };
                    x = Tensor::new(shape, y)?;
                }
                Layer::Flatten { .. } => {
                    let shape = x.shape().to_vec();
                    let n = shape[0];
                    let rest = shape[1..].iter().product::<usize>();
                    if train {
                        caches.push(Cache::Flatten);
                    }
                    x = x.reshape(&[n, rest])?;
                }
            }
        }
        if x.rank() != 2 || x.shape()[1] != self.classes {
            return Err(GraphError::Dimension {
                layer: "softmax_cross_entropy".into(),
                detail: format!("expected [batch, {}] logits, got {:?}", self.classes, x.shape()),
            });
        }
        Ok(Propagation {
            logits: x,
            caches,
            running,
        })
    }

    /// Fills every trainable parameter's gradient with `∂loss/∂value` for the
    /// most recent train-mode forward; non-trainable gradients are zeroed.
    pub fn backward(&mut self) -> Result<(), GraphError> {
        let tape = self.tape.take().ok_or_else(|| {
            GraphError::State("backward requires a preceding train-mode forward".into())
        })?;
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
        let mut d = tape.dlogits;
        let params = &mut self.params;
        for (li, (layer, cache)) in self.layers.iter().zip(tape.caches).enumerate().rev() {
            let want_input = li > 0;
            match (layer, cache) {
                (Layer::Dense { kernel, bias, .. }, Cache::Dense { input }) => {
                    let k = &params[*kernel].value;
                    let (d_in, d_out) = (k.shape()[0], k.shape()[1]);
                    let (dx, dk, db) = ops::dense_backward(input.data(), k.data(), &d, d_in, d_out, want_input);
                    params[*kernel].grad.data_mut().copy_from_slice(&dk);
                    params[*bias].grad.data_mut().copy_from_slice(&db);
                    d = dx.unwrap_or_default();
                }
                (Layer::Conv2d { kernel, bias, .. }, Cache::Conv { input, geom }) => {
                    let k = &params[*kernel].value;
                    let (dx, dk, db) = ops::conv2d_backward(input.data(), k.data(), &d, &geom, want_input);
                    params[*kernel].grad.data_mut().copy_from_slice(&dk);
                    params[*bias].grad.data_mut().copy_from_slice(&db);
                    d = dx.unwrap_or_default();
                }
                (Layer::Relu { .. }, Cache::Relu { mask }) => {
                    for (g, keep) in d.iter_mut().zip(mask) {
                        if !keep {
                            *g = T::zero();
                        }
                    }
                }
                (Layer::BatchNorm { gamma, beta, .. }, Cache::BatchNorm { xhat, inv_std }) => {
                    let (dx, dg, db) = ops::batch_norm_backward(&d, &xhat, &inv_std, params[*gamma].value.data());
                    params[*gamma].grad.data_mut().copy_from_slice(&dg);
                    params[*beta].grad.data_mut().copy_from_slice(&db);
                    d = dx;
                }
                (Layer::Flatten { .. }, Cache::Flatten) => {}
                (layer, _) => {
                    return Err(GraphError::State(format!("tape does not match layer `{}`", layer.name())));
                }
            }
        }
        for p in params.iter_mut().filter(|p| !p.trainable) {
            p.grad.fill(T::zero());
        }
        Ok(())
    }

    /// ReLU activation pattern recorded on the current tape.
    pub(crate) fn relu_pattern(&self) -> Vec<bool> {
        self.tape
            .iter()
            .flat_map(|t| t.caches.iter())
            .filter_map(|c| match c {
                Cache::Relu { mask } => Some(mask.iter().copied()),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..limit)))
}

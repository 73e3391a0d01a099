#![allow(dead_code)]

use qgt_core::autodiff::{Adam, Architecture, Graph, Mode, Optimizer, Parameter, Sgd};
use qgt_core::data::{synthesize, Dataset, SynthKind, SynthOptions};
use qgt_core::format::PackedModel;
use qgt_core::qgt::{
    epoch_batches, evaluate, ptq, train, EvalMode, OptimizerKind, QgtConfig, TrainConfig, SHUFFLE_STREAM,
};
use qgt_core::quant::{fit_params, quantize_fitted, Granularity, QuantParams, QuantizedTensor, QuantizerSpec, Scheme};
use qgt_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;

/// Plain mini-batch training with no quantization code anywhere in the loop.
pub fn baseline_train(graph: &mut Graph<f32>, data: &Dataset, cfg: &TrainConfig) {
    let mut opt: Box<dyn Optimizer<f32>> = match cfg.optimizer {
        OptimizerKind::Sgd => Box::new(Sgd::new(cfg.learning_rate).unwrap()),
        OptimizerKind::Adam => Box::new(Adam::<f32>::with_lr(cfg.learning_rate).unwrap()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    for _ in 0..cfg.epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            let (x, y) = data.batch::<f32>(&idx);
            graph.forward(&x, &y, Mode::Train).unwrap();
            graph.backward().unwrap();
            opt.step(graph.params_mut());
        }
    }
}

pub fn bits_of(params: &[Parameter<f32>]) -> Vec<Vec<u32>> {
    params
        .iter()
        .map(|p| p.value.data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

pub fn per_channel(bits: u8) -> QuantizerSpec {
    QuantizerSpec::new(Scheme::Asymmetric, bits, Granularity::PerChannel { axis: -1 }).unwrap()
}

pub fn quiet(epochs: usize, lr: f64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(epochs, 32, OptimizerKind::Adam, lr, seed);
    cfg.evaluate_epochs = false;
    cfg
}

/// The desk-scale detection task: faint small rectangles in heavy noise.
pub fn tiny_task(samples: usize, seed: u64) -> Dataset {
    synthesize(&SynthOptions {
        noise: 0.6,
        object_fraction: 0.03,
        ..SynthOptions::new(SynthKind::TinyImages, samples, seed)
    })
    .unwrap()
}

/// One seed of the accuracy-trend protocol.
#[derive(Debug, Clone, Copy)]
pub struct TrendRow {
    pub fp32: f64,
    pub ptq: f64,
    pub qgt: f64,
}

impl TrendRow {
    pub fn qgt_drop(&self) -> f64 {
        100.0 * (self.fp32 - self.qgt)
    }

    pub fn gap_over_ptq(&self) -> f64 {
        100.0 * (self.qgt - self.ptq)
    }
}

pub const TREND_LAMBDA: f64 = 5.0;

/// Trains the FP32 baseline for `seed`, quantizes it after training, and
/// separately fine-tunes a copy of it under QGT. All accuracies are on a
/// held-out set.
pub fn trend_protocol(seed: u64, bits_list: &[u8]) -> Vec<TrendRow> {
    let train_set = tiny_task(2000, 100 + seed);
    let eval_set = tiny_task(1000, 900 + seed);
    let mut base = Graph::<f32>::from_architecture(&Architecture::reference(2), seed).unwrap();
    let plain = QgtConfig::new(0.0, per_channel(8));
    train(&mut base, &train_set, None, &quiet(10, 1e-3, seed), &plain).unwrap();
    let fp32 = evaluate(&base, &eval_set, EvalMode::Fp32, &plain).unwrap();
    bits_list
        .iter()
        .map(|&bits| {
            let qgt_cfg = QgtConfig::new(TREND_LAMBDA, per_channel(bits));
            let quantized = ptq(&base, &qgt_cfg).unwrap().graph;
            let ptq_acc = evaluate(&quantized, &eval_set, EvalMode::Fp32, &qgt_cfg).unwrap();
            let mut tuned = base.clone();
            train(&mut tuned, &train_set, None, &quiet(10, 5e-4, seed + 50), &qgt_cfg).unwrap();
            let qgt = evaluate(&tuned, &eval_set, EvalMode::Dequantized, &qgt_cfg).unwrap();
            TrendRow { fp32, ptq: ptq_acc, qgt }
        })
        .collect()
}

/// Mean squared distance to the grid per element over the eligible
/// parameters, divided by the squared mean scale.
pub fn relative_grid_error(graph: &Graph<f32>, qgt: &QgtConfig) -> f64 {
    let terms = qgt.resolve(graph.params()).unwrap();
    let report = qgt_core::qgt::assemble_loss(0.0, graph.params(), &terms).unwrap();
    let elements: usize = terms.iter().map(|t| graph.params()[t.index].len()).sum();
    let mut scales = Vec::new();
    for t in &terms {
        let p: QuantParams<f32> = fit_params(&graph.params()[t.index].value, &t.spec).unwrap();
        scales.extend(p.scales.iter().map(|&s| s as f64));
    }
    let mean_scale = scales.iter().sum::<f64>() / scales.len() as f64;
    let mean_error = report.errors.values().sum::<f64>() / elements as f64;
    mean_error / (mean_scale * mean_scale)
}

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut out = ((v + d / 2.0) / d).floor() as usize * divisor;
    out = out.max(divisor);
    if (out as f64) < 0.9 * v {
        out += divisor;
    }
    out
}

/// Kernel shapes of MobileNetV2 at width 0.25 with a 2-class head and
/// batch norm folded into the convolutions, plus the matching bias lengths.
pub fn mobilenet_v2_quarter() -> (Vec<Vec<usize>>, Vec<usize>) {
    let alpha = 0.25;
    let mut kernels = Vec::new();
    let mut biases = Vec::new();
    let mut push = |shape: Vec<usize>, kernels: &mut Vec<Vec<usize>>| {
        biases.push(*shape.last().unwrap());
        kernels.push(shape);
    };
    let first = make_divisible(32.0 * alpha, 8);
    push(vec![3, 3, 3, first], &mut kernels);
    let blocks = [(1, 16, 1), (6, 24, 2), (6, 32, 3), (6, 64, 4), (6, 96, 3), (6, 160, 3), (6, 320, 1)];
    let mut cin = first;
    for (t, c, n) in blocks {
        let cout = make_divisible(c as f64 * alpha, 8);
        for _ in 0..n {
            let hidden = cin * t;
            if t != 1 {
                push(vec![1, 1, cin, hidden], &mut kernels);
            }
            push(vec![3, 3, hidden, 1], &mut kernels);
            push(vec![1, 1, hidden, cout], &mut kernels);
            cin = cout;
        }
    }
    push(vec![1, 1, cin, 1280], &mut kernels);
    push(vec![1280, 2], &mut kernels);
    (kernels, biases)
}

/// The MobileNetV2 table as a packed model: kernels as `bits`-bit codes with
/// one (scale, offset) pair each, biases as raw FP32.
pub fn mobilenet_packed(bits: u8) -> PackedModel {
    let (kernels, biases) = mobilenet_v2_quarter();
    let spec = QuantizerSpec::asymmetric(bits).unwrap();
    let mut model = PackedModel::new();
    for (i, (shape, b)) in kernels.iter().zip(&biases).enumerate() {
        let n: usize = shape.iter().product();
        model.push_codes(
            format!("layer_{i}/kernel"),
            QuantizedTensor {
                shape: shape.clone(),
                codes: vec![0; n],
                params: QuantParams {
                    scales: vec![1.0],
                    offsets: vec![0.0],
                    axis: None,
                },
                spec,
            },
        );
        model.push_raw(format!("layer_{i}/bias"), Tensor::zeros(&[*b]));
    }
    model
}

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

/// Deterministic models covering every scheme, both granularities and raw
/// tensors. Values are exact binary fractions so the bytes do not depend on
/// platform rounding.
pub fn golden_models() -> Vec<(&'static str, PackedModel)> {
    let ramp = |shape: &[usize]| Tensor::from_fn(shape, |i| (i as f32 - 5.0) * 0.25);
    let mut two_bit = PackedModel::new();
    let codes = Tensor::new(vec![4], vec![0.0f32, 1.0, 2.0, 3.0]).unwrap();
    two_bit.push_codes("dense_0/kernel", quantize_fitted(&codes, &QuantizerSpec::asymmetric(2).unwrap()).unwrap());

    let mut mixed = PackedModel::new();
    for (i, scheme) in [Scheme::Asymmetric, Scheme::Symmetric, Scheme::Pow2].into_iter().enumerate() {
        let spec = QuantizerSpec::new(scheme, 3, Granularity::PerChannel { axis: -1 }).unwrap();
        mixed.push_codes(format!("conv2d_{i}/kernel"), quantize_fitted(&ramp(&[2, 2, 1, 3]), &spec).unwrap());
        mixed.push_raw(format!("conv2d_{i}/bias"), ramp(&[3]));
    }
    let spec = QuantizerSpec::new(Scheme::Symmetric, 8, Granularity::PerTensor).unwrap();
    mixed.push_codes("dense_0/kernel", quantize_fitted(&ramp(&[5, 2]), &spec).unwrap());

    vec![("two_bit.qgt", two_bit), ("mixed.qgt", mixed), ("empty.qgt", PackedModel::new())]
}

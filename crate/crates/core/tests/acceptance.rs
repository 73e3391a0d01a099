//! The acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion with its measurements, and exits non-zero if any fails.

mod common;

use common::{
    baseline_train, bits_of, fixture_dir, golden_models, mobilenet_packed, per_channel, quiet, relative_grid_error,
    tiny_task, trend_protocol, TrendRow, TREND_LAMBDA,
};
use qgt_core::autodiff::{
    finite_difference_check, Architecture, GradCheckOptions, Graph, LayerSpec, Padding,
};
use qgt_core::format::{pack, size_report, size_report_against, unpack, PackedModel};
use qgt_core::qgt::{
    bottleneck_report, dequantized_copy, export_histograms, fold_batch_norm, pack_graph, train, OptimizerKind, QgtConfig,
    TrainConfig,
};
use qgt_core::quant::{
    dequantize, fit_params, quant_error_grad, quantize, quantize_fitted, roundtrip, Granularity, QuantizerSpec,
    Scheme,
};
use qgt_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

type Outcome = (bool, String);

const SCHEMES: [Scheme; 3] = [Scheme::Asymmetric, Scheme::Symmetric, Scheme::Pow2];
const BITS: [u8; 4] = [2, 3, 4, 8];

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn gradient_nets() -> Vec<Architecture> {
    vec![
        Architecture {
            input: vec![6, 6, 2],
            layers: vec![
                LayerSpec::Conv2d {
                    filters: 3,
                    kernel: 3,
                    stride: 1,
                    padding: Padding::Same,
                },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv2d {
                    filters: 4,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Valid,
                },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 5 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Dense { units: 3 },
            ],
        },
        Architecture::mlp(4, 6, 3),
    ]
}

fn criterion_1() -> Outcome {
    let opts = GradCheckOptions {
        rel_step: 1e-5,
        ..GradCheckOptions::default()
    };
    let (mut worst, mut checked, mut failures) = (0.0f64, 0usize, Vec::new());
    for seed in 0..10u64 {
        for arch in gradient_nets() {
            let graph = Graph::<f64>::from_architecture(&arch, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
            let mut shape = vec![4];
            shape.extend(&arch.input);
            let x = random_tensor(&shape, &mut rng);
            let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..graph.classes())).collect();
            for p in graph.params().iter().filter(|p| p.trainable) {
                let r = finite_difference_check(&graph, &x, &y, &p.id, &opts).unwrap();
                worst = worst.max(r.max_rel_error);
                checked += r.checked;
                if !r.passed() {
                    failures.push(format!("seed {seed} {}", p.id));
                }
            }
        }
        // regularizer gradient with the fitted scale and offset held fixed
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_tensor(&[6, 4], &mut rng);
        for scheme in SCHEMES {
            let spec = QuantizerSpec::new(scheme, 3, Granularity::PerChannel { axis: -1 }).unwrap();
            let p = fit_params(&w, &spec).unwrap();
            let frozen = |v: &Tensor<f64>| -> f64 {
                let wq = dequantize(&quantize(v, &p, &spec).unwrap());
                wq.data().iter().zip(v.data()).map(|(a, b)| (a - b) * (a - b)).sum()
            };
            let g = quant_error_grad(&w, &spec).unwrap();
            for i in 0..w.len() {
                let c = i % 4;
                let pos = (w.data()[i] - p.offsets[c]) / p.scales[c];
                if (pos - pos.floor() - 0.5).abs() < 1e-3 {
                    continue;
                }
                let h = 1e-6;
                let (mut plus, mut minus) = (w.clone(), w.clone());
                plus.data_mut()[i] += h;
                minus.data_mut()[i] -= h;
                let numeric = (frozen(&plus) - frozen(&minus)) / (2.0 * h);
                let a = g.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
                if rel >= 1e-3 {
                    failures.push(format!("seed {seed} regularizer {scheme} entry {i}"));
                }
            }
        }
    }
    (
        failures.is_empty(),
        format!("10 seeds, {checked} entries, max relative error {worst:.2e}, {} failures {failures:?}", failures.len()),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut cases = 0;
    let mut problems = Vec::new();
    for scheme in SCHEMES {
        for bits in BITS {
            for per_ch in [false, true] {
                let g = if per_ch {
                    Granularity::PerChannel { axis: -1 }
                } else {
                    Granularity::PerTensor
                };
                let spec = QuantizerSpec::new(scheme, bits, g).unwrap();
                let (lo, hi) = spec.code_range();
                for trial in 0..250 {
                    let rows = rng.random_range(1..10);
                    let cols = rng.random_range(1..6);
                    let center = rng.random_range(-4.0f32..4.0);
                    let spread = rng.random_range(1e-3f32..3.0);
                    let w = Tensor::from_fn(&[rows, cols], |_| center + spread * rng.random_range(-1.0f32..1.0));
                    cases += 1;
                    let q = quantize_fitted(&w, &spec).unwrap();
                    if q.codes.iter().any(|&c| c < lo || c > hi) {
                        problems.push(format!("{spec} trial {trial}: code out of range"));
                    }
                    let wq = dequantize(&q);
                    if roundtrip(&wq, &spec).unwrap() != wq {
                        problems.push(format!("{spec} trial {trial}: not idempotent"));
                    }
                    let slices: Vec<Vec<f32>> = if per_ch {
                        (0..cols).map(|j| wq.data().iter().skip(j).step_by(cols).copied().collect()).collect()
                    } else {
                        vec![wq.data().to_vec()]
                    };
                    for s in slices {
                        if s.iter().map(|v| v.to_bits()).collect::<BTreeSet<_>>().len() > 1 << bits {
                            problems.push(format!("{spec} trial {trial}: too many levels"));
                        }
                    }
                    if scheme == Scheme::Pow2 && q.params.scales.iter().any(|s| s.log2().fract() != 0.0) {
                        problems.push(format!("{spec} trial {trial}: scale is not a power of two"));
                    }
                }
                for value in [0.0f32, -2.5, 1e-30, 7.0] {
                    let w = Tensor::full(&[3, 2], value);
                    cases += 1;
                    match roundtrip(&w, &spec) {
                        Ok(wq) if wq.is_finite() && roundtrip(&wq, &spec).unwrap() == wq => {}
                        other => problems.push(format!("{spec} constant {value}: {other:?}")),
                    }
                }
            }
        }
    }
    (
        problems.is_empty(),
        format!("{cases} random and degenerate tensors, 3 schemes x b in {{2,3,4,8}} x 2 granularities, {} violations {:?}", problems.len(), problems.first()),
    )
}

fn criterion_3() -> Outcome {
    let data = tiny_task(500, 3);
    let cfg = quiet(2, 1e-3, 3);
    let mut qgt_run = Graph::<f32>::from_architecture(&Architecture::reference(2), 3).unwrap();
    let report = train(&mut qgt_run, &data, None, &cfg, &QgtConfig::new(0.0, per_channel(2))).unwrap();
    let mut plain = Graph::<f32>::from_architecture(&Architecture::reference(2), 3).unwrap();
    baseline_train(&mut plain, &data, &cfg);
    let (a, b) = (bits_of(qgt_run.params()), bits_of(plain.params()));
    let differing = a.iter().zip(&b).filter(|(x, y)| x != y).count();
    (
        a == b && report.ptq_equivalent,
        format!(
            "{} steps, {} tensors, {differing} differ bitwise from the baseline trainer",
            report.steps.len(),
            a.len()
        ),
    )
}

fn criterion_4() -> Outcome {
    let qgt = QgtConfig::new(1e3, per_channel(2));
    let mut ratios = Vec::new();
    let mut grid = Vec::new();
    for seed in 0..5 {
        let data = tiny_task(2000, 40 + seed);
        let mut g = Graph::<f32>::from_architecture(&Architecture::reference(2), seed).unwrap();
        let mut cfg = TrainConfig::new(1, 32, OptimizerKind::Sgd, 2.5e-4, seed);
        cfg.steps = Some(200);
        cfg.evaluate_epochs = false;
        let report = train(&mut g, &data, None, &cfg, &qgt).unwrap();
        let first: f64 = report.steps[0].errors.values().sum();
        ratios.push(report.total_final_error() / first);
        grid.push(relative_grid_error(&g, &qgt));
    }
    let pass = ratios.iter().all(|&r| r < 0.01);
    let fmt = |v: &[f64]| v.iter().map(|r| format!("{r:.1e}")).collect::<Vec<_>>().join(", ");
    (
        pass,
        format!(
            "lambda 1e3, 200 SGD steps, final/initial error [{}] (need < 1e-2), error per element / scale^2 [{}]",
            fmt(&ratios),
            fmt(&grid)
        ),
    )
}

fn trend_rows() -> &'static Vec<[TrendRow; 2]> {
    static ROWS: OnceLock<Vec<[TrendRow; 2]>> = OnceLock::new();
    ROWS.get_or_init(|| {
        (0..3)
            .map(|seed| {
                let rows = trend_protocol(seed, &[2, 4]);
                [rows[0], rows[1]]
            })
            .collect()
    })
}

fn criterion_5() -> Outcome {
    let rows: Vec<TrendRow> = trend_rows().iter().map(|r| r[0]).collect();
    let pass = rows.iter().all(|r| r.gap_over_ptq() >= 5.0 && r.qgt_drop() <= 10.0);
    let detail = rows
        .iter()
        .enumerate()
        .map(|(s, r)| {
            format!(
                "seed {s}: fp32 {:.3} ptq {:.3} qgt {:.3} (gap {:+.1}, drop {:.1})",
                r.fp32,
                r.ptq,
                r.qgt,
                r.gap_over_ptq(),
                r.qgt_drop()
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    (pass, format!("2-bit per-channel, lambda {TREND_LAMBDA}: {detail}"))
}

fn criterion_6() -> Outcome {
    let rows: Vec<TrendRow> = trend_rows().iter().map(|r| r[1]).collect();
    let pass = rows.iter().all(|r| r.qgt_drop() <= 2.0);
    let detail = rows
        .iter()
        .enumerate()
        .map(|(s, r)| format!("seed {s}: fp32 {:.3} qgt {:.3} (drop {:.1})", r.fp32, r.qgt, r.qgt_drop()))
        .collect::<Vec<_>>()
        .join("; ");
    (pass, format!("4-bit per-channel, lambda {TREND_LAMBDA}: {detail}"))
}

fn criterion_7() -> Outcome {
    const PUBLISHED_FP32_KB: f64 = 1440.0;
    let model = mobilenet_packed(2);
    let own = size_report(&model);
    let report = size_report_against(&model, (PUBLISHED_FP32_KB * 1000.0) as usize);
    let kb = report.packed_bytes as f64 / 1000.0;
    let size_ok = (kb - 81.0).abs() <= 8.1;
    let ratio_ok = (report.compression_ratio - 17.7).abs() <= 1.77;
    let exact = pack(&model).unwrap().len() == report.packed_bytes;
    let four_bit_kb = size_report(&mobilenet_packed(4)).packed_bytes as f64 / 1000.0;
    (
        size_ok && ratio_ok && exact,
        format!(
            "{} elements, packed {kb:.1} KB (target 81 +/- 8.1), ratio vs published {PUBLISHED_FP32_KB} KB FP32 {:.1}x (target 17.7 +/- 1.77), ratio vs this table's own FP32 {:.1}x, same table at 4 bits {four_bit_kb:.1} KB (published 133)",
            model.element_count(),
            report.compression_ratio,
            own.compression_ratio
        ),
    )
}

fn random_model(rng: &mut ChaCha8Rng) -> PackedModel {
    let mut model = PackedModel::new();
    for i in 0..rng.random_range(0..6) {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..5)).collect();
        let t = Tensor::from_fn(&shape, |_| rng.random_range(-4.0f32..4.0));
        if rng.random_bool(0.3) {
            model.push_raw(format!("layer_{i}/bias"), t);
        } else {
            let scheme = SCHEMES[rng.random_range(0..3)];
            let bits = rng.random_range(2..=8);
            let g = if rng.random_bool(0.5) {
                Granularity::PerChannel { axis: -1 }
            } else {
                Granularity::PerTensor
            };
            let spec = QuantizerSpec::new(scheme, bits, g).unwrap();
            model.push_codes(format!("layer_{i}/kernel"), quantize_fitted(&t, &spec).unwrap());
        }
    }
    model
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut stable = 0;
    for _ in 0..100 {
        let bytes = pack(&random_model(&mut rng)).unwrap();
        if pack(&unpack(&bytes).unwrap()).unwrap() == bytes {
            stable += 1;
        }
    }
    let mut golden_ok = 0;
    let goldens = golden_models();
    for (name, model) in &goldens {
        let on_disk = std::fs::read(fixture_dir().join(name)).unwrap_or_default();
        if pack(model).unwrap() == on_disk && pack(&unpack(&on_disk).unwrap()).unwrap() == on_disk {
            golden_ok += 1;
        }
    }
    (
        stable == 100 && golden_ok == goldens.len(),
        format!("{stable}/100 random models stable, {golden_ok}/{} golden fixtures match", goldens.len()),
    )
}

fn criterion_9() -> Outcome {
    let data = tiny_task(400, 9);
    let mut g = Graph::<f32>::from_architecture(&Architecture::reference(2), 9).unwrap();
    let qgt = QgtConfig::new(0.0, per_channel(2));
    train(&mut g, &data, None, &quiet(2, 3e-3, 9), &qgt).unwrap();
    let folded = fold_batch_norm(&g).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let x = Tensor::from_fn(&[1, 16, 16, 1], |_| rng.random_range(-2.0f32..2.0));
        let a = g.logits(&x).unwrap();
        let b = folded.logits(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    let unfolded_size = size_report(&pack_graph(&g, &qgt).unwrap()).packed_bytes;
    let folded_size = size_report(&pack_graph(&folded, &qgt).unwrap()).packed_bytes;
    (
        worst <= 1e-4 && folded_size < unfolded_size,
        format!("max |logit difference| {worst:.2e} over 20 inputs, packed {folded_size} B folded vs {unfolded_size} B unfolded"),
    )
}

fn criterion_10() -> Outcome {
    let qgt = QgtConfig::new(0.0, per_channel(2));
    let base = Graph::<f32>::from_architecture(&Architecture::reference(2), 10).unwrap();
    let mut g = dequantized_copy(&base, &qgt).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for v in g.param_mut("conv2d_1/kernel").unwrap().value.data_mut() {
        *v += rng.random_range(-0.05f32..0.05);
    }
    let a = bottleneck_report(&g, &qgt).unwrap();
    let b = bottleneck_report(&g, &qgt).unwrap();
    let order: Vec<String> = a.entries.iter().map(|e| format!("{} {:.2e}", e.param_id, e.normalized_error)).collect();
    (
        a == b && a.entries[0].param_id == "conv2d_1/kernel",
        format!("ranking [{}], repeat identical: {}", order.join(", "), a == b),
    )
}

fn criterion_11() -> Outcome {
    let qgt = QgtConfig::new(0.0, QuantizerSpec::asymmetric(4).unwrap());
    let data = tiny_task(300, 11);
    let mut g = Graph::<f32>::from_architecture(&Architecture::reference(2), 11).unwrap();
    train(&mut g, &data, None, &quiet(1, 3e-3, 11), &qgt).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export_histograms(&g, &qgt, 128, dir.path()).unwrap();
    let occupied: Vec<String> = files.iter().map(|(id, _, h)| format!("{id} {}", h.occupied_dequantized())).collect();
    (
        files.iter().all(|(_, _, h)| h.occupied_dequantized() <= 16) && !files.is_empty(),
        format!("4-bit per-tensor, 128 bins, occupied dequantized bins [{}]", occupied.join(", ")),
    )
}

fn main() {
    // the libtest harness is off for this target; honour `--list` and filters gracefully
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let criteria: [(u32, fn() -> Outcome); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut failed = 0;
    for (n, run) in criteria {
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!pass);
        println!(
            "criterion {n}: {} ({:.1}s) {detail}",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {}/11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

//! `qgt`: train, quantize, evaluate and inspect quantization-guided models.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration or usage error,
//! 3 dataset I/O, 4 non-finite training loss, 5 incomplete run directory.
//!
//! Run directories are resolved against `$QGT_OUTPUT_ROOT` when it is set.

use clap::{Args, Parser, Subcommand, ValueEnum};
use qgt_core::autodiff::{Architecture, Graph};
use qgt_core::config::RunConfig;
use qgt_core::data::{read_qds_file, rebalance, synthesize, write_qds_file, DataError, Dataset, SynthKind, SynthOptions};
use qgt_core::format::{pack, size_report_against, unpack, PackedModel};
use qgt_core::qgt::{
    bottleneck_report, evaluate, export_histograms, fold_batch_norm, lambda_sweep, pack_graph, train, unpack_into,
    EvalMode, QgtConfig, QgtError,
};
use qgt_core::quant::{Granularity, QuantError, QuantizerSpec, Scheme};
use qgt_core::{Error, Graph32};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const REPORT_FILE: &str = "report.json";
const CHECKPOINT_FILE: &str = "checkpoint.qgt";
const MODEL_FILE: &str = "model.qgt";
const SIZE_FILE: &str = "size.json";
const MANIFEST_FILE: &str = "manifest.json";
const BOTTLENECK_FILE: &str = "bottleneck.json";
const HISTOGRAM_DIR: &str = "histograms";

#[derive(Parser)]
#[command(name = "qgt", version, about = "Quantization-guided training for small classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run configuration and write a run directory.
    Train(TrainArgs),
    /// Quantize a checkpoint into a packed model without further training.
    Quantize(QuantizeArgs),
    /// Top-1 accuracy of a checkpoint or packed model on a dataset.
    Eval(EvalArgs),
    /// Bottleneck ranking and weight histograms for a finished run.
    Report(ReportArgs),
    /// One training run per lambda, summarized as a CSV table.
    Sweep(SweepArgs),
    /// Generate a synthetic `.qds` dataset.
    SynthData(SynthArgs),
    /// Undersample the majority classes of a `.qds` dataset.
    Rebalance(RebalanceArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Asymmetric,
    Symmetric,
    Pow2,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Asymmetric => Scheme::Asymmetric,
            SchemeArg::Symmetric => Scheme::Symmetric,
            SchemeArg::Pow2 => Scheme::Pow2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    PerTensor,
    PerChannel,
}

#[derive(Args)]
struct QuantizeArgs {
    /// Run configuration whose `[model]` matches the checkpoint.
    #[arg(long)]
    config: PathBuf,
    /// FP32 checkpoint (`.qgt` with raw tensors).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Bit width, 2 to 8.
    #[arg(long)]
    bits: u8,
    #[arg(long, value_enum, default_value = "asymmetric")]
    scheme: SchemeArg,
    #[arg(long, value_enum, default_value = "per-tensor")]
    granularity: GranularityArg,
    /// Channel axis for per-channel quantization; negative counts from the end.
    #[arg(long, default_value_t = -1, allow_negative_numbers = true)]
    axis: isize,
    /// Keep batch-norm layers instead of folding them into the kernels.
    #[arg(long)]
    no_fold: bool,
    /// Packed model to write.
    #[arg(long)]
    output: PathBuf,
    /// Where to write the size report; defaults to the output path with a `.size.json` suffix.
    #[arg(long)]
    size_report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Fp32,
    Dequantized,
}

#[derive(Args)]
struct EvalArgs {
    /// Run configuration whose `[model]` and `[qgt]` apply to the model.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint or packed model.
    #[arg(long)]
    model: PathBuf,
    /// Dataset to evaluate on (`.qds`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "fp32")]
    mode: ModeArg,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// Histogram bins; defaults to the run's `[report] bins`.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated lambda values.
    #[arg(long, value_delimiter = ',', required = true, allow_negative_numbers = true)]
    lambdas: Vec<f64>,
    /// CSV to write; defaults to `sweep.csv` in the run directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Blobs,
    Rings,
    TinyImages,
}

impl From<KindArg> for SynthKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Blobs => SynthKind::Blobs,
            KindArg::Rings => SynthKind::Rings,
            KindArg::TinyImages => SynthKind::TinyImages,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: KindArg,
    #[arg(long)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Class 0 is drawn this many times as often as each other class.
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    imbalance: f64,
    #[arg(long)]
    noise: Option<f64>,
    /// Feature count for blobs.
    #[arg(long)]
    features: Option<usize>,
    /// Rectangle area as a fraction of the image, for tiny images.
    #[arg(long)]
    object_fraction: Option<f64>,
    #[arg(long)]
    brightness: Option<f64>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct RebalanceArgs {
    #[arg(long)]
    input: PathBuf,
    /// Target majority:minority ratio, e.g. 1 for balanced classes.
    #[arg(long, allow_negative_numbers = true)]
    ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

fn qgt_code(e: &QgtError) -> u8 {
    match e {
        QgtError::Config(_) | QgtError::Quant(QuantError::InvalidBits(_)) | QgtError::Optimizer(_) => 2,
        QgtError::Data(_) => 3,
        QgtError::NonFinite { .. } => 4,
        QgtError::Sweep { source, .. } => qgt_code(source),
        _ => 1,
    }
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let code = match &e {
            Error::Config(_) | Error::Quant(QuantError::InvalidBits(_)) => 2,
            Error::Data(_) => 3,
            Error::Qgt(q) => qgt_code(q),
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(1, format!("cannot write `{}`: {e}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Outcome {
    let text = serde_json::to_string_pretty(value).expect("json serializes");
    std::fs::write(path, text + "\n").map_err(|e| io_failure(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Outcome {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| io_failure(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| io_failure(path, e))
}

fn read_model(path: &Path) -> Outcome<PackedModel> {
    let bytes =
        std::fs::read(path).map_err(|e| Failure::new(1, format!("cannot read model `{}`: {e}", path.display())))?;
    unpack(&bytes).map_err(|e| Failure::new(1, format!("`{}`: {e}", path.display())))
}

/// Every parameter as raw `f32`, running statistics included.
fn checkpoint(graph: &Graph32) -> PackedModel {
    let mut model = PackedModel::new();
    for p in graph.params() {
        model.push_raw(p.id.clone(), p.value.clone());
    }
    model
}

/// A graph of the configured architecture holding the values of `model`.
/// Models without batch-norm tensors are taken to be folded.
fn load_graph(arch: &Architecture, model: &PackedModel) -> Outcome<Graph32> {
    let folded = !model.records.iter().any(|r| r.name.starts_with("batch_norm_"));
    let arch = if folded { arch.without_batch_norm() } else { arch.clone() };
    let mut graph = Graph::from_architecture(&arch, 0)?;
    unpack_into(&mut graph, model)?;
    Ok(graph)
}

fn load_data(path: &Path) -> Outcome<Dataset> {
    Ok(read_qds_file(path)?)
}

fn cmd_train(args: &TrainArgs) -> Outcome {
    let cfg = RunConfig::load(&args.config)?;
    let hash = cfg.hash();
    let data = load_data(&cfg.data.train)?;
    let eval = cfg.data.eval.as_deref().map(load_data).transpose()?;
    let mut graph = Graph32::from_architecture(&cfg.model, cfg.run.seed)?;
    let mut report = train(&mut graph, &data, eval.as_ref(), &cfg.train, &cfg.qgt)?;
    report.config_hash = Some(hash.clone());

    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).map_err(|e| io_failure(&dir, e))?;
    let folded = fold_batch_norm(&graph)?;
    let packed = pack_graph(&folded, &cfg.qgt)?;
    let sizes = size_report_against(&packed, 4 * graph.element_count());
    write_bytes(&dir.join(CHECKPOINT_FILE), &pack(&checkpoint(&graph))?)?;
    write_bytes(&dir.join(MODEL_FILE), &pack(&packed)?)?;
    let mut report_json = serde_json::to_value(&report).expect("report serializes");
    report_json["config"] = serde_json::to_value(&cfg).expect("config serializes");
    write_json(&dir.join(REPORT_FILE), &report_json)?;
    write_json(&dir.join(SIZE_FILE), &json!({ "config_hash": hash, "size": sizes }))?;
    write_json(
        &dir.join(MANIFEST_FILE),
        &json!({
            "config_hash": hash,
            "config": cfg,
            "files": { "report": REPORT_FILE, "checkpoint": CHECKPOINT_FILE, "model": MODEL_FILE, "size": SIZE_FILE },
        }),
    )?;
    println!(
        "{}",
        json!({
            "run_dir": dir,
            "config_hash": hash,
            "ptq_equivalent": report.ptq_equivalent,
            "accuracy_fp32": report.final_accuracy_fp32,
            "accuracy_dequantized": report.final_accuracy_dequantized,
            "packed_bytes": sizes.packed_bytes,
            "compression_ratio": sizes.compression_ratio,
        })
    );
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Outcome {
    let cfg = RunConfig::load(&args.config)?;
    let granularity = match args.granularity {
        GranularityArg::PerTensor => Granularity::PerTensor,
        GranularityArg::PerChannel => Granularity::PerChannel { axis: args.axis },
    };
    let spec = QuantizerSpec::new(args.scheme.into(), args.bits, granularity)?;
    let qgt = QgtConfig {
        quantizer: spec,
        quantizers: Default::default(),
        ..cfg.qgt.clone()
    };
    let source = read_model(&args.checkpoint)?;
    let graph = load_graph(&cfg.model, &source)?;
    let graph = if args.no_fold { graph } else { fold_batch_norm(&graph)? };
    let packed = pack_graph(&graph, &qgt)?;
    let sizes = size_report_against(&packed, 4 * source.element_count());
    write_bytes(&args.output, &pack(&packed)?)?;
    let size_path = args.size_report.clone().unwrap_or_else(|| {
        let mut name = args.output.as_os_str().to_owned();
        name.push(".size.json");
        PathBuf::from(name)
    });
    let out = json!({ "config_hash": cfg.hash(), "quantizer": spec, "size": sizes });
    write_json(&size_path, &out)?;
    println!("{}", serde_json::to_string(&out).expect("json serializes"));
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Outcome {
    let cfg = RunConfig::load(&args.config)?;
    let model = read_model(&args.model)?;
    let graph = load_graph(&cfg.model, &model)?;
    let data = load_data(&args.data)?;
    let mode = match args.mode {
        ModeArg::Fp32 => EvalMode::Fp32,
        ModeArg::Dequantized => EvalMode::Dequantized,
    };
    let accuracy = evaluate(&graph, &data, mode, &cfg.qgt)?;
    println!(
        "{}",
        json!({
            "model": args.model,
            "data": args.data,
            "mode": mode,
            "samples": data.len(),
            "accuracy": accuracy,
            "config_hash": cfg.hash(),
        })
    );
    Ok(())
}

fn incomplete(dir: &Path, detail: impl std::fmt::Display) -> Failure {
    Failure::new(5, format!("incomplete run directory `{}`: {detail}", dir.display()))
}

fn cmd_report(args: &ReportArgs) -> Outcome {
    let dir = &args.run;
    for file in [MANIFEST_FILE, REPORT_FILE, CHECKPOINT_FILE, MODEL_FILE] {
        if !dir.join(file).is_file() {
            return Err(incomplete(dir, format!("`{file}` is missing")));
        }
    }
    let manifest: Value = std::fs::read_to_string(dir.join(MANIFEST_FILE))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .ok_or_else(|| incomplete(dir, "unreadable manifest"))?;
    let cfg: RunConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| incomplete(dir, format!("manifest config: {e}")))?;
    let hash = cfg.hash();
    if manifest["config_hash"] != json!(hash) {
        return Err(incomplete(dir, "manifest hash does not match its config"));
    }
    let ckpt = read_model(&dir.join(CHECKPOINT_FILE)).map_err(|f| incomplete(dir, f.message))?;
    let graph = load_graph(&cfg.model, &ckpt)?;
    let bottleneck = bottleneck_report(&graph, &cfg.qgt)?;
    let bins = args.bins.unwrap_or(cfg.report.bins);
    let histograms = export_histograms(&graph, &cfg.qgt, bins, &dir.join(HISTOGRAM_DIR))?;
    let files: Vec<Value> = histograms
        .iter()
        .map(|(id, path, h)| {
            json!({
                "param_id": id,
                "file": path.strip_prefix(dir).unwrap_or(path),
                "occupied_dequantized_bins": h.occupied_dequantized(),
                "l1_distance": h.l1_distance(),
            })
        })
        .collect();
    let out = json!({ "config_hash": hash, "bins": bins, "bottleneck": bottleneck, "histograms": files });
    write_json(&dir.join(BOTTLENECK_FILE), &out)?;
    println!("{}", serde_json::to_string(&out).expect("json serializes"));
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Outcome {
    let cfg = RunConfig::load(&args.config)?;
    let data = load_data(&cfg.data.train)?;
    let eval = cfg.data.eval.as_deref().map(load_data).transpose()?;
    let factory = || Graph32::from_architecture(&cfg.model, cfg.run.seed).map_err(QgtError::from);
    let rows = lambda_sweep(factory, &data, eval.as_ref(), &cfg.train, &cfg.qgt, &args.lambdas)?;
    let path = args.output.clone().unwrap_or_else(|| cfg.output_dir().join("sweep.csv"));
    let mut text = String::from("lambda,accuracy_fp32,accuracy_dequantized,total_error\n");
    for r in &rows {
        text.push_str(&format!(
            "{},{},{},{}\n",
            r.lambda, r.accuracy_fp32, r.accuracy_dequantized, r.total_error
        ));
    }
    write_bytes(&path, text.as_bytes())?;
    println!("{}", json!({ "config_hash": cfg.hash(), "output": path, "rows": rows }));
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Outcome {
    let mut opts = SynthOptions::new(args.kind.into(), args.samples, args.seed);
    opts.classes = args.classes;
    opts.imbalance = args.imbalance;
    opts.noise = args.noise.unwrap_or(opts.noise);
    opts.features = args.features.unwrap_or(opts.features);
    opts.object_fraction = args.object_fraction.unwrap_or(opts.object_fraction);
    opts.brightness = args.brightness.unwrap_or(opts.brightness);
    let ds = synthesize(&opts).map_err(|e| Failure::new(2, e.to_string()))?;
    write_qds_file(&ds, &args.output)?;
    println!(
        "{}",
        json!({ "output": args.output, "samples": ds.len(), "class_counts": ds.class_counts() })
    );
    Ok(())
}

fn cmd_rebalance(args: &RebalanceArgs) -> Outcome {
    let ds = load_data(&args.input)?;
    let out = rebalance(&ds, args.ratio, args.seed).map_err(|e| match e {
        DataError::Io { .. } => Failure::from(e),
        other => Failure::new(2, other.to_string()),
    })?;
    write_qds_file(&out, &args.output)?;
    println!(
        "{}",
        json!({
            "output": args.output,
            "before": ds.class_counts(),
            "after": out.class_counts(),
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::SynthData(a) => cmd_synth(a),
        Command::Rebalance(a) => cmd_rebalance(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("qgt: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

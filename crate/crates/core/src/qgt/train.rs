use super::eval::{evaluate, EvalMode};
use super::{apply_regularizer, assemble_loss, QgtConfig, QgtError};
use crate::autodiff::{Adam, Graph, Mode, Optimizer, Sgd};
use crate::data::{DataError, Dataset};
use crate::scalar::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::time::Instant;

/// ChaCha stream used for shuffling; weight initialization uses stream 0 of
/// the same seed.
pub const SHUFFLE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Seed of the shuffling stream.
    #[serde(default)]
    pub seed: u64,
    /// When set, run exactly this many steps, cycling through epochs as
    /// needed, instead of `epochs` full epochs.
    #[serde(default)]
    pub steps: Option<usize>,
    /// Evaluate FP32 and dequantized accuracy after every epoch.
    #[serde(default = "yes")]
    pub evaluate_epochs: bool,
    /// Record every n-th step in the report.
    #[serde(default = "one")]
    pub log_every: usize,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

impl TrainConfig {
    pub fn new(epochs: usize, batch_size: usize, optimizer: OptimizerKind, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            optimizer,
            learning_rate,
            seed,
            steps: None,
            evaluate_epochs: true,
            log_every: 1,
        }
    }

    pub fn validate(&self) -> Result<(), QgtError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(QgtError::Config(format!(
                "learning rate must be finite and positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(QgtError::Config("batch size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(QgtError::Config("log_every must be positive".into()));
        }
        match self.steps {
            Some(0) => Err(QgtError::Config("steps must be positive".into())),
            None if self.epochs == 0 => Err(QgtError::Config("epochs must be positive".into())),
            _ => Ok(()),
        }
    }

    fn optimizer<T: Real>(&self) -> Result<Box<dyn Optimizer<T>>, QgtError> {
        Ok(match self.optimizer {
            OptimizerKind::Sgd => Box::new(Sgd::new(self.learning_rate)?),
            OptimizerKind::Adam => Box::new(Adam::<T>::with_lr(self.learning_rate)?),
        })
    }
}

/// One epoch's shuffled mini-batches. The last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub task_loss: f64,
    pub total_loss: f64,
    /// Unweighted quantization error per eligible parameter, before the step.
    pub errors: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_task_loss: f64,
    pub mean_total_loss: f64,
    /// Summed quantization error of the weights at the end of the epoch.
    pub quant_error: f64,
    pub accuracy_fp32: Option<f64>,
    pub accuracy_dequantized: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingReport {
    pub seed: u64,
    /// All λ are zero: the run is plain training followed by PTQ.
    pub ptq_equivalent: bool,
    pub train_config: TrainConfig,
    pub qgt_config: QgtConfig,
    /// Hash of the run configuration that produced this report, if any.
    pub config_hash: Option<String>,
    /// Resolved λ per eligible parameter.
    pub lambdas: BTreeMap<String, f64>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
    pub final_errors: BTreeMap<String, f64>,
    pub final_accuracy_fp32: f64,
    pub final_accuracy_dequantized: f64,
}

impl TrainingReport {
    /// JSON with every wall-clock field zeroed, for determinism checks.
    pub fn timing_free_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(epochs) = v.get_mut("epochs").and_then(|e| e.as_array_mut()) {
            for e in epochs {
                e["seconds"] = serde_json::json!(0.0);
            }
        }
        v
    }

    pub fn total_final_error(&self) -> f64 {
        self.final_errors.values().sum()
    }
}

/// Trains `graph` on `data` under the QGT loss. After each task backward
/// pass every eligible gradient receives `λᵢ · 2 (wᵢ - D(Q(wᵢ)))` before a
/// single optimizer update. Accuracies are measured on `eval`, or on `data`
/// when no evaluation set is given.
pub fn train<T: Real>(
    graph: &mut Graph<T>,
    data: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    qgt: &QgtConfig,
) -> Result<TrainingReport, QgtError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DataError::Invalid("training set is empty".into()).into());
    }
    let terms = qgt.resolve(graph.params())?;
    let mut opt = cfg.optimizer::<T>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(SHUFFLE_STREAM);
    let eval_set = eval.unwrap_or(data);
    let total_steps = cfg.steps.unwrap_or(usize::MAX);

    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0;
    let mut epoch = 0;
    while step < total_steps && (cfg.steps.is_some() || epoch < cfg.epochs) {
        let start = Instant::now();
        let (mut task_sum, mut total_sum, mut count) = (0.0, 0.0, 0usize);
        for idx in epoch_batches(data.len(), cfg.batch_size, &mut rng) {
            if step == total_steps {
                break;
            }
            let (x, y) = data.batch::<T>(&idx);
            let out = graph.forward(&x, &y, Mode::Train)?;
            graph.backward()?;
            let loss = apply_regularizer(out.loss.as_f64(), graph.params_mut(), &terms)?;
            if !loss.total.is_finite() {
                let (term, value) = loss.largest_term(&terms);
                return Err(QgtError::NonFinite { step, term, value });
            }
            opt.step(graph.params_mut());
            task_sum += loss.task;
            total_sum += loss.total;
            count += 1;
            if step % cfg.log_every == 0 {
                steps.push(StepLog {
                    step,
                    epoch,
                    task_loss: loss.task,
                    total_loss: loss.total,
                    errors: loss.errors,
                });
            }
            step += 1;
        }
        let errors = assemble_loss(0.0, graph.params(), &terms)?.errors;
        let (accuracy_fp32, accuracy_dequantized) = if cfg.evaluate_epochs {
            (
                Some(evaluate(graph, eval_set, EvalMode::Fp32, qgt)?),
                Some(evaluate(graph, eval_set, EvalMode::Dequantized, qgt)?),
            )
        } else {
            (None, None)
        };
        epochs.push(EpochLog {
            epoch,
            steps: count,
            mean_task_loss: task_sum / count.max(1) as f64,
            mean_total_loss: total_sum / count.max(1) as f64,
            quant_error: errors.values().sum(),
            accuracy_fp32,
            accuracy_dequantized,
            seconds: start.elapsed().as_secs_f64(),
        });
        epoch += 1;
    }
    let final_errors = assemble_loss(0.0, graph.params(), &terms)?.errors;
    Ok(TrainingReport {
        seed: cfg.seed,
        ptq_equivalent: qgt.is_ptq_equivalent(),
        train_config: cfg.clone(),
        qgt_config: qgt.clone(),
        config_hash: None,
        lambdas: terms.iter().map(|t| (t.id.clone(), t.lambda)).collect(),
        steps,
        epochs,
        final_errors,
        final_accuracy_fp32: evaluate(graph, eval_set, EvalMode::Fp32, qgt)?,
        final_accuracy_dequantized: evaluate(graph, eval_set, EvalMode::Dequantized, qgt)?,
    })
}

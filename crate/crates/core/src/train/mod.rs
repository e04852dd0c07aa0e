//! Training: label-smoothed cross-entropy, Adam, reduce-on-plateau learning
//! rate, checkpoint-based early stopping and sequence-level distillation.

mod adam;
mod batch;
mod distill;
mod schedule;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use batch::{encode_examples, padded_batch, segment_examples, sorted_batches, token_batches, EncodedExample};
pub use distill::{distill_examples, DistillConfig, DistillFailure, DistillOutput, MixMode};
pub use schedule::PlateauScheduler;

use crate::autodiff::{Graph, Real};
use crate::corpus::ExampleKind;
use crate::error::{Error, Result};
use crate::model::{checkpoint, DropoutCtx, TransformerModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub initial_lr: f64,
    pub lr_reduce_factor: f64,
    /// Checkpoints without improvement before the learning rate is reduced.
    pub lr_reduce_patience: usize,
    /// Checkpoints without improvement before training stops.
    pub max_not_improved: usize,
    /// Optimizer steps between checkpoints.
    pub checkpoint_interval: usize,
    /// Padded token slots per batch.
    pub batch_tokens: usize,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps; 0 means unbounded.
    pub max_steps: usize,
    /// Wall-clock budget in seconds. Runs stopped by it are not reproducible.
    pub max_duration: Option<f64>,
    pub adam: AdamConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            initial_lr: 2e-4,
            lr_reduce_factor: 0.9,
            lr_reduce_patience: 8,
            max_not_improved: 30,
            checkpoint_interval: 500,
            batch_tokens: 2048,
            label_smoothing: 0.1,
            seed: 1,
            max_steps: 0,
            max_duration: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_reduce_factor > 0.0 && self.lr_reduce_factor < 1.0) {
            return Err(Error::contract(format!("lr_reduce_factor {} outside (0, 1)", self.lr_reduce_factor)));
        }
        if self.lr_reduce_patience == 0 || self.checkpoint_interval == 0 || self.batch_tokens == 0 {
            return Err(Error::contract(
                "lr_reduce_patience, checkpoint_interval and batch_tokens must be positive",
            ));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::contract(format!("initial_lr {} must be positive", self.initial_lr)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::contract(format!("label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        Ok(())
    }
}

/// Dev-set result of one checkpoint; lower `metric` is better.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevReport {
    pub metric: f64,
    pub by_kind: BTreeMap<String, f64>,
}

pub trait DevEvaluator<T: Real> {
    fn evaluate(&mut self, model: &TransformerModel<T>) -> Result<DevReport>;
}

/// Token-level perplexity over a fixed example set (no smoothing, no dropout).
pub struct Perplexity {
    examples: Vec<EncodedExample>,
    batches: Vec<Vec<usize>>,
}

impl Perplexity {
    pub fn new(examples: Vec<EncodedExample>, batch_tokens: usize) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("perplexity needs at least one example"));
        }
        // Keeping kinds in separate batches makes the per-kind breakdown exact.
        let mut batches = Vec::new();
        for kind in [ExampleKind::Single, ExampleKind::Multi] {
            let idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].kind == kind).collect();
            let subset: Vec<EncodedExample> = idx.iter().map(|&i| examples[i].clone()).collect();
            for b in sorted_batches(&subset, batch_tokens) {
                batches.push(b.into_iter().map(|j| idx[j]).collect());
            }
        }
        Ok(Perplexity { examples, batches })
    }

    pub fn examples(&self) -> &[EncodedExample] {
        &self.examples
    }
}

fn kind_name(kind: ExampleKind) -> &'static str {
    match kind {
        ExampleKind::Single => "single",
        ExampleKind::Multi => "multi",
    }
}

impl<T: Real> DevEvaluator<T> for Perplexity {
    fn evaluate(&mut self, model: &TransformerModel<T>) -> Result<DevReport> {
        let mut nll: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
        for b in &self.batches {
            let batch = padded_batch(&self.examples, b)?;
            let mut g = Graph::new();
            let vars = model.bind_frozen(&mut g);
            let loss = model.loss_graph(&mut g, &vars, &batch, 0.0, None)?;
            let tokens = batch.target_tokens();
            let mean = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            let entry = nll.entry(kind_name(self.examples[b[0]].kind)).or_default();
            entry.0 += mean * tokens as f64;
            entry.1 += tokens;
        }
        let (total, tokens) = nll.values().fold((0.0, 0), |(a, n), (b, m)| (a + b, n + m));
        Ok(DevReport {
            metric: (total / tokens as f64).exp(),
            by_kind: nll
                .into_iter()
                .map(|(k, (sum, n))| (k.to_string(), (sum / n as f64).exp()))
                .collect(),
        })
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub checkpoint: usize,
    /// Mean training loss over the steps since the previous checkpoint.
    pub train_loss: f64,
    pub dev_ppl: f64,
    pub dev_ppl_by_kind: BTreeMap<String, f64>,
    /// Learning rate in effect after this checkpoint.
    pub lr: f64,
    pub improved: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    NotImproved,
    MaxSteps,
    MaxDuration,
}

pub struct TrainOutcome<T: Real> {
    pub best_model: TransformerModel<T>,
    pub best_checkpoint: usize,
    pub best_dev_ppl: f64,
    pub final_model: TransformerModel<T>,
    pub metrics: Vec<MetricRecord>,
    pub stop_reason: StopReason,
    pub steps: usize,
    pub skipped_updates: u64,
    /// Written best checkpoint, when an output directory was given.
    pub best_path: Option<PathBuf>,
}

/// Where training writes its artifacts; all optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Receives `best.ckpt` and `last.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Append-only JSON-lines metrics log.
    pub metrics_path: Option<PathBuf>,
}

fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Mean loss and gradients of one batch.
fn loss_and_grads<T: Real>(
    model: &TransformerModel<T>,
    examples: &[EncodedExample],
    indices: &[usize],
    smoothing: f64,
    dropout_seed: u64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let batch = padded_batch(examples, indices)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let loss = model.loss_graph(&mut g, &vars, &batch, smoothing, Some(DropoutCtx { rng: &mut rng }))?;
    let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(model.params())
        .map(|(v, p)| g.take_grad(*v).unwrap_or_else(|| vec![T::zero(); p.numel()]))
        .collect();
    Ok((value, grads))
}

/// Trains until the dev metric has not improved for `max_not_improved`
/// checkpoints, `max_steps` is reached or `max_duration` elapses.
pub fn train<T: Real>(
    mut model: TransformerModel<T>,
    train_set: &[EncodedExample],
    dev: &mut dyn DevEvaluator<T>,
    params: &TrainParams,
    outputs: &TrainOutputs,
) -> Result<TrainOutcome<T>> {
    params.validate()?;
    if train_set.is_empty() {
        return Err(Error::contract("empty training set"));
    }
    let vocab = model.config().vocab_size;
    if let Some(bad) = train_set
        .iter()
        .flat_map(|e| e.source.iter().chain(&e.target))
        .find(|&&id| id as usize >= vocab)
    {
        return Err(Error::contract(format!("token id {bad} outside vocabulary of size {vocab}")));
    }
    if let Some(dir) = &outputs.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let mut log = match &outputs.metrics_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            Some(File::create(p)?)
        }
        None => None,
    };

    let started = Instant::now();
    let mut adam = Adam::new(model.params(), params.adam.clone());
    let mut sched = PlateauScheduler::new(params.initial_lr, params.lr_reduce_factor, params.lr_reduce_patience);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut metrics = Vec::new();
    let mut best_model = model.clone();
    let mut best_checkpoint = 0;
    let mut best_path = None;
    let (mut step, mut checkpoint_index) = (0usize, 0usize);
    let (mut interval_loss, mut interval_steps, mut nonfinite_run) = (0.0, 0usize, 0usize);

    let stop_reason = loop {
        if queue.is_empty() {
            queue = token_batches(train_set, params.batch_tokens, &mut shuffle_rng);
            queue.reverse();
        }
        let indices = queue.pop().expect("refilled above");
        step += 1;
        let (loss, grads) = loss_and_grads(
            &model,
            train_set,
            &indices,
            params.label_smoothing,
            step_seed(params.seed, step),
        )?;
        if loss.is_finite() {
            nonfinite_run = 0;
            interval_loss += loss;
            interval_steps += 1;
            adam.step(model.params_mut(), &grads, sched.lr())?;
        } else {
            nonfinite_run += 1;
            if nonfinite_run >= params.checkpoint_interval {
                return Err(Error::Diverged(format!(
                    "loss was not finite for {nonfinite_run} consecutive steps ending at step {step} (lr {})",
                    sched.lr()
                )));
            }
        }

        let at_limit = params.max_steps > 0 && step >= params.max_steps;
        let out_of_time = params.max_duration.is_some_and(|d| started.elapsed().as_secs_f64() >= d);
        if step % params.checkpoint_interval == 0 || at_limit || out_of_time {
            checkpoint_index += 1;
            let report = dev.evaluate(&model)?;
            let improved = sched.observe(report.metric);
            let record = MetricRecord {
                step,
                checkpoint: checkpoint_index,
                train_loss: if interval_steps > 0 { interval_loss / interval_steps as f64 } else { f64::NAN },
                dev_ppl: report.metric,
                dev_ppl_by_kind: report.by_kind,
                lr: sched.lr(),
                improved,
            };
            if let Some(f) = log.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&record)?)?;
            }
            metrics.push(record);
            interval_loss = 0.0;
            interval_steps = 0;
            if improved {
                best_model = model.clone();
                best_checkpoint = checkpoint_index;
                if let Some(dir) = &outputs.checkpoint_dir {
                    let path = dir.join("best.ckpt");
                    checkpoint::save(&best_model, &path)?;
                    best_path = Some(path);
                }
            }
            if checkpoint_index - best_checkpoint >= params.max_not_improved {
                break StopReason::NotImproved;
            }
        }
        if at_limit {
            break StopReason::MaxSteps;
        }
        if out_of_time {
            break StopReason::MaxDuration;
        }
    };

    if let Some(dir) = &outputs.checkpoint_dir {
        checkpoint::save(&model, &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        best_model,
        best_checkpoint,
        best_dev_ppl: sched.best().unwrap_or(f64::NAN),
        final_model: model,
        metrics,
        stop_reason,
        steps: step,
        skipped_updates: adam.skipped(),
        best_path,
    })
}

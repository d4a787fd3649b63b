//! REINFORCE with a greedy-rollout baseline.
//!
//! Every step draws a fresh batch, samples the actor, decodes the baseline
//! greedily and follows `mean((L - b) * log p)` with Adam. After each epoch
//! both policies decode a fixed validation set greedily, and the baseline
//! takes the actor's weights when a one-sided paired t-test says the actor
//! is better.

mod ttest;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ttest::{paired_ttest, PairedTTest};

use crate::decoder::{rollout, DecodeMode, RolloutOutput};
use crate::encoder::{encode, EncodeOptions};
use crate::instances::{default_capacity, InstanceError, Solution, VrpInstance};
use crate::model::{BatchMoments, Bound, ModelConfig, ModelError, ModelParams, NormMode, ProblemBatch, BN_MOMENTUM};
use crate::numkernel::{AdamState, Float, KernelError, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Customers per training instance.
    pub n: usize,
    pub capacity: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Significance level of the baseline-refresh test.
    pub alpha: f64,
    pub val_size: usize,
    /// Gradients are rescaled to at most this L2 norm; 0 disables.
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// `paper`: 200 epochs of 128,000 instances in batches of 128.
    /// `desk`: 10 epochs of 250 batches of 64 at a learning rate of 1e-4.
    pub fn preset(preset: Preset, n: usize, capacity: Option<f64>) -> Result<Self, TrainError> {
        let capacity = capacity.or_else(|| default_capacity(n)).ok_or_else(|| {
            TrainError::Argument(format!("no default capacity for n={n}; pass one explicitly"))
        })?;
        let (epochs, steps_per_epoch, batch_size, lr) = match preset {
            Preset::Paper => (200, 1000, 128, 3e-4),
            Preset::Desk => (10, 250, 64, 1e-4),
        };
        Ok(TrainConfig {
            model: ModelConfig::default(),
            n,
            capacity,
            epochs,
            steps_per_epoch,
            batch_size,
            lr,
            lr_decay: 0.96,
            alpha: 0.05,
            val_size: 512,
            max_grad_norm: 0.0,
            seed: 1234,
        })
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let arg = |m: String| Err(TrainError::Argument(m));
        if self.n < 1 {
            return arg("n must be at least 1".into());
        }
        if self.capacity <= 9.0 {
            return arg(format!("capacity {} cannot serve demands up to 9", self.capacity));
        }
        if self.epochs < 1 || self.steps_per_epoch < 1 {
            return arg("epochs and steps per epoch must be positive".into());
        }
        if self.batch_size < 2 || self.val_size < 2 {
            return arg("batch and validation sizes must be at least 2".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return arg(format!("significance {} outside (0, 1)", self.alpha));
        }
        if !(self.max_grad_norm >= 0.0 && self.max_grad_norm.is_finite()) {
            return arg(format!("gradient norm bound {} must be finite and non-negative", self.max_grad_norm));
        }
        if !(self.lr > 0.0 && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return arg(format!("bad learning rate {} / decay {}", self.lr, self.lr_decay));
        }
        Ok(())
    }

    pub fn neighbors(&self) -> usize {
        self.model.neighbors_for(self.n)
    }

    /// Random stream for one training step.
    pub fn step_rng(&self, epoch: usize, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((epoch as u64) << 32) | step as u64);
        rng
    }

    /// Fixed validation instances for the run.
    pub fn validation_set(&self) -> Result<Vec<VrpInstance>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(u64::MAX);
        (0..self.val_size)
            .map(|_| VrpInstance::random_with(self.n, self.capacity, &mut rng).map_err(Into::into))
            .collect()
    }
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub actor: ModelParams<f32>,
    pub baseline: ModelParams<f32>,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    /// Actor and baseline start from the same Xavier initialization.
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let actor = ModelParams::init(&config.model, config.seed)?;
        Ok(TrainState {
            config: config.clone(),
            baseline: actor.clone(),
            actor,
            adam: AdamState::new(config.lr, config.lr_decay),
            epoch: 0,
        })
    }
}

fn encode_opts(params_cfg: &ModelConfig, n: usize, mode: NormMode) -> EncodeOptions {
    EncodeOptions { neighbors: params_cfg.neighbors_for(n), mode, keep_attention: false }
}

/// Tour lengths of decoded solutions, each checked against every routing
/// constraint.
fn checked_lengths(batch: &[&VrpInstance], sols: &[Solution]) -> Result<Vec<f64>, TrainError> {
    batch
        .iter()
        .zip(sols)
        .map(|(inst, sol)| {
            let report = inst.validate(sol);
            match report.violations.first() {
                None => Ok(sol.length),
                Some(v) => Err(TrainError::Invariant(format!("decoder produced an infeasible solution: {v}"))),
            }
        })
        .collect()
}

/// Actor forward pass with gradients enabled.
pub struct ActorPass<T: Float> {
    pub tape: Tape<T>,
    pub bound: Bound,
    pub rollout: RolloutOutput,
    pub lengths: Vec<f64>,
    pub moments: Vec<BatchMoments<T>>,
}

pub fn actor_pass<T: Float>(
    actor: &ModelParams<T>,
    instances: &[&VrpInstance],
    mode: DecodeMode<'_>,
) -> Result<ActorPass<T>, TrainError> {
    let batch = ProblemBatch::new(instances)?;
    let mut tape = Tape::new();
    let bound = actor.bind(&mut tape, true);
    let enc = encode(&mut tape, actor, &bound, &batch, encode_opts(&actor.config, batch.n, NormMode::Train))?;
    let out = rollout(&mut tape, actor, &bound, &enc, &batch, mode, false)?;
    let lengths = checked_lengths(instances, &out.solutions)?;
    Ok(ActorPass { tape, bound, rollout: out, lengths, moments: enc.moments })
}

/// Greedy baseline lengths; batch norm uses the batch statistics and
/// running averages are left untouched.
pub fn baseline_lengths<T: Float>(
    baseline: &ModelParams<T>,
    instances: &[&VrpInstance],
) -> Result<Vec<f64>, TrainError> {
    let batch = ProblemBatch::new(instances)?;
    let mut tape = Tape::new();
    let bound = baseline.bind(&mut tape, false);
    let enc = encode(&mut tape, baseline, &bound, &batch, encode_opts(&baseline.config, batch.n, NormMode::Train))?;
    let out = rollout(&mut tape, baseline, &bound, &enc, &batch, DecodeMode::Greedy, false)?;
    checked_lengths(instances, &out.solutions)
}

/// Value and parameter gradients of `mean(advantage * log p)`, with the
/// advantages held constant.
pub fn surrogate_gradient<T: Float>(
    pass: &mut ActorPass<T>,
    advantages: &[f64],
) -> Result<(f64, IndexMap<String, Tensor<T>>), TrainError> {
    let tape = &mut pass.tape;
    let b = advantages.len();
    let adv = tape.constant(Tensor::from_f64(&[b], advantages)?);
    let weighted = tape.mul(adv, pass.rollout.log_prob)?;
    let loss = tape.mean(weighted);
    tape.backward(loss)?;
    let value = tape.value(loss).data()[0].as_f64();
    Ok((value, pass.bound.grads(tape)))
}

/// Surrogate loss for replayed action sequences and given advantages.
pub fn surrogate_loss<T: Float>(
    actor: &ModelParams<T>,
    instances: &[&VrpInstance],
    actions: &[Vec<usize>],
    advantages: &[f64],
) -> Result<(f64, IndexMap<String, Tensor<T>>), TrainError> {
    let mut pass = actor_pass(actor, instances, DecodeMode::Forced(actions))?;
    surrogate_gradient(&mut pass, advantages)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub actor_len: f64,
    pub baseline_len: f64,
    pub adv_mean: f64,
    pub adv_std: f64,
    pub grad_norm: f64,
    pub loss: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// One policy-gradient update of `actor` on `instances`.
pub fn reinforce_step(
    actor: &mut ModelParams<f32>,
    adam: &mut AdamState,
    baseline: &ModelParams<f32>,
    instances: &[&VrpInstance],
    mode: DecodeMode<'_>,
    max_grad_norm: f64,
) -> Result<StepStats, TrainError> {
    let base = baseline_lengths(baseline, instances)?;
    let mut pass = actor_pass(actor, instances, mode)?;
    let adv: Vec<f64> = pass.lengths.iter().zip(&base).map(|(l, b)| l - b).collect();
    let (loss, mut grads) = surrogate_gradient(&mut pass, &adv)?;
    let grad_norm = grads.values().flat_map(|g| g.data()).map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if max_grad_norm > 0.0 && grad_norm > max_grad_norm {
        let s = (max_grad_norm / grad_norm) as f32;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    adam.step(&mut actor.tensors, &grads)?;
    actor.update_running(&pass.moments, BN_MOMENTUM);
    let adv_mean = mean(&adv);
    let adv_std = (adv.iter().map(|a| (a - adv_mean).powi(2)).sum::<f64>() / adv.len() as f64).sqrt();
    Ok(StepStats {
        actor_len: mean(&pass.lengths),
        baseline_len: mean(&base),
        adv_mean,
        adv_std,
        grad_norm,
        loss,
    })
}

/// Instances decoded together during evaluation. Fixed so results do not
/// depend on the worker count.
pub const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub solutions: Vec<Solution>,
    /// Model-space tour lengths.
    pub lengths: Vec<f64>,
    pub wall_time: Duration,
}

impl EvalResult {
    pub fn mean_length(&self) -> f64 {
        mean(&self.lengths)
    }
}

/// Relative gap of mean lengths, `(mean(lengths) - mean(refs)) / mean(refs)`.
pub fn mean_gap(lengths: &[f64], refs: &[f64]) -> f64 {
    let r = mean(refs);
    (mean(lengths) - r) / r
}

fn eval_chunk(params: &ModelParams<f32>, chunk: &[&VrpInstance]) -> Result<Vec<Solution>, TrainError> {
    let batch = ProblemBatch::new(chunk)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let enc = encode(&mut tape, params, &bound, &batch, encode_opts(&params.config, batch.n, NormMode::Eval))?;
    let out = rollout(&mut tape, params, &bound, &enc, &batch, DecodeMode::Greedy, false)?;
    checked_lengths(chunk, &out.solutions)?;
    Ok(out.solutions)
}

/// Greedy decoding with running batch-norm statistics. Consecutive
/// instances of equal size share a chunk; `workers > 1` spreads chunks
/// over a thread pool.
pub fn evaluate(params: &ModelParams<f32>, instances: &[VrpInstance], workers: usize) -> Result<EvalResult, TrainError> {
    let start = Instant::now();
    let mut chunks: Vec<Vec<&VrpInstance>> = Vec::new();
    for inst in instances {
        match chunks.last_mut() {
            Some(c) if c.len() < EVAL_CHUNK && c[0].n_customers() == inst.n_customers() => c.push(inst),
            _ => chunks.push(vec![inst]),
        }
    }
    let parts: Vec<Vec<Solution>> = if workers <= 1 {
        chunks.iter().map(|c| eval_chunk(params, c)).collect::<Result<_, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| TrainError::Argument(format!("thread pool: {e}")))?;
        pool.install(|| chunks.par_iter().map(|c| eval_chunk(params, c)).collect::<Result<_, _>>())?
    };
    let solutions: Vec<Solution> = parts.into_iter().flatten().collect();
    let lengths = solutions.iter().map(|s| s.length).collect();
    Ok(EvalResult { solutions, lengths, wall_time: start.elapsed() })
}

/// One line of the training log. `tick` is a logical clock that increases
/// by one per record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LogRecord {
    Step {
        tick: u64,
        epoch: usize,
        step: usize,
        #[serde(flatten)]
        stats: StepStats,
    },
    Epoch {
        tick: u64,
        epoch: usize,
        lr: f64,
        val_actor: f64,
        val_baseline: f64,
        p_value: f64,
        baseline_updated: bool,
    },
}

/// Receives log records and end-of-epoch states as training proceeds.
pub trait TrainSink {
    fn record(&mut self, record: &LogRecord) -> Result<(), TrainError>;
    fn epoch_end(&mut self, state: &TrainState) -> Result<(), TrainError>;
}

/// Keeps records in memory and drops states.
#[derive(Default)]
pub struct MemorySink {
    pub records: Vec<LogRecord>,
}

impl TrainSink for MemorySink {
    fn record(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        self.records.push(record.clone());
        Ok(())
    }

    fn epoch_end(&mut self, _state: &TrainState) -> Result<(), TrainError> {
        Ok(())
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";

/// Appends records to `train_log.jsonl` and writes a checkpoint per epoch
/// (`epoch_<e>.gase`, mirrored to `latest.gase`).
pub struct DirSink {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl DirSink {
    pub fn create(dir: &Path) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir)?;
        let log = BufWriter::new(File::create(dir.join(LOG_FILE))?);
        Ok(DirSink { dir: dir.to_path_buf(), log })
    }

    /// Like `create` but appends to an existing log.
    pub fn append(dir: &Path) -> Result<Self, TrainError> {
        std::fs::create_dir_all(dir)?;
        let file = std::fs::OpenOptions::new().create(true).append(true).open(dir.join(LOG_FILE))?;
        Ok(DirSink { dir: dir.to_path_buf(), log: BufWriter::new(file) })
    }

    pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
        dir.join(format!("epoch_{epoch}.gase"))
    }
}

impl TrainSink for DirSink {
    fn record(&mut self, record: &LogRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(record).map_err(|e| TrainError::Invariant(e.to_string()))?;
        writeln!(self.log, "{line}")?;
        if matches!(record, LogRecord::Epoch { .. }) {
            self.log.flush()?;
        }
        Ok(())
    }

    fn epoch_end(&mut self, state: &TrainState) -> Result<(), TrainError> {
        let path = Self::checkpoint_path(&self.dir, state.epoch);
        crate::checkpoint::save(&path, &crate::checkpoint::Checkpoint::from_state(state))
            .map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        std::fs::copy(&path, self.dir.join("latest.gase"))?;
        self.log.flush()?;
        Ok(())
    }
}

/// Runs the remaining epochs of `state`, recording to `sink`.
pub fn train_from(mut state: TrainState, sink: &mut dyn TrainSink) -> Result<TrainState, TrainError> {
    let cfg = state.config.clone();
    cfg.validate()?;
    let val = cfg.validation_set()?;
    let mut tick = 0u64;
    if state.epoch == 0 {
        let a = evaluate(&state.actor, &val, 1)?;
        let b = evaluate(&state.baseline, &val, 1)?;
        let p = paired_ttest(&a.lengths, &b.lengths)?.p;
        let rec = LogRecord::Epoch {
            tick,
            epoch: 0,
            lr: state.adam.lr,
            val_actor: a.mean_length(),
            val_baseline: b.mean_length(),
            p_value: p,
            baseline_updated: false,
        };
        sink.record(&rec)?;
    } else {
        tick = (state.epoch * (cfg.steps_per_epoch + 1)) as u64;
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        for step in 0..cfg.steps_per_epoch {
            let mut rng = cfg.step_rng(epoch, step);
            let batch: Vec<VrpInstance> = (0..cfg.batch_size)
                .map(|_| VrpInstance::random_with(cfg.n, cfg.capacity, &mut rng))
                .collect::<Result<_, _>>()?;
            let refs: Vec<&VrpInstance> = batch.iter().collect();
            let stats =
                reinforce_step(&mut state.actor, &mut state.adam, &state.baseline, &refs, DecodeMode::Sample(&mut rng), cfg.max_grad_norm)?;
            tick += 1;
            sink.record(&LogRecord::Step { tick, epoch, step, stats })?;
        }
        state.adam.decay_lr();
        let a = evaluate(&state.actor, &val, 1)?;
        let b = evaluate(&state.baseline, &val, 1)?;
        let p = paired_ttest(&a.lengths, &b.lengths)?.p;
        let updated = p < cfg.alpha;
        if updated {
            state.baseline = state.actor.clone();
        }
        tick += 1;
        let rec = LogRecord::Epoch {
            tick,
            epoch,
            lr: state.adam.lr,
            val_actor: a.mean_length(),
            val_baseline: if updated { a.mean_length() } else { b.mean_length() },
            p_value: p,
            baseline_updated: updated,
        };
        sink.record(&rec)?;
        state.epoch = epoch;
        sink.epoch_end(&state)?;
    }
    Ok(state)
}

pub fn train(config: &TrainConfig, sink: &mut dyn TrainSink) -> Result<TrainState, TrainError> {
    train_from(TrainState::new(config)?, sink)
}

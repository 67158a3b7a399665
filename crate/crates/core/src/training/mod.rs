//! The multi-phase training loop: spherical pretraining, covariance-branch
//! warmup and joint training, with per-step metrics and per-epoch checkpoints.
//!
//! Every random draw is derived from `(seed, epoch)` or `(seed, step)`, so a
//! run resumed from a checkpoint replays exactly the batches, flips and
//! latent noise of an uninterrupted run.

mod checkpoint;
pub mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{config_text, Checkpoint, CHECKPOINT_VERSION};
pub use schedule::{Phase, TrainMask, TrainSchedule, DEFAULT_PRETRAIN_EPOCHS, DEFAULT_WARMUP_EPOCHS};

use crate::autograd::Tape;
use crate::color::YccImage;
use crate::data::{augment_flip, Dataset};
use crate::error::{Error, Result};
use crate::model::{latent_noise, Batch, Likelihood, Model};
use crate::optim::{AdamState, DEFAULT_LEARNING_RATE};
use crate::params::ParamStore;

pub const DEFAULT_BATCH_SIZE: usize = 64;

const NOISE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const VALIDATION_SALT: u64 = 0x2545_f491_4f6c_dd1d;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds parameter initialisation, data order, flips and latent noise.
    pub seed: u64,
    /// Random left-right flips, one coin per image per epoch.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: DEFAULT_BATCH_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            flip: true,
        }
    }
}

impl TrainConfig {
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{:?}", self.learning_rate)),
            ("seed", self.seed.to_string()),
            ("flip", self.flip.to_string()),
        ]
    }

    /// Applies one `key = value` pair; `false` for keys owned elsewhere.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let bad = || Error::config(format!("invalid value {value:?} for {key}"));
        match key {
            "batch_size" => self.batch_size = value.parse().ok().filter(|b| *b > 0).ok_or_else(bad)?,
            "learning_rate" => self.learning_rate = value.parse().ok().filter(|v: &f64| *v > 0.0).ok_or_else(bad)?,
            "seed" => self.seed = value.parse().map_err(|_| bad())?,
            "flip" => self.flip = value.parse().map_err(|_| bad())?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Position in the schedule plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Batches already taken from the current epoch.
    pub step_in_epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub best_validation: Option<f64>,
    pub adam: AdamState,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainState {
            epoch: 0,
            step_in_epoch: 0,
            step: 0,
            best_validation: None,
            adam: AdamState::new(config.learning_rate),
        }
    }
}

/// One metrics-log line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub alpha: f64,
    pub gamma: f64,
}

pub const METRICS_HEADER: &str = "step\tepoch\tphase\tloss\tnll\tkl\talpha\tgamma";

impl std::fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{:?}\t{:?}",
            self.step, self.epoch, self.phase, self.loss, self.nll, self.kl, self.alpha, self.gamma
        )
    }
}

/// Shuffled sample order and flip coins for one epoch.
pub fn epoch_plan(seed: u64, epoch: usize, n: usize, flip: bool) -> (Vec<usize>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    // coins are indexed by sample, not by position in the order
    let coins = (0..n).map(|_| flip && rng.gen_bool(0.5)).collect();
    (order, coins)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ NOISE_SALT);
    rng.set_stream(step);
    rng
}

fn with_context(e: Error, step: u64, epoch: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric {
            op,
            detail: format!("{detail} (step {step}, epoch {epoch})"),
        },
        other => other,
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Receives `epoch_NNNN.ckpt` after every epoch and `latest.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
    /// Tab-separated metrics, one line per step.
    pub metrics: Option<&'a mut dyn Write>,
    pub validation: Option<&'a Dataset>,
    /// Stops before this global step (saving `latest.ckpt`).
    pub stop_at_step: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    /// False when stopped early by `stop_at_step`.
    pub completed: bool,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer<'a> {
    pub model: &'a Model,
    pub schedule: &'a TrainSchedule,
    pub config: &'a TrainConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &'a Model, schedule: &'a TrainSchedule, config: &'a TrainConfig) -> Self {
        Trainer { model, schedule, config }
    }

    /// Whether `name` is updated during `phase`.
    pub fn trainable(&self, phase: &Phase, name: &str) -> bool {
        phase.mask.allows(name) && self.model.uses_param(name, phase.likelihood)
    }

    pub fn checkpoint(&self, params: &ParamStore, state: &TrainState) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            schedule: self.schedule.clone(),
            train: self.config.clone(),
            state: state.clone(),
            params: params.clone(),
        }
    }

    fn save(&self, dir: &Path, name: &str, params: &ParamStore, state: &TrainState) -> Result<PathBuf> {
        let path = dir.join(name);
        self.checkpoint(params, state).save(&path)?;
        Ok(path)
    }

    /// Mean objective over `data` in batches, with noise fixed by `(seed, epoch)`.
    pub fn validation_loss(&self, params: &ParamStore, data: &Dataset, mode: Likelihood, epoch: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ VALIDATION_SALT);
        rng.set_stream(epoch as u64);
        let mut total = 0.0;
        for chunk in data.samples.chunks(self.config.batch_size) {
            let imgs: Vec<&YccImage> = chunk.iter().map(|s| &s.ycc).collect();
            let batch = Batch::new(&imgs, self.model.config())?;
            let noise = latent_noise(batch.len, self.model.config().latent_dim, &mut rng);
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, &|_| false)?;
            let out = self.model.loss(&mut tape, &p, &batch, &noise, mode)?;
            total += tape.value(out.total).item()? * batch.len as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// One optimizer step on `batch` during `phase`.
    pub fn step(&self, params: &mut ParamStore, state: &mut TrainState, phase: &Phase, batch: &Batch) -> Result<MetricsRow> {
        let mut rng = step_rng(self.config.seed, state.step);
        let noise = latent_noise(batch.len, self.model.config().latent_dim, &mut rng);
        let trainable = |n: &str| self.trainable(phase, n);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, &trainable)?;
        let out = self.model.loss(&mut tape, &bound, batch, &noise, phase.likelihood)?;
        let loss = tape.value(out.total).item()?;
        if !loss.is_finite() {
            return Err(Error::numeric("loss", "non-finite training loss"));
        }
        tape.backward(out.total)?;
        params.accumulate_grads(&tape, &bound);
        state.adam.step(params, &trainable)?;
        Ok(MetricsRow {
            step: state.step,
            epoch: state.epoch,
            phase: phase.name.clone(),
            loss,
            nll: out.nll_mean,
            kl: out.kl_mean,
            alpha: out.alpha_term,
            gamma: out.gamma_term,
        })
    }

    /// `run_schedule`: trains from `state` to the end of the schedule (or
    /// `stop_at_step`). A numeric fault aborts the run; checkpoints from
    /// completed epochs stay on disk.
    pub fn run(&self, dataset: &Dataset, params: &mut ParamStore, state: &mut TrainState, mut opts: RunOptions<'_>) -> Result<RunSummary> {
        if dataset.is_empty() {
            return Err(Error::config("training dataset is empty"));
        }
        self.schedule.validate(params, self.model.config().likelihood)?;
        if let Some(w) = opts.metrics.as_deref_mut() {
            if state.step == 0 {
                writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io("metrics log", e))?;
            }
        }
        let mut summary = RunSummary { rows: Vec::new(), completed: false, checkpoints: Vec::new() };
        let n = dataset.len();
        let bs = self.config.batch_size;
        let batches = n.div_ceil(bs);
        while let Some(pi) = self.schedule.phase_at(state.epoch) {
            let phase = &self.schedule.phases[pi];
            let (order, coins) = epoch_plan(self.config.seed, state.epoch, n, self.config.flip);
            for b in state.step_in_epoch..batches {
                if opts.stop_at_step == Some(state.step) {
                    if let Some(dir) = opts.checkpoint_dir {
                        summary.checkpoints.push(self.save(dir, "latest.ckpt", params, state)?);
                    }
                    return Ok(summary);
                }
                let samples: Vec<_> = order[b * bs..((b + 1) * bs).min(n)]
                    .iter()
                    .map(|&i| augment_flip(&dataset.samples[i], coins[i]))
                    .collect();
                let imgs: Vec<&YccImage> = samples.iter().map(|s| &s.ycc).collect();
                let batch = Batch::new(&imgs, self.model.config())?;
                let row = self
                    .step(params, state, phase, &batch)
                    .map_err(|e| with_context(e, state.step, state.epoch))?;
                if let Some(w) = opts.metrics.as_deref_mut() {
                    writeln!(w, "{row}").map_err(|e| Error::io("metrics log", e))?;
                }
                summary.rows.push(row);
                state.step += 1;
                state.step_in_epoch = b + 1;
            }
            if let Some(val) = opts.validation {
                let v = self.validation_loss(params, val, phase.likelihood, state.epoch)?;
                state.best_validation = Some(state.best_validation.map_or(v, |b| b.min(v)));
            }
            state.epoch += 1;
            state.step_in_epoch = 0;
            if let Some(dir) = opts.checkpoint_dir {
                summary.checkpoints.push(self.save(dir, &format!("epoch_{:04}.ckpt", state.epoch), params, state)?);
                self.save(dir, "latest.ckpt", params, state)?;
            }
        }
        summary.completed = true;
        Ok(summary)
    }
}

/// Restores model, schedule, options, state and parameters from a checkpoint.
pub fn resume(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Model::new(ckpt.model.clone())?;
    Ok((model, ckpt))
}

//! Command-line front end.
//!
//! Settings come from a flat `key = value` file (`#` starts a comment),
//! then `--set key=value` flags, then dedicated flags such as `--seed` and
//! `--out`; later sources win. Unknown keys are rejected. Exit codes: 0 ok,
//! 1 numeric fault or failed check, 2 configuration or usage error.

use std::collections::BTreeSet;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{gen_synthetic, load_folder, Dataset, MeanFamily, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{emit_samples, emit_visuals, evaluate, DEFAULT_IWAE_SAMPLES};
use crate::model::{ColorMode, Model, ModelConfig};
use crate::oracle::{self, Fault};
use crate::training::{
    resume, Checkpoint, RunOptions, TrainConfig, TrainSchedule, TrainState, Trainer, DEFAULT_PRETRAIN_EPOCHS,
    DEFAULT_WARMUP_EPOCHS,
};

/// Everything a run needs, with documented defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain_epochs: usize,
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    /// Folder of PGM/PPM images.
    pub data_dir: Option<PathBuf>,
    pub data_limit: Option<usize>,
    /// Number of synthetic images to generate instead of reading `data_dir`.
    pub synthetic: usize,
    pub synthetic_family: MeanFamily,
    pub synthetic_seed: u64,
    /// Share of the data held out for validation and evaluation.
    pub validation_fraction: f64,
    pub out_dir: PathBuf,
    /// Latent samples per image for the importance-weighted bound.
    pub iwae_samples: usize,
    pub eval_seed: u64,
    /// Keys set by a file or flag rather than left at their defaults.
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain_epochs: DEFAULT_PRETRAIN_EPOCHS,
            warmup_epochs: DEFAULT_WARMUP_EPOCHS,
            joint_epochs: 10,
            data_dir: None,
            data_limit: None,
            synthetic: 0,
            synthetic_family: MeanFamily::Smooth,
            synthetic_seed: 0,
            validation_fraction: 0.1,
            out_dir: PathBuf::from("run"),
            iwae_samples: DEFAULT_IWAE_SAMPLES,
            eval_seed: 0,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let known = match key {
            "pretrain_epochs" => {
                self.pretrain_epochs = parse(key, value)?;
                true
            }
            "warmup_epochs" => {
                self.warmup_epochs = parse(key, value)?;
                true
            }
            "joint_epochs" => {
                self.joint_epochs = parse(key, value)?;
                true
            }
            "data_dir" => {
                self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value));
                true
            }
            "data_limit" => {
                self.data_limit = if value.is_empty() { None } else { Some(parse(key, value)?) };
                true
            }
            "synthetic" => {
                self.synthetic = parse(key, value)?;
                true
            }
            "synthetic_family" => {
                self.synthetic_family = match value {
                    "smooth" => MeanFamily::Smooth,
                    "textured" => MeanFamily::Textured,
                    _ => return Err(Error::config(format!("unknown synthetic_family {value:?}"))),
                };
                true
            }
            "synthetic_seed" => {
                self.synthetic_seed = parse(key, value)?;
                true
            }
            "validation_fraction" => {
                self.validation_fraction = parse(key, value)?;
                true
            }
            "out_dir" => {
                self.out_dir = PathBuf::from(value);
                true
            }
            "iwae_samples" => {
                self.iwae_samples = parse(key, value)?;
                true
            }
            "eval_seed" => {
                self.eval_seed = parse(key, value)?;
                true
            }
            _ => self.model.set(key, value)? || self.train.set(key, value)?,
        };
        if !known {
            return Err(Error::config(format!("unknown key {key:?}")));
        }
        if key == "image_size" && !self.explicit.contains("chroma_factor") {
            self.model.chroma_factor = crate::color::chroma_factor_for(self.model.image_size);
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Applies a config file's contents.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::config(format!("--set expects key=value, got {kv:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Every key with its value, in a form `apply_text` reads back.
    pub fn to_text(&self) -> String {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (k, v) in self.model.to_pairs().into_iter().chain(self.train.to_pairs()) {
            pairs.push((k.to_string(), v));
        }
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let family = match self.synthetic_family {
            MeanFamily::Smooth => "smooth",
            MeanFamily::Textured => "textured",
        };
        for (k, v) in [
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("joint_epochs", self.joint_epochs.to_string()),
            ("data_dir", opt(&self.data_dir)),
            ("data_limit", self.data_limit.map(|l| l.to_string()).unwrap_or_default()),
            ("synthetic", self.synthetic.to_string()),
            ("synthetic_family", family.to_string()),
            ("synthetic_seed", self.synthetic_seed.to_string()),
            ("validation_fraction", format!("{:?}", self.validation_fraction)),
            ("out_dir", self.out_dir.display().to_string()),
            ("iwae_samples", self.iwae_samples.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
        ] {
            pairs.push((k.to_string(), v));
        }
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule::standard(self.model.likelihood, self.pretrain_epochs, self.warmup_epochs, self.joint_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data_dir.is_none() && self.synthetic == 0 {
            return Err(Error::config("data_dir is not set (or set synthetic = <count>)"));
        }
        if self.iwae_samples == 0 {
            return Err(Error::config("iwae_samples must be at least 1"));
        }
        Ok(())
    }

    /// Loads or generates the data, split into (train, held-out).
    pub fn dataset(&self) -> Result<(Dataset, Option<Dataset>)> {
        self.validate()?;
        let m = &self.model;
        let factor = if m.color == ColorMode::YCbCr { m.chroma_factor } else { 1 };
        let data = if self.synthetic > 0 {
            let spec = SyntheticSpec {
                size: m.image_size,
                grayscale: m.color == ColorMode::Gray,
                chroma_factor: factor,
                family: self.synthetic_family,
                seed: self.synthetic_seed,
                ..Default::default()
            };
            gen_synthetic(&spec, self.synthetic)?.0
        } else {
            let dir = self.data_dir.as_ref().expect("validated");
            if !dir.is_dir() {
                return Err(Error::config(format!("data_dir {} is not a directory", dir.display())));
            }
            load_folder(dir, m.image_size, self.data_limit, factor)?
        };
        if self.validation_fraction > 0.0 && data.len() > 1 {
            let (t, v) = data.split_validation(self.validation_fraction)?;
            Ok((t, Some(v)))
        } else {
            Ok((data, None))
        }
    }

    /// The checkpoint must agree with every model key set explicitly here.
    pub fn check_checkpoint(&self, ckpt: &ModelConfig) -> Result<()> {
        let theirs = ckpt.to_pairs();
        for (k, v) in self.model.to_pairs() {
            if self.explicit.contains(k) {
                let other = &theirs.iter().find(|(kk, _)| *kk == k).expect("same keys").1;
                if *other != v {
                    return Err(Error::config(format!("config sets {k} = {v} but the checkpoint has {other}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "structvae", version, about = "VAEs with structured-precision Gaussian image likelihoods")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the training schedule.
    Train(TrainArgs),
    /// Importance-weighted NLL, KL and MSE on the held-out images.
    Eval(EvalArgs),
    /// Decode prior samples into mean and noisy panels.
    Sample(SampleArgs),
    /// Reconstruction panels for held-out images.
    Reconstruct(ReconstructArgs),
    /// Randomised checks against dense and finite-difference references.
    OracleCheck(OracleArgs),
}

#[derive(Args, Debug, Default)]
pub struct CommonArgs {
    /// Flat key = value settings file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (the `out_dir` setting).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Continue from a checkpoint instead of initialising.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent samples per image (the `iwae_samples` setting).
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dense-equivalence instances.
    #[arg(long, default_value_t = 200)]
    pub instances: usize,
    /// Test hook: `log-det-sign` corrupts the sparse log-determinant.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

/// Builds the run configuration from file, `--set` flags and dedicated flags.
pub fn load_run_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        rc.apply_text(&text)?;
    }
    for kv in &common.set {
        rc.apply_override(kv)?;
    }
    if let Some(seed) = common.seed {
        rc.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        rc.set("out_dir", &out.display().to_string())?;
    }
    Ok(rc)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let mut rc = load_run_config(&args.common)?;
    rc.validate()?;
    let resumed = match &args.resume {
        Some(path) => {
            let (_, ckpt) = resume(path)?;
            rc.check_checkpoint(&ckpt.model)?;
            rc.model = ckpt.model.clone();
            Some(ckpt)
        }
        None => None,
    };
    let out = rc.out_dir.clone();
    let ckpt_dir = out.join("checkpoints");
    create_dir(&ckpt_dir)?;
    write_file(&out.join("config.txt"), &rc.to_text())?;

    let (train, validation) = rc.dataset()?;
    let model = Model::new(rc.model.clone())?;
    let (schedule, train_cfg, mut params, mut state) = match resumed {
        Some(c) => (c.schedule, c.train, c.params, c.state),
        None => {
            let params = model.init_params(rc.train.seed)?;
            (rc.schedule(), rc.train.clone(), params, TrainState::new(&rc.train))
        }
    };
    let metrics_path = out.join("metrics.tsv");
    let file = if state.step > 0 {
        OpenOptions::new().append(true).open(&metrics_path)
    } else {
        File::create(&metrics_path)
    }
    .map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);

    let trainer = Trainer::new(&model, &schedule, &train_cfg);
    let summary = trainer.run(
        &train,
        &mut params,
        &mut state,
        RunOptions {
            checkpoint_dir: Some(&ckpt_dir),
            metrics: Some(&mut metrics),
            validation: validation.as_ref(),
            stop_at_step: None,
        },
    )?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    if let Some(last) = summary.rows.last() {
        println!("trained {} steps; last loss {:.4} ({})", state.step, last.loss, last.phase);
    }
    if let Some(v) = state.best_validation {
        println!("best validation loss {v:.4}");
    }
    println!("checkpoint: {}", ckpt_dir.join("latest.ckpt").display());
    Ok(0)
}

fn load_for_eval(common: &CommonArgs, checkpoint: &Path) -> Result<(RunConfig, Model, Checkpoint)> {
    let mut rc = load_run_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    rc.check_checkpoint(&ckpt.model)?;
    rc.model = ckpt.model.clone();
    let model = Model::new(ckpt.model.clone())?;
    Ok((rc, model, ckpt))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<i32> {
    let (mut rc, model, ckpt) = load_for_eval(&args.common, &args.checkpoint)?;
    if let Some(k) = args.k {
        rc.set("iwae_samples", &k.to_string())?;
    }
    let (train, held) = rc.dataset()?;
    let data = held.unwrap_or(train);
    let report = evaluate(&model, &ckpt.params, &data, rc.iwae_samples, rc.eval_seed)?;
    create_dir(&rc.out_dir)?;
    write_file(&rc.out_dir.join("report.txt"), &report.table())?;
    write_file(&rc.out_dir.join("records.jsonl"), &report.records_jsonl())?;
    print!("{}", report.table());
    Ok(0)
}

pub fn cmd_sample(args: &SampleArgs) -> Result<i32> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let model = Model::new(ckpt.model.clone())?;
    let files = emit_samples(&model, &ckpt.params, args.n, args.seed, &args.out)?;
    println!("wrote {} files to {}", files.len(), args.out.display());
    Ok(0)
}

pub fn cmd_reconstruct(args: &ReconstructArgs) -> Result<i32> {
    let (rc, model, ckpt) = load_for_eval(&args.common, &args.checkpoint)?;
    let (train, held) = rc.dataset()?;
    let data = held.unwrap_or(train);
    let n = args.n.min(data.len());
    let seed = args.common.seed.unwrap_or(rc.eval_seed);
    let files = emit_visuals(&model, &ckpt.params, &data.samples[..n], seed, &rc.out_dir)?;
    println!("wrote {} files to {}", files.len(), rc.out_dir.display());
    Ok(0)
}

pub fn cmd_oracle_check(args: &OracleArgs) -> Result<i32> {
    let fault = match args.inject_fault.as_deref() {
        None => Fault::None,
        Some("log-det-sign") => Fault::LogDetSign,
        Some(other) => return Err(Error::usage(format!("unknown fault {other:?}"))),
    };
    let suites = [
        oracle::dense_equivalence(args.instances, args.seed, fault)?,
        oracle::sampling_covariance(100_000, args.seed)?,
        oracle::gradient_fidelity(args.seed, Some(24))?,
    ];
    let mut ok = true;
    for s in &suites {
        println!("{s}");
        ok &= s.passed();
    }
    println!(
        "{}/{} dense-equivalence instances within tolerance",
        suites[0].cases - suites[0].failures.len(),
        suites[0].cases
    );
    Ok(if ok { 0 } else { 1 })
}

pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::OracleCheck(a) => cmd_oracle_check(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_unknown_keys() {
        let mut rc = RunConfig::default();
        rc.apply_text("# comment\nimage_size = 16  # trailing\nsynthetic = 20\nlikelihood = diagonal\n\nseed=7\n")
            .unwrap();
        assert_eq!(rc.model.chroma_factor, 1);
        assert_eq!(rc.train.seed, 7);
        let mut back = RunConfig::default();
        back.apply_text(&rc.to_text()).unwrap();
        assert_eq!(back.to_text(), rc.to_text());
        assert!(matches!(rc.set("learning_rat", "1"), Err(Error::Config(_))));
        assert!(matches!(rc.apply_text("width"), Err(Error::Config(_))));
    }

    #[test]
    fn missing_data_names_the_field() {
        let err = RunConfig::default().validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("data_dir"));
    }

    #[test]
    fn checkpoint_compatibility_only_checks_explicit_keys() {
        let mut rc = RunConfig::default();
        let other = ModelConfig { width: 8, ..Default::default() };
        rc.check_checkpoint(&other).unwrap();
        rc.set("width", "16").unwrap();
        assert!(rc.check_checkpoint(&other).is_err());
    }
}

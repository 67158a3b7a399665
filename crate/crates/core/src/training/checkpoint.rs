//! Binary checkpoints: configuration, training state, optimizer moments and
//! parameters, followed by a SHA-256 of everything before it.
//!
//! ```text
//! "SVAECKPT" | u32 version | str config | train state | adam | params | [u8; 32] sha256
//! ```
//! Integers are little-endian u64 unless noted, floats little-endian f64,
//! strings a u64 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamState, Moments};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::schedule::{Phase, TrainSchedule};

const MAGIC: &[u8; 8] = b"SVAECKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub schedule: TrainSchedule,
    pub train: TrainConfig,
    pub state: TrainState,
    pub params: ParamStore,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.bytes.len() - self.pos) as u64 {
            return Err(Error::Checkpoint(format!("length {n} exceeds checkpoint size")));
        }
        Ok(n as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// `key = value` lines for the model, schedule and training options.
pub fn config_text(model: &ModelConfig, schedule: &TrainSchedule, train: &TrainConfig) -> String {
    let mut out = String::new();
    for (k, v) in model.to_pairs() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in train.to_pairs() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    for p in &schedule.phases {
        out.push_str(&format!("phase = {p}\n"));
    }
    out
}

fn parse_config_text(text: &str) -> Result<(ModelConfig, TrainSchedule, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    let mut phases = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line {line:?}")))?;
        if k == "phase" {
            phases.push(v.parse::<Phase>()?);
        } else if !model.set(k, v)? && !train.set(k, v)? {
            return Err(Error::Checkpoint(format!("unknown config key {k:?}")));
        }
    }
    Ok((model, TrainSchedule { phases }, train))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(MAGIC.to_vec());
        w.0.extend(CHECKPOINT_VERSION.to_le_bytes());
        w.str(&config_text(&self.model, &self.schedule, &self.train));

        let s = &self.state;
        w.u64(s.epoch as u64);
        w.u64(s.step_in_epoch as u64);
        w.u64(s.step);
        w.f64(s.best_validation.unwrap_or(f64::NAN));

        let a = &s.adam;
        for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
            w.f64(v);
        }
        w.u64(a.step);
        w.u64(a.moments.len() as u64);
        for (name, m) in &a.moments {
            w.str(name);
            w.f64s(&m.first);
            w.f64s(&m.second);
        }

        w.u64(self.params.len() as u64);
        for (name, p) in self.params.iter() {
            w.str(name);
            w.u64(p.value.shape().len() as u64);
            p.value.shape().iter().for_each(|d| w.u64(*d as u64));
            w.f64s(p.value.data());
        }
        let digest = Sha256::digest(&w.0);
        w.0.extend(digest);
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch: file is corrupted".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let (model, schedule, train) = parse_config_text(&r.str()?)?;

        let epoch = r.u64()? as usize;
        let step_in_epoch = r.u64()? as usize;
        let step = r.u64()?;
        let best = r.f64()?;

        let mut adam = AdamState::new(r.f64()?);
        adam.beta1 = r.f64()?;
        adam.beta2 = r.f64()?;
        adam.epsilon = r.f64()?;
        adam.step = r.u64()?;
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let first = r.f64s()?;
            let second = r.f64s()?;
            adam.moments.insert(name, Moments { first, second });
        }

        let mut params = ParamStore::new();
        for _ in 0..r.u64()? {
            let name = r.str()?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("parameter {name}: {e}")))?;
            params.insert(name, value)?;
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(Checkpoint {
            model,
            schedule,
            train,
            state: TrainState {
                epoch,
                step_in_epoch,
                step,
                best_validation: (!best.is_nan()).then_some(best),
                adam,
            },
            params,
        })
    }

    /// Writes through a temporary file so a crash never leaves a torn checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

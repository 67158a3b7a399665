use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Likelihood, COV_PREFIX};
use crate::params::ParamStore;

/// Which parameters a phase may update, by name prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainMask {
    All,
    Only(Vec<String>),
    Except(Vec<String>),
}

impl TrainMask {
    pub fn covariance_only() -> Self {
        TrainMask::Only(vec![COV_PREFIX.to_string()])
    }

    pub fn allows(&self, name: &str) -> bool {
        match self {
            TrainMask::All => true,
            TrainMask::Only(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            TrainMask::Except(p) => !p.iter().any(|p| name.starts_with(p.as_str())),
        }
    }

    /// Every prefix must select at least one parameter.
    pub fn validate(&self, params: &ParamStore) -> Result<()> {
        let prefixes = match self {
            TrainMask::All => return Ok(()),
            TrainMask::Only(p) | TrainMask::Except(p) => p,
        };
        for p in prefixes {
            if !params.names().any(|n| n.starts_with(p.as_str())) {
                return Err(Error::config(format!("mask prefix {p:?} matches no parameter")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TrainMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMask::All => f.write_str("all"),
            TrainMask::Only(p) => write!(f, "only:{}", p.join("|")),
            TrainMask::Except(p) => write!(f, "except:{}", p.join("|")),
        }
    }
}

impl FromStr for TrainMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let list = |rest: &str| rest.split('|').map(str::to_string).collect::<Vec<_>>();
        if s == "all" {
            Ok(TrainMask::All)
        } else if let Some(rest) = s.strip_prefix("only:") {
            Ok(TrainMask::Only(list(rest)))
        } else if let Some(rest) = s.strip_prefix("except:") {
            Ok(TrainMask::Except(list(rest)))
        } else {
            Err(Error::config(format!("unknown mask {s:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub name: String,
    pub epochs: usize,
    pub mask: TrainMask,
    pub likelihood: Likelihood,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.name, self.epochs, self.likelihood, self.mask)
    }
}

impl FromStr for Phase {
    type Err = Error;

    /// `name,epochs,likelihood,mask`
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.splitn(4, ',').map(str::trim).collect();
        let [name, epochs, likelihood, mask] = parts[..] else {
            return Err(Error::config(format!("phase {s:?} is not name,epochs,likelihood,mask")));
        };
        Ok(Phase {
            name: name.to_string(),
            epochs: epochs
                .parse()
                .map_err(|_| Error::config(format!("invalid epoch count {epochs:?}")))?,
            likelihood: likelihood.parse()?,
            mask: mask.parse()?,
        })
    }
}

pub const DEFAULT_PRETRAIN_EPOCHS: usize = 30;
pub const DEFAULT_WARMUP_EPOCHS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainSchedule {
    pub phases: Vec<Phase>,
}

impl TrainSchedule {
    /// Spherical pretraining, covariance-branch-only warmup, then joint
    /// training; zero-length phases are dropped. A spherical model trains in
    /// one phase of `pretrain + warmup + joint` epochs.
    pub fn standard(likelihood: Likelihood, pretrain: usize, warmup: usize, joint: usize) -> Self {
        let mut phases = Vec::new();
        if likelihood == Likelihood::Spherical {
            phases.push(Phase {
                name: "joint".into(),
                epochs: pretrain + warmup + joint,
                mask: TrainMask::All,
                likelihood,
            });
        } else {
            phases.push(Phase {
                name: "pretrain".into(),
                epochs: pretrain,
                mask: TrainMask::All,
                likelihood: Likelihood::Spherical,
            });
            phases.push(Phase {
                name: "warmup".into(),
                epochs: warmup,
                mask: TrainMask::covariance_only(),
                likelihood,
            });
            phases.push(Phase { name: "joint".into(), epochs: joint, mask: TrainMask::All, likelihood });
        }
        phases.retain(|p| p.epochs > 0);
        TrainSchedule { phases }
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// Phase index active during global epoch `epoch`.
    pub fn phase_at(&self, epoch: usize) -> Option<usize> {
        let mut end = 0;
        for (i, p) in self.phases.iter().enumerate() {
            end += p.epochs;
            if epoch < end {
                return Some(i);
            }
        }
        None
    }

    pub fn validate(&self, params: &ParamStore, model_likelihood: Likelihood) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::config("schedule has no phases"));
        }
        for p in &self.phases {
            if p.epochs == 0 {
                return Err(Error::config(format!("phase {} has zero epochs", p.name)));
            }
            if p.likelihood != Likelihood::Spherical && p.likelihood != model_likelihood {
                return Err(Error::config(format!(
                    "phase {} uses a {} likelihood on a {model_likelihood} model",
                    p.name, p.likelihood
                )));
            }
            p.mask.validate(params)?;
        }
        Ok(())
    }
}

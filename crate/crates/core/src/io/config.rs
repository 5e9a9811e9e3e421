//! Training settings layered as CLI flags over a TOML file over defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::Schedule;

/// Every field optional so that layers can be merged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub widths: Option<[usize; 6]>,
    pub cosine_match: Option<bool>,
    pub untargeted: Option<bool>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub initial_lr: Option<f64>,
    pub lr_halving_epochs: Option<Vec<usize>>,
    pub weight_decay: Option<f64>,
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub micro_batch: Option<usize>,
}

/// Fully resolved settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub config: ModelConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub max_steps: Option<u64>,
    pub micro_batch: usize,
}

impl TrainSettings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Argument(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Argument(format!("cannot serialize config: {e}")))
    }

    /// Fields set in `over` win.
    pub fn overlay(self, over: TrainSettings) -> Self {
        Self {
            widths: over.widths.or(self.widths),
            cosine_match: over.cosine_match.or(self.cosine_match),
            untargeted: over.untargeted.or(self.untargeted),
            epochs: over.epochs.or(self.epochs),
            batch_size: over.batch_size.or(self.batch_size),
            initial_lr: over.initial_lr.or(self.initial_lr),
            lr_halving_epochs: over.lr_halving_epochs.or(self.lr_halving_epochs),
            weight_decay: over.weight_decay.or(self.weight_decay),
            seed: over.seed.or(self.seed),
            max_steps: over.max_steps.or(self.max_steps),
            micro_batch: over.micro_batch.or(self.micro_batch),
        }
    }

    /// Fills unset fields from the defaults and validates the result.
    pub fn resolve(&self, default_schedule: Schedule) -> Result<Resolved> {
        let base = ModelConfig::default();
        let config = ModelConfig {
            widths: self.widths.unwrap_or(base.widths),
            cosine_match: self.cosine_match.unwrap_or(base.cosine_match),
            untargeted: self.untargeted.unwrap_or(base.untargeted),
        };
        config.validate()?;
        let d = default_schedule;
        let schedule = Schedule {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            initial_lr: self.initial_lr.unwrap_or(d.initial_lr),
            lr_halving_epochs: self.lr_halving_epochs.clone().unwrap_or(d.lr_halving_epochs),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
        };
        schedule.validate()?;
        let micro_batch = self.micro_batch.unwrap_or(8);
        if micro_batch == 0 {
            return Err(Error::Argument("micro_batch must be positive".into()));
        }
        Ok(Resolved {
            config,
            schedule,
            seed: self.seed.unwrap_or(0),
            max_steps: self.max_steps,
            micro_batch,
        })
    }
}

//! Training configuration. Stored as TOML; every field has a default so a
//! config file only needs the keys it changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{AgeMode, LossWeights};
use crate::optim::{RmsProp, Sgd};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_id: usize,
    pub d_a: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d_id: 16, d_a: 8 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrDecay {
    /// Linear from the base rate at step 0 to zero after the last step.
    #[default]
    Linear,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_encoder: f64,
    pub lr_age: f64,
    pub lr_critic: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub lr_decay: LrDecay,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_encoder: 0.05,
            lr_age: 0.01,
            lr_critic: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-8,
            lr_decay: LrDecay::Linear,
        }
    }
}

impl OptimConfig {
    pub fn sgd(&self) -> Sgd {
        Sgd {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    pub fn rmsprop(&self) -> RmsProp {
        RmsProp {
            alpha: self.rms_alpha,
            eps: self.rms_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Encoder steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Critic iterations per encoder step.
    pub n_critic: usize,
    /// Encoder steps between JSD probe measurements; 0 disables the probe.
    pub probe_every: usize,
    /// Training steps of each freshly initialized probe.
    pub probe_steps: usize,
    pub probe_lr: f64,
    /// Samples embedded for each probe measurement.
    pub probe_samples: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 600,
            batch_size: 128,
            n_critic: 50,
            probe_every: 50,
            probe_steps: 200,
            probe_lr: 1e-3,
            probe_samples: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Parameter initialization.
    pub params: u64,
    /// Batch order.
    pub data: u64,
    /// Derangements, interpolation points and probe sampling.
    pub shuffle: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            params: 1,
            data: 2,
            shuffle: 3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: AgeMode,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub schedule: ScheduleConfig,
    pub seeds: Seeds,
}

pub const PRESETS: [&str; 2] = ["desk", "ci"];

impl TrainConfig {
    /// Full desk-scale run.
    pub fn desk() -> Self {
        Self::default()
    }

    /// Short run with a light critic inner loop for tests.
    pub fn ci() -> Self {
        let mut c = Self::default();
        c.schedule.steps = 100;
        c.schedule.n_critic = 5;
        c.schedule.batch_size = 64;
        c.schedule.probe_steps = 100;
        c.schedule.probe_samples = 256;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "ci" => Ok(Self::ci()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected one of {PRESETS:?})"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let o = &self.optim;
        let s = &self.schedule;
        let checks = [
            (s.n_critic >= 1, "n_critic must be >= 1"),
            (s.steps >= 1, "steps must be >= 1"),
            (s.batch_size >= 2, "batch_size must be >= 2"),
            (o.lr_encoder > 0.0, "lr_encoder must be > 0"),
            (o.lr_age > 0.0, "lr_age must be > 0"),
            (o.lr_critic > 0.0, "lr_critic must be > 0"),
            (s.probe_every == 0 || s.probe_lr > 0.0, "probe_lr must be > 0"),
            (s.probe_every == 0 || s.probe_steps >= 1, "probe_steps must be >= 1"),
            (s.probe_every == 0 || s.probe_samples >= 2, "probe_samples must be >= 2"),
            ((0.0..1.0).contains(&o.momentum), "momentum must be in [0, 1)"),
            (o.weight_decay >= 0.0, "weight_decay must be >= 0"),
            ((0.0..1.0).contains(&o.rms_alpha), "rms_alpha must be in [0, 1)"),
            (o.rms_eps > 0.0, "rms_eps must be > 0"),
            (self.model.d_id >= 1 && self.model.d_a >= 1, "embedding sizes must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Learning-rate multiplier at encoder step `t`.
    pub fn lr_factor(&self, t: usize) -> f64 {
        match self.optim.lr_decay {
            LrDecay::Constant => 1.0,
            LrDecay::Linear => 1.0 - t as f64 / self.schedule.steps as f64,
        }
    }
}

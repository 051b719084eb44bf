//! Run configuration: a flat, versioned TOML file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderTraining;
use crate::error::{Error, Result};
use crate::optim::{OptimizerKind, Schedule};
use crate::pipeline::RunVariant;
use crate::prompt::PromptTraining;
use crate::stream::StreamSpec;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub variant: RunVariant,
    pub seeds: Vec<u64>,
    /// Prompt length M.
    pub prompt_len: usize,
    /// Weight of the task prompt in the composed class embedding.
    pub beta: f64,
    pub lambda_ortho: f64,
    /// Temperature of the prompt cross-entropy.
    pub tau: f64,
    /// Temperature of the encoder contrastive loss.
    pub encoder_tau: f64,
    pub replay_per_class: usize,

    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage1_batch: usize,
    pub stage1_optimizer: OptimizerKind,

    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub stage2_batch: usize,
    pub stage2_optimizer: OptimizerKind,

    /// Synthetic stream used when no feature manifest is given.
    pub stream: StreamSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            variant: RunVariant::DmcOt,
            seeds: vec![0],
            prompt_len: 10,
            beta: 0.1,
            lambda_ortho: 0.1,
            tau: 0.01,
            encoder_tau: 0.05,
            replay_per_class: 64,
            stage1_steps: 60,
            stage1_lr: 0.001,
            stage1_batch: 32,
            stage1_optimizer: OptimizerKind::Adam,
            stage2_steps: 150,
            stage2_lr: 0.01,
            stage2_batch: 32,
            stage2_optimizer: OptimizerKind::Adam,
            stream: StreamSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {}", self.version));
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        if self.prompt_len == 0 {
            return fail("prompt_len must be positive".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.lambda_ortho >= 0.0 && self.lambda_ortho.is_finite()) {
            return fail(format!("lambda_ortho must be >= 0, got {}", self.lambda_ortho));
        }
        for (name, t) in [("tau", self.tau), ("encoder_tau", self.encoder_tau)] {
            if !(t > 0.0 && t.is_finite()) {
                return fail(format!("{name} must be positive, got {t}"));
            }
        }
        self.stage1().validate()?;
        self.stage2().validate()?;
        Ok(())
    }

    pub fn stage1(&self) -> Schedule {
        Schedule {
            steps: self.stage1_steps,
            learning_rate: self.stage1_lr,
            batch_size: self.stage1_batch,
            optimizer: self.stage1_optimizer,
        }
    }

    pub fn stage2(&self) -> Schedule {
        Schedule {
            steps: self.stage2_steps,
            learning_rate: self.stage2_lr,
            batch_size: self.stage2_batch,
            optimizer: self.stage2_optimizer,
        }
    }

    pub fn encoder_training(&self) -> EncoderTraining {
        EncoderTraining {
            schedule: self.stage1(),
            tau: self.encoder_tau,
        }
    }

    /// Prompt hyperparameters under `variant` (the no-task-prompt ablation
    /// drops the orthogonality term).
    pub fn prompt_training(&self, variant: RunVariant) -> PromptTraining {
        PromptTraining {
            schedule: self.stage2(),
            tau: self.tau,
            lambda_ortho: if variant.uses_task_prompts() {
                self.lambda_ortho
            } else {
                0.0
            },
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

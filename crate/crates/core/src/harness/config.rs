use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn_blocks::PRIOR_DIM;

/// Every knob of a desk-scale run. Missing keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub ddim_iters: usize,
    pub teacher_warmup_iters: usize,
    pub lr_rex: f64,
    pub lr_img: f64,
    pub lr_phase2: f64,
    pub lr_ddim: f64,
    pub lr_teacher_warmup: f64,
    pub lambda_kd: f64,
    pub lambda_traj: f64,
    pub lambda_flex: f64,
    pub lambda_vel: f64,
    pub sampler_steps: Vec<usize>,
    /// Largest flow timestep index; also the Euler step count used in training.
    pub t_max: usize,
    pub ddim_timesteps: usize,
    pub image_size: usize,
    pub channels: usize,
    pub heads: usize,
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub eval_samples: usize,
    pub log_every: usize,
    /// Record wall-clock times; off keeps output byte-reproducible.
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            feature_dim: PRIOR_DIM,
            hidden_dim: 256,
            batch_size: 8,
            phase1_iters: 500,
            phase2_iters: 500,
            ddim_iters: 500,
            teacher_warmup_iters: 150,
            lr_rex: 2e-4,
            lr_img: 2e-4,
            lr_phase2: 1e-4,
            lr_ddim: 2e-4,
            lr_teacher_warmup: 1e-3,
            lambda_kd: 1.0,
            lambda_traj: 1.0,
            lambda_flex: 0.15,
            lambda_vel: 0.05,
            sampler_steps: vec![1, 2, 3, 4, 5],
            t_max: 4,
            ddim_timesteps: 50,
            image_size: 16,
            channels: 16,
            heads: 2,
            train_pairs: 256,
            heldout_pairs: 64,
            eval_samples: 512,
            log_every: 10,
            timing: false,
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_rex", self.lr_rex),
            ("lr_img", self.lr_img),
            ("lr_phase2", self.lr_phase2),
            ("lr_ddim", self.lr_ddim),
            ("lr_teacher_warmup", self.lr_teacher_warmup),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("lambda_kd", self.lambda_kd),
            ("lambda_traj", self.lambda_traj),
            ("lambda_flex", self.lambda_flex),
            ("lambda_vel", self.lambda_vel),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.feature_dim != PRIOR_DIM {
            return Err(bad(format!("feature_dim must be {PRIOR_DIM} to condition the attention block")));
        }
        for (name, v) in [
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("t_max", self.t_max),
            ("ddim_timesteps", self.ddim_timesteps),
            ("log_every", self.log_every),
            ("heads", self.heads),
            ("heldout_pairs", self.heldout_pairs),
        ] {
            if v == 0 {
                return Err(bad(format!("{name} must be positive")));
            }
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(4) {
            return Err(bad("image_size must be a positive multiple of 4"));
        }
        if !self.channels.is_multiple_of(4 * self.heads) || self.channels == 0 {
            return Err(bad("channels must be a positive multiple of 4·heads"));
        }
        if self.train_pairs < self.batch_size {
            return Err(bad("train_pairs must be at least batch_size"));
        }
        if self.eval_samples < 2 {
            return Err(bad("eval_samples must be at least 2"));
        }
        if self.sampler_steps.is_empty() {
            return Err(bad("sampler_steps is empty"));
        }
        if let Some(&s) = self.sampler_steps.iter().find(|&&s| s == 0 || s > self.ddim_timesteps) {
            return Err(bad(format!("sampler step count {s} outside 1..={}", self.ddim_timesteps)));
        }
        Ok(())
    }
}

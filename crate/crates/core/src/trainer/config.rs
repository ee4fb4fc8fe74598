use serde::{Deserialize, Serialize};

use crate::config::{ConfigIssue, ModelConfig, TapSelection};

/// Per-run architecture overrides used by the ablation suite.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationOverride {
    pub tap_selection: Option<TapSelection>,
    pub taps_use_mlp: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    /// Learning rate for the first half of training; halved afterwards.
    pub lr0: f64,
    pub seed: u64,
    /// Validation cadence in steps; 0 disables evaluation.
    pub eval_every: usize,
    pub eval_batches: usize,
    /// Seeds the fixed held-out crops, shared by every run.
    pub eval_seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Writes 0 into the metrics `seconds` column so logs compare bytewise.
    pub deterministic: bool,
    /// Checkpoint cadence in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub train_tokens: usize,
    pub val_tokens: usize,
    pub ablation: AblationOverride,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_steps: 20_000,
            lr0: 2e-4,
            seed: 0,
            eval_every: 500,
            eval_batches: 8,
            eval_seed: 0x5eed,
            grad_clip: Some(1.0),
            deterministic: false,
            checkpoint_every: 0,
            train_tokens: 5_000_000,
            val_tokens: 500_000,
            ablation: AblationOverride::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        if self.batch_size == 0 {
            issues.push(ConfigIssue::new("batch_size", "batch_size >= 1"));
        }
        if self.total_steps < 2 {
            issues.push(ConfigIssue::new("total_steps", "total_steps >= 2"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            issues.push(ConfigIssue::new("lr0", "lr0 > 0"));
        }
        if self.eval_every > 0 && self.eval_batches == 0 {
            issues.push(ConfigIssue::new(
                "eval_batches",
                "eval_batches >= 1 when eval_every > 0",
            ));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                issues.push(ConfigIssue::new("grad_clip", "grad_clip > 0"));
            }
        }
        if self.train_tokens == 0 {
            issues.push(ConfigIssue::new("train_tokens", "train_tokens >= 1"));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }

    /// `model` with the ablation overrides applied.
    pub fn apply_ablation(&self, model: &ModelConfig) -> ModelConfig {
        let mut m = model.clone();
        if let Some(s) = self.ablation.tap_selection {
            m.tap_selection = s;
        }
        if let Some(u) = self.ablation.taps_use_mlp {
            m.taps_use_mlp = u;
        }
        m
    }
}

/// `lr0` before the midpoint `total_steps / 2`, `lr0 / 2` from it on.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.total_steps / 2 {
        cfg.lr0
    } else {
        cfg.lr0 / 2.0
    }
}

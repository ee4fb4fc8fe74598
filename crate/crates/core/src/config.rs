//! Architectural hyperparameters.

use std::fmt;

use serde::{Deserialize, Serialize};

/// One failed validation constraint, addressed by its config key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfigIssue {
    pub key: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Same issue with `prefix.` prepended to the key.
    pub fn within(mut self, prefix: &str) -> Self {
        self.key = format!("{prefix}.{}", self.key);
        self
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

/// Which intermediate layers feed the final cross-attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TapSelection {
    /// Every layer in `tap_layers`.
    #[default]
    AllTaps,
    /// Only the middle layer of the stack, `n_layers / 2`.
    MiddleOnly,
}

/// Residual wiring of a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Recurrence {
    /// `x + MLP(LN(x + Attn(LN(x))))`: one outer residual, with the
    /// attention output added to `x` inside the second norm's argument.
    #[default]
    AsPrinted,
    /// Textbook pre-LN: `h = x + Attn(LN(x)); h + MLP(LN(h))`.
    StandardPreln,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Feed-forward width; `None` means `4 * d_model`.
    pub d_ffn: Option<usize>,
    pub context_len: usize,
    pub vocab_size: usize,
    pub shortcut_enabled: bool,
    /// 1-indexed layer outputs `x^l` tapped for the final cross-attention.
    pub tap_layers: Vec<usize>,
    pub tap_hidden: usize,
    /// Cross-attention heads; `None` means `2 * n_heads`.
    pub final_heads: Option<usize>,
    pub taps_use_mlp: bool,
    pub tap_selection: TapSelection,
    pub group_embedding: bool,
    pub recurrence: Recurrence,
    /// Appends the query stream `x^{L-1}` as one more key/value group.
    pub include_query_stream_group: bool,
    pub layer_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 10,
            d_model: 128,
            n_heads: 8,
            d_ffn: None,
            context_len: 512,
            vocab_size: 27,
            shortcut_enabled: true,
            tap_layers: vec![2, 4, 6, 8],
            tap_hidden: 1024,
            final_heads: None,
            taps_use_mlp: true,
            tap_selection: TapSelection::AllTaps,
            group_embedding: false,
            recurrence: Recurrence::AsPrinted,
            include_query_stream_group: false,
            layer_norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// 10 layers, d=128, 8 heads, FFN 4d, T=512, taps 2/4/6/8 through
    /// 1024-wide MLPs, 16 cross-attention heads.
    pub fn paper(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            ..Self::default()
        }
    }

    /// Same architecture without the shortcut layer.
    pub fn baseline(&self) -> Self {
        Self {
            shortcut_enabled: false,
            ..self.clone()
        }
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_ffn.unwrap_or(4 * self.d_model)
    }

    pub fn final_head_count(&self) -> usize {
        self.final_heads.unwrap_or(2 * self.n_heads)
    }

    /// Layers whose outputs are tapped after applying `tap_selection`.
    pub fn active_taps(&self) -> Vec<usize> {
        match self.tap_selection {
            TapSelection::AllTaps => self.tap_layers.clone(),
            TapSelection::MiddleOnly => vec![self.n_layers / 2],
        }
    }

    /// Number of key/value groups the final layer attends over.
    pub fn kv_groups(&self) -> usize {
        self.active_taps().len() + usize::from(self.include_query_stream_group)
    }

    /// Checks every constraint and reports all violations.
    pub fn validate(&self) -> Result<(), Vec<ConfigIssue>> {
        let mut issues = Vec::new();
        let mut fail = |key: &str, msg: String| issues.push(ConfigIssue::new(key, msg));

        if self.n_layers == 0 {
            fail("n_layers", "n_layers >= 1".into());
        }
        if self.d_model == 0 {
            fail("d_model", "d_model >= 1".into());
        }
        if self.n_heads == 0 {
            fail("n_heads", "n_heads >= 1".into());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            fail(
                "d_model",
                format!(
                    "d_model divisible by n_heads ({} % {} != 0)",
                    self.d_model, self.n_heads
                ),
            );
        }
        let fh = self.final_head_count();
        if fh == 0 {
            fail("final_heads", "final_heads >= 1".into());
        } else if !self.d_model.is_multiple_of(fh) {
            fail(
                "final_heads",
                format!(
                    "d_model divisible by final_heads ({} % {fh} != 0)",
                    self.d_model
                ),
            );
        }
        if self.ffn_dim() == 0 {
            fail("d_ffn", "d_ffn >= 1".into());
        }
        if self.context_len == 0 {
            fail("context_len", "context_len >= 1".into());
        }
        if self.vocab_size == 0 {
            fail("vocab_size", "vocab_size >= 1".into());
        }
        if self.taps_use_mlp && self.tap_hidden == 0 {
            fail("tap_hidden", "tap_hidden >= 1".into());
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            fail("layer_norm_eps", "layer_norm_eps > 0".into());
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            fail(
                "tap_layers",
                format!(
                    "tap_layers must be strictly increasing, got {:?}",
                    self.tap_layers
                ),
            );
        }
        if let Some(&bad) = self
            .tap_layers
            .iter()
            .find(|&&l| l == 0 || l >= self.n_layers)
        {
            fail(
                "tap_layers",
                format!(
                    "tap layer {bad} out of range: need 1 <= l < n_layers ({})",
                    self.n_layers
                ),
            );
        }
        if self.shortcut_enabled {
            if self.n_layers < 2 {
                fail("n_layers", "shortcut model needs n_layers >= 2".into());
            }
            if self.tap_selection == TapSelection::MiddleOnly && self.n_layers / 2 == 0 {
                fail("tap_selection", "middle_only needs n_layers >= 2".into());
            }
            if self.kv_groups() == 0 {
                fail("tap_layers", "shortcut model needs at least one tap".into());
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_is_valid_with_derived_widths() {
        let c = ModelConfig::paper(27);
        c.validate().unwrap();
        assert_eq!(c.ffn_dim(), 512);
        assert_eq!(c.final_head_count(), 16);
        assert_eq!(c.kv_groups(), 4);
    }

    #[test]
    fn indivisible_heads_reported() {
        let c = ModelConfig {
            d_model: 130,
            ..ModelConfig::default()
        };
        let issues = c.validate().unwrap_err();
        assert!(issues
            .iter()
            .any(|i| i.key == "d_model" && i.message.contains("d_model divisible by n_heads")));
    }

    #[test]
    fn decreasing_taps_reported() {
        let c = ModelConfig {
            tap_layers: vec![4, 2],
            ..ModelConfig::default()
        };
        let issues = c.validate().unwrap_err();
        assert!(issues
            .iter()
            .any(|i| i.message.contains("strictly increasing")));
    }

    #[test]
    fn all_issues_collected() {
        let c = ModelConfig {
            d_model: 130,
            tap_layers: vec![4, 2, 12],
            context_len: 0,
            ..ModelConfig::default()
        };
        let issues = c.validate().unwrap_err();
        assert!(issues.len() >= 4, "{issues:?}");
    }

    #[test]
    fn middle_only_taps_center_layer() {
        let c = ModelConfig {
            tap_selection: TapSelection::MiddleOnly,
            ..ModelConfig::default()
        };
        assert_eq!(c.active_taps(), vec![5]);
    }

    #[test]
    fn json_round_trip_and_unknown_key() {
        let c = ModelConfig::paper(1024);
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"n_layer": 3}"#).is_err());
        let partial: ModelConfig = serde_json::from_str(r#"{"d_model": 64}"#).unwrap();
        assert_eq!(partial.n_layers, 10);
        assert_eq!(partial.d_model, 64);
    }
}

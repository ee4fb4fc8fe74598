//! The JSON run configuration and its validation.

use std::path::PathBuf;

use atsc_core::trainer::{validate_all, TrainConfig};
use atsc_core::{ConfigIssue, ModelConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// In-memory synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub p_easy: f64,
    pub length: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            vocab_size: 27,
            p_easy: 0.9,
            length: 200_000,
            seed: 0,
        }
    }
}

/// Corpus source; at most one may be set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Raw text, encoded with the 27-symbol character vocabulary.
    pub text: Option<PathBuf>,
    /// `TOKS` token stream.
    pub tokens: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            out_dir: PathBuf::from("runs"),
        }
    }
}

/// Reports every key in `doc` that the matching key in `schema` lacks.
/// Object-valued schema entries are descended into, as is the optional
/// synthetic-corpus section.
fn unknown_keys(doc: &Value, schema: &Value, path: &str, issues: &mut Vec<ConfigIssue>) {
    let (Value::Object(d), Value::Object(s)) = (doc, schema) else {
        return;
    };
    for (k, v) in d {
        let key = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match s.get(k) {
            None => issues.push(ConfigIssue::new(key, "unknown key")),
            Some(Value::Null) if k == "synthetic" => {
                let spec = serde_json::to_value(SyntheticSpec::default()).unwrap();
                unknown_keys(v, &spec, &key, issues);
            }
            Some(sub) => unknown_keys(v, sub, &key, issues),
        }
    }
}

fn data_issues(data: &DataConfig) -> Vec<ConfigIssue> {
    let mut issues = Vec::new();
    let sources = [
        data.text.is_some(),
        data.tokens.is_some(),
        data.synthetic.is_some(),
    ];
    if sources.iter().filter(|&&s| s).count() > 1 {
        issues.push(ConfigIssue::new(
            "data",
            "at most one of data.text, data.tokens, data.synthetic",
        ));
    }
    if let Some(s) = &data.synthetic {
        if !(0.0..=1.0).contains(&s.p_easy) {
            issues.push(ConfigIssue::new(
                "data.synthetic.p_easy",
                "p_easy in [0, 1]",
            ));
        }
        if s.vocab_size < 2 {
            issues.push(ConfigIssue::new(
                "data.synthetic.vocab_size",
                "vocab_size >= 2",
            ));
        }
    }
    issues
}

/// Parses and checks a run configuration, returning every problem found.
pub fn validate_config(json: &str) -> Result<RunConfig, Vec<ConfigIssue>> {
    let doc: Value = serde_json::from_str(json)
        .map_err(|e| vec![ConfigIssue::new("<document>", format!("invalid JSON: {e}"))])?;
    if !doc.is_object() {
        return Err(vec![ConfigIssue::new(
            "<document>",
            "expected a JSON object",
        )]);
    }
    let schema = serde_json::to_value(RunConfig::default()).unwrap();
    let mut issues = Vec::new();
    unknown_keys(&doc, &schema, "", &mut issues);
    if !issues.is_empty() {
        return Err(issues);
    }
    let cfg: RunConfig = serde_json::from_value(doc)
        .map_err(|e| vec![ConfigIssue::new("<document>", e.to_string())])?;
    cfg.check().map(|()| cfg)
}

impl RunConfig {
    /// Every model, training and data constraint.
    pub fn check(&self) -> Result<(), Vec<ConfigIssue>> {
        let mut issues = validate_all(&self.model, &self.train)
            .err()
            .unwrap_or_default();
        issues.extend(data_issues(&self.data));
        if issues.is_empty() {
            Ok(())
        } else {
            Err(issues)
        }
    }
}

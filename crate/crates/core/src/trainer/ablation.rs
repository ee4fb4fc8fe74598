//! Tap-configuration ablations and the model-width sweep, trained under one
//! seed, one data order and one set of evaluation crops.

use std::path::Path;
use std::sync::Arc;

use super::config::TrainConfig;
use super::{evaluate, RunFiles, Trainer};
use crate::config::{ModelConfig, TapSelection};
use crate::corpus::TokenStream;
use crate::error::Result;
use crate::model::param_count;

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `ablation` or `scaling`.
    pub group: &'static str,
    pub name: String,
    pub d_model: usize,
    pub params: usize,
    pub val_nll: Option<f64>,
    pub val_acc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,name,d_model,params,val_nll,val_acc,status\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.group,
                r.name,
                r.d_model,
                r.params,
                opt(r.val_nll),
                opt(r.val_acc),
                r.error
                    .as_deref()
                    .map_or("ok".into(), |e| e.replace(',', ";")),
            ));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let header = ["group", "model", "d", "params", "NLL", "Accuracy", "status"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.group.to_string(),
                    r.name.clone(),
                    r.d_model.to_string(),
                    r.params.to_string(),
                    opt(r.val_nll),
                    opt(r.val_acc),
                    r.error.clone().unwrap_or_else(|| "ok".into()),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let line = |row: &[String]| {
            row.iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&header.map(String::from));
        out.push('\n');
        out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        out.push('\n');
        for row in &cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        out
    }
}

/// The eight cells: four tap configurations at `base.d_model`, then
/// baseline and all-taps-with-MLP at each width in `dims`.
pub fn ablation_cells(
    base: &ModelConfig,
    dims: [usize; 2],
) -> Vec<(&'static str, String, ModelConfig)> {
    let all = ModelConfig {
        shortcut_enabled: true,
        tap_selection: TapSelection::AllTaps,
        taps_use_mlp: true,
        ..base.clone()
    };
    let mut cells = vec![
        ("ablation", "baseline".to_string(), all.baseline()),
        (
            "ablation",
            "middle layer with MLP features".to_string(),
            ModelConfig {
                tap_selection: TapSelection::MiddleOnly,
                ..all.clone()
            },
        ),
        (
            "ablation",
            "all layers with MLP features".to_string(),
            all.clone(),
        ),
        (
            "ablation",
            "all layers without MLP features".to_string(),
            ModelConfig {
                taps_use_mlp: false,
                ..all.clone()
            },
        ),
    ];
    for d in dims {
        let sized = ModelConfig {
            d_model: d,
            ..all.clone()
        };
        cells.push(("scaling", format!("baseline d={d}"), sized.baseline()));
        cells.push((
            "scaling",
            format!("all layers with MLP features d={d}"),
            sized,
        ));
    }
    cells
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Trains every cell with the same `train` settings. A failing cell is
/// recorded with its error and the suite moves on. With `out_dir`, each
/// cell's metrics and checkpoint go to `out_dir/<group>_<name>/`.
pub fn run_ablation_suite(
    base: &ModelConfig,
    train: &TrainConfig,
    train_stream: Arc<TokenStream>,
    val: Arc<TokenStream>,
    dims: [usize; 2],
    out_dir: Option<&Path>,
) -> AblationTable {
    let mut table = AblationTable::default();
    // overrides would collapse the cells onto one configuration
    let cfg = TrainConfig {
        ablation: Default::default(),
        ..train.clone()
    };
    for (group, name, model_cfg) in ablation_cells(base, dims) {
        let d_model = model_cfg.d_model;
        let params = param_count(&model_cfg);
        let outcome = (|| -> Result<(f64, f64)> {
            let mut trainer = Trainer::new(
                model_cfg.clone(),
                cfg.clone(),
                Arc::clone(&train_stream),
                Arc::clone(&val),
            )?;
            match out_dir {
                Some(dir) => {
                    let mut files =
                        RunFiles::create(&dir.join(format!("{group}_{}", slug(&name))))?;
                    trainer.run(cfg.total_steps, Some(&mut files))?;
                }
                None => {
                    trainer.run(cfg.total_steps, None)?;
                }
            }
            let s = evaluate(
                trainer.model(),
                &val,
                cfg.batch_size,
                cfg.eval_batches.max(1),
                cfg.eval_seed,
            )?;
            Ok((s.nll, s.acc))
        })();
        let (val_nll, val_acc, error) = match outcome {
            Ok((n, a)) => (Some(n), Some(a), None),
            Err(e) => (None, None, Some(e.to_string())),
        };
        table.rows.push(AblationRow {
            group,
            name,
            d_model,
            params,
            val_nll,
            val_acc,
            error,
        });
    }
    table
}

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,split,nll,acc,lr,seconds,tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One line of the metrics log. `nll` is in nats per token.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub split: Split,
    pub nll: f64,
    pub acc: f64,
    pub lr: f64,
    pub seconds: f64,
    pub tokens: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:e},{:.3},{}",
            self.step, self.split, self.nll, self.acc, self.lr, self.seconds, self.tokens
        )
    }

    pub fn parse_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 7 {
            return None;
        }
        Some(Self {
            step: f[0].parse().ok()?,
            split: match f[1] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return None,
            },
            nll: f[2].parse().ok()?,
            acc: f[3].parse().ok()?,
            lr: f[4].parse().ok()?,
            seconds: f[5].parse().ok()?,
            tokens: f[6].parse().ok()?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != METRICS_HEADER {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!("expected header {METRICS_HEADER}"),
                });
            }
        } else if !line.is_empty() {
            rows.push(MetricsRow::parse_csv(line).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset,
                message: format!("bad metrics row {line:?}"),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(rows)
}

/// Append-only metrics CSV.
pub struct MetricsWriter {
    file: fs::File,
    path: std::path::PathBuf,
}

impl MetricsWriter {
    /// Starts a fresh log, replacing any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Reopens a log for a run resumed after `step`, dropping any rows
    /// written past it.
    pub fn resume(path: &Path, step: usize) -> Result<Self> {
        let kept: Vec<MetricsRow> = if path.exists() {
            read_metrics(path)?
                .into_iter()
                .filter(|r| r.step <= step)
                .collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.to_csv()).map_err(|e| Error::io(&self.path, e))
    }
}

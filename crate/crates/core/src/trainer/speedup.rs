//! Time-to-target comparison of two training logs.

use std::fmt;

use super::metrics::{MetricsRow, Split};

/// First validation row at or below the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crossing {
    pub step: usize,
    pub seconds: f64,
    pub nll: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeedupReport {
    pub target_nll: f64,
    pub baseline: Option<Crossing>,
    pub shortcut: Option<Crossing>,
    /// `100 · (steps_base − steps_short) / steps_base`, when both cross.
    pub step_speedup_pct: Option<f64>,
    /// Same in wall-clock seconds; `None` also when the baseline time is 0.
    pub time_speedup_pct: Option<f64>,
}

pub fn first_crossing(log: &[MetricsRow], target: f64) -> Option<Crossing> {
    log.iter()
        .find(|r| r.split == Split::Val && r.nll <= target)
        .map(|r| Crossing {
            step: r.step,
            seconds: r.seconds,
            nll: r.nll,
        })
}

/// Final validation NLL of a log, the default comparison target.
pub fn final_val_nll(log: &[MetricsRow]) -> Option<f64> {
    log.iter()
        .rev()
        .find(|r| r.split == Split::Val)
        .map(|r| r.nll)
}

fn pct(base: f64, short: f64) -> Option<f64> {
    (base > 0.0).then(|| 100.0 * (base - short) / base)
}

/// Compares how soon each run's validation NLL first reaches `target_nll`.
/// Runs that never reach it are reported as such; nothing is extrapolated.
pub fn speedup_protocol(
    baseline: &[MetricsRow],
    shortcut: &[MetricsRow],
    target_nll: f64,
) -> SpeedupReport {
    let b = first_crossing(baseline, target_nll);
    let s = first_crossing(shortcut, target_nll);
    let (step_speedup_pct, time_speedup_pct) = match (b, s) {
        (Some(b), Some(s)) => (pct(b.step as f64, s.step as f64), pct(b.seconds, s.seconds)),
        _ => (None, None),
    };
    SpeedupReport {
        target_nll,
        baseline: b,
        shortcut: s,
        step_speedup_pct,
        time_speedup_pct,
    }
}

fn crossing_text(c: &Option<Crossing>) -> String {
    match c {
        Some(c) => format!("step {} ({:.3}s, nll {:.4})", c.step, c.seconds, c.nll),
        None => "not reached".into(),
    }
}

fn pct_text(p: Option<f64>) -> String {
    p.map_or_else(|| "n/a".into(), |p| format!("{p:.1}%"))
}

impl fmt::Display for SpeedupReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "target val nll: {:.4}", self.target_nll)?;
        writeln!(f, "baseline: {}", crossing_text(&self.baseline))?;
        writeln!(f, "shortcut: {}", crossing_text(&self.shortcut))?;
        writeln!(f, "step speed-up: {}", pct_text(self.step_speedup_pct))?;
        write!(f, "time speed-up: {}", pct_text(self.time_speedup_pct))
    }
}

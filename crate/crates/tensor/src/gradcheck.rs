//! Central finite-difference gradient checking.
//!
//! A function under test maps tape inputs to any output tensor. The checker
//! contracts that output with a fixed random weight tensor `R`, giving the
//! scalar `L = Σ out ⊙ R`, and compares `∂L/∂x` from the tape against
//! `(L(x + h) − L(x − h)) / 2h` evaluated coordinate by coordinate.
//! The numeric side only ever runs forward passes; it shares no code with
//! the backward rules it checks.
//!
//! The step is `h = step · max(1, |x|)`. Each coordinate's error is
//! `|analytic − numeric| / max(|analytic|, |numeric|, floor)` with a default
//! floor of 1, the same scaling the step uses: relative for large gradients,
//! absolute for small ones. At f32 and `h = 1e-3` the difference quotient
//! alone carries ~1e-4 of rounding noise, so a purely relative measure would
//! judge near-zero gradients on noise.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Relative step size.
    pub step: f32,
    /// Pass threshold on the maximum coordinate error.
    pub tol: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many coordinates, sampled uniformly across all
    /// inputs; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seeds both the projection weights and the coordinate sample.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-3,
            floor: 1.0,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Checks `f`'s tape gradients with respect to every tensor in `inputs`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_with(f, inputs, cfg, |_| {})
}

/// Like [`gradcheck`], with a hook to configure the analytic tape (for
/// example to inject a faulty backward rule).
pub fn gradcheck_with<F, P>(
    f: F,
    inputs: &[Tensor],
    cfg: &GradCheckConfig,
    prepare: P,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    P: Fn(&mut Tape),
{
    let mut rng = Rng::new(cfg.seed);

    // analytic
    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let weights = Tensor::uniform(out_shape, -1.0, 1.0, &mut rng);
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    // coordinates to check
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let total: usize = sizes.iter().sum();
    let mut flat: Vec<usize> = (0..total).collect();
    if let Some(n) = cfg.max_coords {
        if n < total {
            rng.shuffle(&mut flat);
            flat.truncate(n);
            flat.sort_unstable();
        }
    }

    let project = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape
            .value(out)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&o, &w)| o as f64 * w as f64)
            .sum())
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut checks = Vec::with_capacity(flat.len());
    for coord in flat {
        let (input, index) = locate(&sizes, coord);
        let x = inputs[input].data()[index];
        let h = cfg.step * x.abs().max(1.0);
        let (xp, xm) = (x + h, x - h);
        work[input].data_mut()[index] = xp;
        let fp = project(&work)?;
        work[input].data_mut()[index] = xm;
        let fm = project(&work)?;
        work[input].data_mut()[index] = x;
        let numeric = (fp - fm) / (xp as f64 - xm as f64);
        let analytic = grads
            .get(vars[input])
            .map(|g| g.data()[index] as f64)
            .unwrap_or(0.0);
        let denom = analytic.abs().max(numeric.abs()).max(cfg.floor);
        checks.push(CoordCheck {
            input,
            index,
            analytic,
            numeric,
            rel_err: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_err = checks.iter().map(|c| c.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err < cfg.tol && max_rel_err.is_finite(),
        max_rel_err,
        tol: cfg.tol,
        checks,
    })
}

fn locate(sizes: &[usize], mut coord: usize) -> (usize, usize) {
    for (i, &s) in sizes.iter().enumerate() {
        if coord < s {
            return (i, coord);
        }
        coord -= s;
    }
    unreachable!("coordinate beyond input sizes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::OpKind;

    #[test]
    fn locate_walks_inputs() {
        assert_eq!(locate(&[3, 2], 0), (0, 0));
        assert_eq!(locate(&[3, 2], 3), (1, 0));
        assert_eq!(locate(&[3, 2], 4), (1, 1));
    }

    #[test]
    fn sampling_limits_coordinates() {
        let mut rng = Rng::new(1);
        let x = Tensor::randn([10, 10], 1.0, &mut rng);
        let cfg = GradCheckConfig {
            max_coords: Some(7),
            ..Default::default()
        };
        let report = gradcheck(|t, v| t.gelu(v[0]), &[x], &cfg).unwrap();
        assert_eq!(report.checks.len(), 7);
        assert!(report.passed, "{:?}", report.worst());
    }

    #[test]
    fn corrupted_rule_is_reported() {
        let mut rng = Rng::new(2);
        let x = Tensor::randn([4, 4], 1.0, &mut rng);
        let report = gradcheck_with(
            |t, v| t.gelu(v[0]),
            &[x],
            &GradCheckConfig::default(),
            |t| t.inject_fault(OpKind::Gelu, 1.1),
        )
        .unwrap();
        assert!(!report.passed);
    }
}

//! Finite-difference checks over every tape op and every model component.
//!
//! Component checks differentiate with respect to the inputs and all
//! parameters at once. Parameters are re-drawn at unit scale first (see
//! [`spread_params`]) so no path is numerically silent.

use std::sync::Arc;

use atsc_tensor::{
    gradcheck, gradcheck_with, GradCheckConfig, GradCheckReport, Mask, OpKind, ParamStore, Rng,
    Tape, Tensor, Var,
};

use crate::config::{ModelConfig, Recurrence};
use crate::error::Result;
use crate::model::{Binding, ForwardOptions, Model};

pub const OP_TOL: f64 = 1e-3;
pub const MODULE_TOL: f64 = 1e-2;

/// Coordinates sampled per component check.
const MODULE_COORDS: usize = 1500;
const FULL_MODEL_COORDS: usize = 400;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> atsc_tensor::Result<Var>>;

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn cfg(tol: f64, max_coords: Option<usize>, seed: u64) -> GradCheckConfig {
    GradCheckConfig {
        tol,
        max_coords,
        seed,
        ..Default::default()
    }
}

/// Every primitive op, each checked on every input coordinate.
pub fn op_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = Rng::new(seed);
    let causal = Arc::new(Mask::causal(5));
    let ragged = Arc::new(Mask::from_fn(3, 6, |r, c| c % 3 <= r));
    let ce_targets: Vec<u32> = (0..6).map(|_| rng.below(7) as u32).collect();
    let emb_ids: Vec<u32> = vec![0, 3, 3, 1, 4, 0];

    let cases: Vec<(&'static str, OpFn, Vec<Tensor>)> = vec![
        (
            "matmul",
            Box::new(|t, v| t.matmul(v[0], v[1])),
            vec![randn(&[5, 7], &mut rng), randn(&[7, 3], &mut rng)],
        ),
        (
            "matmul_batched",
            Box::new(|t, v| t.matmul(v[0], v[1])),
            vec![randn(&[2, 1, 3, 4], &mut rng), randn(&[3, 4, 2], &mut rng)],
        ),
        (
            "add_broadcast",
            Box::new(|t, v| t.add(v[0], v[1])),
            vec![randn(&[2, 3, 4], &mut rng), randn(&[4], &mut rng)],
        ),
        (
            "mul",
            Box::new(|t, v| t.mul(v[0], v[1])),
            vec![randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng)],
        ),
        (
            "scale",
            Box::new(|t, v| t.scale(v[0], -0.37)),
            vec![randn(&[3, 4], &mut rng)],
        ),
        (
            "gelu",
            Box::new(|t, v| t.gelu(v[0])),
            vec![randn(&[4, 6], &mut rng)],
        ),
        (
            "layer_norm",
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
            vec![
                randn(&[3, 8], &mut rng),
                randn(&[8], &mut rng),
                randn(&[8], &mut rng),
            ],
        ),
        (
            "softmax_causal",
            Box::new(move |t, v| t.softmax_masked(v[0], &causal)),
            vec![randn(&[2, 5, 5], &mut rng)],
        ),
        (
            "softmax_block",
            Box::new(move |t, v| t.softmax_masked(v[0], &ragged)),
            vec![randn(&[2, 3, 6], &mut rng)],
        ),
        (
            "cross_entropy",
            Box::new(move |t, v| t.cross_entropy(v[0], &ce_targets)),
            vec![randn(&[2, 3, 7], &mut rng)],
        ),
        (
            "embedding",
            Box::new(move |t, v| t.embedding(v[0], &emb_ids, &[2, 3])),
            vec![randn(&[5, 4], &mut rng)],
        ),
        (
            "permute",
            Box::new(|t, v| t.permute(v[0], &[2, 0, 1])),
            vec![randn(&[2, 3, 4], &mut rng)],
        ),
        (
            "transpose_last",
            Box::new(|t, v| t.transpose_last(v[0])),
            vec![randn(&[2, 3, 4], &mut rng)],
        ),
        (
            "reshape",
            Box::new(|t, v| t.reshape(v[0], &[4, 6])),
            vec![randn(&[2, 3, 4], &mut rng)],
        ),
        (
            "concat",
            Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
            vec![randn(&[2, 3, 4], &mut rng), randn(&[2, 2, 4], &mut rng)],
        ),
        (
            "sum",
            Box::new(|t, v| t.sum(v[0])),
            vec![randn(&[3, 5], &mut rng)],
        ),
        (
            "mean",
            Box::new(|t, v| t.mean(v[0])),
            vec![randn(&[3, 5], &mut rng)],
        ),
    ];
    let mut out = Vec::with_capacity(cases.len());
    for (i, (name, f, inputs)) in cases.into_iter().enumerate() {
        let report = gradcheck(f, &inputs, &cfg(OP_TOL, None, seed ^ (i as u64 + 1)))?;
        out.push(SuiteEntry { name, report });
    }
    Ok(out)
}

/// Redraws parameters at unit scale: norm gains `1 + 0.1·n`, biases
/// `0.1·n`, matrices `n / sqrt(rows)`, embeddings `0.5·n`.
pub fn spread_params(store: &mut ParamStore, seed: u64) {
    let mut rng = Rng::new(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let value = store.value_mut(id);
        let rows = value.shape()[0] as f32;
        for x in value.data_mut() {
            let n = rng.normal();
            *x = if name.ends_with(".gain") {
                1.0 + 0.1 * n
            } else if name.ends_with(".bias") {
                0.1 * n
            } else if name.ends_with(".weight") {
                n / rows.sqrt()
            } else {
                0.5 * n
            };
        }
    }
}

fn param_inputs(store: &ParamStore) -> Vec<Tensor> {
    store.iter().map(|(_, p)| p.value().clone()).collect()
}

fn spread_model(config: ModelConfig, seed: u64) -> Result<Model> {
    let mut model = Model::new(config, seed)?;
    spread_params(model.params_mut(), seed.wrapping_add(1));
    Ok(model)
}

fn small(n_layers: usize, taps: Vec<usize>) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model: 32,
        n_heads: 4,
        context_len: 8,
        vocab_size: 5,
        shortcut_enabled: !taps.is_empty(),
        tap_layers: taps,
        tap_hidden: 16,
        ..ModelConfig::default()
    }
}

fn decoder_layer_check(seed: u64, recurrence: Recurrence) -> Result<GradCheckReport> {
    let model = spread_model(
        ModelConfig {
            recurrence,
            ..small(1, vec![])
        },
        seed,
    )?;
    let layer = model.layers()[0].clone();
    let eps = model.config().layer_norm_eps;
    let mask = Arc::new(Mask::causal(8));
    let mut inputs = vec![randn(&[2, 8, 32], &mut Rng::new(seed ^ 0x5eed))];
    inputs.extend(param_inputs(model.params()));
    let f = move |tape: &mut Tape, v: &[Var]| -> atsc_tensor::Result<Var> {
        let bind = Binding::from_vars(v[1..].to_vec(), eps);
        layer
            .forward(tape, &bind, v[0], &mask, recurrence)
            .map_err(into_tensor_error)
    };
    Ok(gradcheck(
        f,
        &inputs,
        &cfg(MODULE_TOL, Some(MODULE_COORDS), seed),
    )?)
}

fn feature_tap_check(seed: u64) -> Result<GradCheckReport> {
    let model = spread_model(
        ModelConfig {
            group_embedding: true,
            ..small(2, vec![1])
        },
        seed,
    )?;
    let tap = model.shortcut().expect("shortcut model").taps[0].clone();
    let eps = model.config().layer_norm_eps;
    let mut inputs = vec![randn(&[2, 8, 32], &mut Rng::new(seed ^ 0x7a9))];
    inputs.extend(param_inputs(model.params()));
    let f = move |tape: &mut Tape, v: &[Var]| -> atsc_tensor::Result<Var> {
        let bind = Binding::from_vars(v[1..].to_vec(), eps);
        tap.forward(tape, &bind, v[0]).map_err(into_tensor_error)
    };
    Ok(gradcheck(
        f,
        &inputs,
        &cfg(MODULE_TOL, Some(MODULE_COORDS), seed),
    )?)
}

fn shortcut_final_check(seed: u64) -> Result<GradCheckReport> {
    let model = spread_model(small(5, vec![1, 2, 3, 4]), seed)?;
    let sc = model.shortcut().expect("shortcut model").clone();
    let c = model.config().clone();
    let mut rng = Rng::new(seed ^ 0xf1a1);
    let mut inputs: Vec<Tensor> = (0..5).map(|_| randn(&[2, 8, 32], &mut rng)).collect();
    inputs.extend(param_inputs(model.params()));
    let f = move |tape: &mut Tape, v: &[Var]| -> atsc_tensor::Result<Var> {
        let bind = Binding::from_vars(v[5..].to_vec(), c.layer_norm_eps);
        sc.forward_features(tape, &bind, v[0], &v[1..5], c.recurrence, None)
            .map(|o| o.out)
            .map_err(into_tensor_error)
    };
    Ok(gradcheck(
        f,
        &inputs,
        &cfg(MODULE_TOL, Some(MODULE_COORDS), seed),
    )?)
}

/// The model used for the end-to-end check: T=8, d=32, 10 layers, taps
/// 2/4/6/8.
pub fn full_model_config() -> ModelConfig {
    ModelConfig {
        n_layers: 10,
        d_model: 32,
        n_heads: 4,
        context_len: 8,
        vocab_size: 11,
        tap_layers: vec![2, 4, 6, 8],
        tap_hidden: 32,
        ..ModelConfig::default()
    }
}

/// Logits of the full shortcut model checked against every parameter.
/// `prepare` configures the analytic tape.
pub fn full_model_check_with(seed: u64, prepare: impl Fn(&mut Tape)) -> Result<GradCheckReport> {
    let model = spread_model(full_model_config(), seed)?;
    let c = model.config().clone();
    let mut rng = Rng::new(seed ^ 0x70c);
    let tokens: Vec<u32> = (0..16).map(|_| rng.below(c.vocab_size) as u32).collect();
    let inputs = param_inputs(model.params());
    let f = |tape: &mut Tape, v: &[Var]| -> atsc_tensor::Result<Var> {
        let bind = Binding::from_vars(v.to_vec(), c.layer_norm_eps);
        model
            .forward_bound(tape, &bind, &tokens, 2, ForwardOptions::default())
            .map(|o| o.logits)
            .map_err(into_tensor_error)
    };
    Ok(gradcheck_with(
        f,
        &inputs,
        &cfg(MODULE_TOL, Some(FULL_MODEL_COORDS), seed),
        prepare,
    )?)
}

/// Component checks at the looser composite tolerance.
pub fn module_checks(seed: u64) -> Result<Vec<SuiteEntry>> {
    Ok(vec![
        SuiteEntry {
            name: "decoder_layer",
            report: decoder_layer_check(seed, Recurrence::AsPrinted)?,
        },
        SuiteEntry {
            name: "decoder_layer_preln",
            report: decoder_layer_check(seed, Recurrence::StandardPreln)?,
        },
        SuiteEntry {
            name: "feature_tap",
            report: feature_tap_check(seed)?,
        },
        SuiteEntry {
            name: "shortcut_final",
            report: shortcut_final_check(seed)?,
        },
        SuiteEntry {
            name: "full_model",
            report: full_model_check_with(seed, |_| {})?,
        },
    ])
}

/// Ops followed by components.
pub fn run(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut all = op_checks(seed)?;
    all.extend(module_checks(seed)?);
    Ok(all)
}

/// Whether the full-model check notices a 5% error planted in the
/// `kind` backward rule.
pub fn detects_fault(seed: u64, kind: OpKind) -> Result<bool> {
    let report = full_model_check_with(seed, |t| t.inject_fault(kind, 1.05))?;
    Ok(!report.passed)
}

fn into_tensor_error(e: crate::error::Error) -> atsc_tensor::TensorError {
    match e {
        crate::error::Error::Tensor(t) => t,
        other => atsc_tensor::TensorError::InvalidShape {
            op: "module",
            shape: vec![],
            reason: other.to_string(),
        },
    }
}

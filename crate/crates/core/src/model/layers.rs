//! Parameter groups and their forward passes.

use std::sync::Arc;

use atsc_tensor::{Mask, ParamId, ParamStore, Tape, Var};

use super::attention::{attend, AttentionParams};
use crate::config::Recurrence;
use crate::error::Result;

/// Tape variables for every parameter of a store, bound once per forward.
pub struct Binding {
    vars: Vec<Var>,
    pub eps: f32,
}

impl Binding {
    pub fn new(tape: &mut Tape, store: &ParamStore, eps: f32) -> Self {
        let vars = store.ids().map(|id| tape.param(store, id)).collect();
        Self { vars, eps }
    }

    /// Binds caller-provided variables, one per store parameter in id order.
    pub fn from_vars(vars: Vec<Var>, eps: f32) -> Self {
        Self { vars, eps }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn linear(&self, tape: &mut Tape, x: Var, l: &Linear) -> Result<Var> {
        let y = tape.matmul(x, self.var(l.weight))?;
        Ok(tape.add(y, self.var(l.bias))?)
    }

    pub fn norm(&self, tape: &mut Tape, x: Var, ln: &LayerNormParams) -> Result<Var> {
        Ok(tape.layer_norm(x, self.var(ln.gain), self.var(ln.bias), self.eps)?)
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let h = bind.linear(tape, x, &self.up)?;
        let h = tape.gelu(h)?;
        bind.linear(tape, h, &self.down)
    }
}

/// Joins an attention output into the residual stream around the FFN.
fn residual_ffn(
    tape: &mut Tape,
    bind: &Binding,
    x: Var,
    attn_out: Var,
    ln2: &LayerNormParams,
    ffn: &FeedForward,
    recurrence: Recurrence,
) -> Result<Var> {
    let mixed = tape.add(x, attn_out)?;
    let normed = bind.norm(tape, mixed, ln2)?;
    let m = ffn.forward(tape, bind, normed)?;
    let base = match recurrence {
        Recurrence::AsPrinted => x,
        Recurrence::StandardPreln => mixed,
    };
    Ok(tape.add(base, m)?)
}

/// Standard causal self-attention block.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    /// `x: [B,T,d]`; `mask` must be the `[T,T]` causal mask.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        mask: &Arc<Mask>,
        recurrence: Recurrence,
    ) -> Result<Var> {
        let h = bind.norm(tape, x, &self.ln1)?;
        let (a, _) = attend(tape, bind, h, h, &self.attn, mask)?;
        residual_ffn(tape, bind, x, a, &self.ln2, &self.ffn, recurrence)
    }
}

/// Position-wise feature map applied to one tapped layer output.
#[derive(Clone, Debug)]
pub struct FeatureTap {
    /// 1-indexed source layer.
    pub layer: usize,
    /// `d → hidden → hidden → d`, GELU after each hidden layer. `None` means
    /// the raw layer output is used.
    pub mlp: Option<[Linear; 3]>,
    pub group_embedding: Option<ParamId>,
}

impl FeatureTap {
    pub fn forward(&self, tape: &mut Tape, bind: &Binding, x: Var) -> Result<Var> {
        let mut f = x;
        if let Some([fc1, fc2, out]) = &self.mlp {
            let h = bind.linear(tape, x, fc1)?;
            let h = tape.gelu(h)?;
            let h = bind.linear(tape, h, fc2)?;
            let h = tape.gelu(h)?;
            f = bind.linear(tape, h, out)?;
        }
        if let Some(e) = self.group_embedding {
            f = tape.add(f, bind.var(e))?;
        }
        Ok(f)
    }
}

/// Final block whose attention reads from the tapped feature groups.
#[derive(Clone, Debug)]
pub struct ShortcutFinalLayer {
    pub ln_query: LayerNormParams,
    /// Shared by every stacked feature group.
    pub ln_feat: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForward,
    pub taps: Vec<FeatureTap>,
    pub include_query_stream_group: bool,
}

/// Output of the shortcut layer.
pub struct ShortcutOutput {
    pub out: Var,
    /// Cross-attention output before the residual join.
    pub attn_out: Var,
    /// `[B, H, T, G·T]` post-softmax weights.
    pub probs: Var,
}

impl ShortcutFinalLayer {
    /// Runs the taps over `layer_outputs` (indexed by layer number, so
    /// `layer_outputs[l]` is `x^l`) and cross-attends from `x`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        layer_outputs: &[Var],
        recurrence: Recurrence,
        mask_override: Option<&Arc<Mask>>,
    ) -> Result<ShortcutOutput> {
        let mut feats = Vec::with_capacity(self.taps.len() + 1);
        for tap in &self.taps {
            feats.push(tap.forward(tape, bind, layer_outputs[tap.layer])?);
        }
        if self.include_query_stream_group {
            feats.push(x);
        }
        self.forward_features(tape, bind, x, &feats, recurrence, mask_override)
    }

    /// Cross-attends from `x [B,T,d]` over already computed feature groups.
    pub fn forward_features(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        feats: &[Var],
        recurrence: Recurrence,
        mask_override: Option<&Arc<Mask>>,
    ) -> Result<ShortcutOutput> {
        let seq = tape.shape(x)[1];
        let stacked = tape.concat(feats, 1)?;
        let kv = bind.norm(tape, stacked, &self.ln_feat)?;
        let q = bind.norm(tape, x, &self.ln_query)?;
        let mask = match mask_override {
            Some(m) => Arc::clone(m),
            None => Arc::new(super::attention::block_causal_mask(seq, feats.len())),
        };
        let (attn_out, probs) = attend(tape, bind, q, kv, &self.attn, &mask)?;
        let out = residual_ffn(tape, bind, x, attn_out, &self.ln2, &self.ffn, recurrence)?;
        Ok(ShortcutOutput {
            out,
            attn_out,
            probs,
        })
    }
}

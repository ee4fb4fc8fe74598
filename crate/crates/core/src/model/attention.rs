//! Multi-head attention, block-causal masks and captured attention maps.

use std::sync::Arc;

use atsc_tensor::{Mask, Tape, Var};

use super::layers::{Binding, Linear};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

/// Mask over a key/value sequence made of `groups` blocks of length
/// `seq_len`, concatenated group-major. Query `t` may see context position
/// `k` of every group iff `k <= t`.
pub fn block_causal_mask(seq_len: usize, groups: usize) -> Mask {
    Mask::from_fn(seq_len, groups * seq_len, |t, col| col % seq_len <= t)
}

/// Scaled dot-product attention of `query [B,Tq,d]` over `kv [B,Tk,d]`.
/// Returns the projected output `[B,Tq,d]` and post-softmax weights
/// `[B,H,Tq,Tk]`.
pub(crate) fn attend(
    tape: &mut Tape,
    bind: &Binding,
    query: Var,
    kv: Var,
    p: &AttentionParams,
    mask: &Arc<Mask>,
) -> Result<(Var, Var)> {
    let qs = tape.shape(query).to_vec();
    let ks = tape.shape(kv).to_vec();
    let (b, tq, d) = (qs[0], qs[1], qs[2]);
    let tk = ks[1];
    let h = p.heads;
    let dh = d / h;

    let q = bind.linear(tape, query, &p.q)?;
    let q = tape.reshape(q, &[b, tq, h, dh])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = bind.linear(tape, kv, &p.k)?;
    let k = tape.reshape(k, &[b, tk, h, dh])?;
    let k = tape.permute(k, &[0, 2, 3, 1])?;
    let v = bind.linear(tape, kv, &p.v)?;
    let v = tape.reshape(v, &[b, tk, h, dh])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let scores = tape.matmul(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dh as f32).sqrt())?;
    let probs = tape.softmax_masked(scores, mask)?;
    let mixed = tape.matmul(probs, v)?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[b, tq, d])?;
    let out = bind.linear(tape, mixed, &p.o)?;
    Ok((out, probs))
}

/// Final-layer attention weights for one input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub heads: usize,
    pub seq_len: usize,
    pub groups: usize,
    /// `[heads, seq_len, groups * seq_len]`, post-softmax.
    pub weights: Vec<f32>,
    /// `[heads, seq_len, groups]`: weight mass per key group.
    pub group_agg: Vec<f32>,
}

impl AttentionRecord {
    pub fn new(heads: usize, seq_len: usize, groups: usize, weights: Vec<f32>) -> Self {
        assert_eq!(weights.len(), heads * seq_len * groups * seq_len);
        let group_agg = group_sums(&weights, heads, seq_len, groups);
        Self {
            heads,
            seq_len,
            groups,
            weights,
            group_agg,
        }
    }

    pub fn kv_len(&self) -> usize {
        self.groups * self.seq_len
    }

    pub fn row(&self, head: usize, t: usize) -> &[f32] {
        let kv = self.kv_len();
        let start = (head * self.seq_len + t) * kv;
        &self.weights[start..start + kv]
    }

    pub fn weight(&self, head: usize, t: usize, group: usize, k: usize) -> f32 {
        self.row(head, t)[group * self.seq_len + k]
    }

    pub fn agg_row(&self, head: usize, t: usize) -> &[f32] {
        let start = (head * self.seq_len + t) * self.groups;
        &self.group_agg[start..start + self.groups]
    }
}

/// Per-(head, query) sums of each group's weights, accumulated in f64 in
/// increasing key order and rounded once to f32.
pub fn group_sums(weights: &[f32], heads: usize, seq_len: usize, groups: usize) -> Vec<f32> {
    let kv = groups * seq_len;
    let mut out = Vec::with_capacity(heads * seq_len * groups);
    for row in weights.chunks_exact(kv).take(heads * seq_len) {
        for block in row.chunks_exact(seq_len) {
            out.push(block.iter().map(|&w| w as f64).sum::<f64>() as f32);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_position_sees_every_group() {
        let m = block_causal_mask(1, 4);
        assert_eq!(m.cols(), 4);
        assert_eq!(m.count_allowed(), 4);
    }

    #[test]
    fn first_query_sees_one_key_per_group() {
        let m = block_causal_mask(3, 2);
        assert_eq!(m.allowed_in_row(0), 2);
        assert!(m.is_allowed(0, 0) && m.is_allowed(0, 3));
        assert!(!m.is_allowed(0, 1) && !m.is_allowed(0, 4));
    }

    #[test]
    fn full_context_counts() {
        let m = block_causal_mask(512, 4);
        assert_eq!(m.cols(), 2048);
        for t in [0, 1, 100, 511] {
            assert_eq!(m.allowed_in_row(t), 4 * (t + 1));
        }
    }

    #[test]
    fn group_sums_of_uniform_rows() {
        let (h, t, g) = (2, 3, 4);
        let w = vec![1.0 / 12.0; h * t * g * t];
        let rec = AttentionRecord::new(h, t, g, w);
        for &a in &rec.group_agg {
            assert!((a - 0.25).abs() < 1e-7);
        }
    }
}

//! Define-by-run reverse-mode autodiff.
//!
//! A [`Tape`] is an append-only list of nodes. Every operation evaluates its
//! forward value immediately and records the inputs (plus whatever saved
//! values its backward rule needs). Nodes are appended in evaluation order,
//! which is a topological order, so [`Tape::backward`] is a single reverse
//! sweep that visits each node once.
//!
//! Tapes are cheap to build and are meant to be rebuilt for every training
//! step. Parameters are bound into a tape with [`Tape::param`], and
//! [`Tape::backward_into`] accumulates leaf gradients into the owning
//! [`ParamStore`].

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::kernels::{gemm_acc, transpose};
use crate::mask::Mask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_extents, strides, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Gelu,
    LayerNorm,
    SoftmaxMasked,
    CrossEntropy,
    Embedding,
    Permute,
    Reshape,
    Concat,
    Sum,
    Mean,
}

enum Op {
    Leaf,
    /// `pairs == None` means `b` has no batch extent and `a` is treated as a
    /// single `[rows, k]` matrix.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        pairs: Option<Vec<(usize, usize)>>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    SoftmaxMasked {
        x: Var,
        mask: Arc<Mask>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
    },
    Embedding {
        table: Var,
        ids: Vec<u32>,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::SoftmaxMasked { .. } => OpKind::SoftmaxMasked,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Leaf gradients produced by one [`Tape::backward`] call.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    faults: Vec<(OpKind, f32)>,
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

pub fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every gradient flowing out of `kind`'s backward rule by
    /// `factor`. Used as a negative control for gradient checking.
    pub fn inject_fault(&mut self, kind: OpKind, factor: f32) {
        self.faults.push((kind, factor));
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.value(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    // ----- operations -------------------------------------------------------

    /// Batched matrix product `[.., m, k] × [.., k, n] → [.., m, n]` with
    /// broadcasting over the leading (batch) extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape().to_vec();
        let sb = self.node(b)?.value.shape().to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let out_batch = broadcast_shape(batch_a, batch_b).ok_or_else(mismatch)?;
        let mut out_shape = out_batch.clone();
        out_shape.extend([m, n]);

        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        let pairs = if batch_b.iter().product::<usize>() == 1 {
            let rows = av.len() / k;
            gemm_acc(av, bv, &mut out, rows, k, n);
            None
        } else {
            let pairs = batch_pairs(batch_a, batch_b, &out_batch);
            for (i, &(ia, ib)) in pairs.iter().enumerate() {
                gemm_acc(
                    &av[ia * m * k..(ia + 1) * m * k],
                    &bv[ib * k * n..(ib + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            Some(pairs)
        };
        let value = Tensor::new(out_shape, out)?;
        let rg = self.req(&[a, b]);
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            },
            rg,
        ))
    }

    /// `a + b` where `b`'s shape equals `a`'s shape or a trailing suffix of it
    /// (bias-style broadcasting over leading extents).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.nodes[b.0].value.data();
        let mut out = self.nodes[a.0].value.clone();
        for chunk in out.data_mut().chunks_exact_mut(bv.len()) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.value.shape();
        let sb = self.node(b)?.value.shape();
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.nodes[b.0].value.data();
        let mut out = self.nodes[a.0].value.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv) {
            *o *= y;
        }
        let rg = self.req(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let mut out = self.node(x)?.value.clone();
        out.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.req(&[x]);
        Ok(self.push(out, Op::Scale { x, factor }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let mut out = self.node(x)?.value.clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
        let rg = self.req(&[x]);
        Ok(self.push(out, Op::Gelu { x }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis). Row statistics are
    /// accumulated in f64.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let sg = self.node(gain)?.value.shape().to_vec();
        let sbias = self.node(bias)?.value.shape().to_vec();
        let d = *sx.last().ok_or_else(|| TensorError::InvalidShape {
            op: "layer_norm",
            shape: sx.clone(),
            reason: "input must have rank >= 1".into(),
        })?;
        if sg != [d] || sbias != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: sx,
                rhs: if sg != [d] { sg } else { sbias },
            });
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let bv = self.nodes[bias.0].value.data();
        let rows = xv.len() / d;
        let mut out = vec![0.0f32; xv.len()];
        let mut xhat = vec![0.0f32; xv.len()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.req(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis of `[.., q, k]` scores restricted to the
    /// keys `mask` allows. Disallowed entries are exactly zero and never read,
    /// so their score values cannot influence the result. Row maxima and sums
    /// use allowed entries only; sums accumulate in f64.
    pub fn softmax_masked(&mut self, x: Var, mask: &Arc<Mask>) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let (q, k) = (mask.rows(), mask.cols());
        if sx.len() < 2 || sx[sx.len() - 2] != q || sx[sx.len() - 1] != k {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_masked",
                lhs: sx,
                rhs: vec![q, k],
            });
        }
        if let Some(row) = (0..q).find(|&r| mask.allowed_in_row(r) == 0) {
            return Err(TensorError::FullyMaskedRow { row });
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0f32; xv.len()];
        for (r, (src, dst)) in xv.chunks_exact(k).zip(out.chunks_exact_mut(k)).enumerate() {
            let allowed = mask.row(r % q);
            let mut max = f32::NEG_INFINITY;
            for (&v, &a) in src.iter().zip(allowed) {
                if a && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0f64;
            for ((d, &v), &a) in dst.iter_mut().zip(src).zip(allowed) {
                if a {
                    let e = (v - max).exp();
                    *d = e;
                    sum += e as f64;
                }
            }
            for (d, &a) in dst.iter_mut().zip(allowed) {
                if a {
                    *d = (*d as f64 / sum) as f32;
                }
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.req(&[x]);
        Ok(self.push(
            value,
            Op::SoftmaxMasked {
                x,
                mask: Arc::clone(mask),
            },
            rg,
        ))
    }

    /// Mean natural-log negative log-likelihood of `targets` under the
    /// softmax of `logits` (`[.., V]`, one target per row).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let sl = self.node(logits)?.value.shape().to_vec();
        let v = *sl.last().unwrap_or(&0);
        if v == 0 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape: sl,
                reason: "logits must have rank >= 1".into(),
            });
        }
        let lv = self.nodes[logits.0].value.data();
        let rows = lv.len() / v;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: sl,
                rhs: vec![targets.len()],
            });
        }
        if let Some((position, &t)) = targets.iter().enumerate().find(|(_, &t)| t as usize >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                position,
                index: t as usize,
                bound: v,
            });
        }
        let mut total = 0.0f64;
        for (row, &t) in lv.chunks_exact(v).zip(targets) {
            total += log_sum_exp(row) - row[t as usize] as f64;
        }
        let value = Tensor::scalar((total / rows as f64) as f32);
        let rg = self.req(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Gathers rows of a `[V, d]` table; output shape is `ids_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let st = self.node(table)?.value.shape().to_vec();
        if st.len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "embedding",
                shape: st,
                reason: "table must be [V, d]".into(),
            });
        }
        check_extents("embedding", ids_shape)?;
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::ShapeMismatch {
                op: "embedding",
                lhs: ids_shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &i)| i as usize >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "embedding",
                position,
                index: id as usize,
                bound: vocab,
            });
        }
        let tv = self.nodes[table.0].value.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, out)?;
        let rg = self.req(&[table]);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.node(x)?.value.shape().to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = axes.len() == sx.len()
            && axes
                .iter()
                .all(|&a| a < sx.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape: sx,
                reason: format!("{axes:?} is not a permutation of the axes"),
            });
        }
        let (data, shape) = permute_data(self.nodes[x.0].value.data(), &sx, axes);
        let value = Tensor::new(shape, data)?;
        let rg = self.req(&[x]);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.node(x)?.value.rank();
        if r < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose_last",
                shape: self.shape(x).to_vec(),
                reason: "rank must be >= 2".into(),
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshape(shape.to_vec())?;
        let rg = self.req(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let s0 = self.node(*first)?.value.shape().to_vec();
        if axis >= s0.len() {
            return Err(TensorError::InvalidShape {
                op: "concat",
                shape: s0,
                reason: format!("axis {axis} out of range"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.node(v)?.value.shape();
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: s0,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.0].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let rg = self.req(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sum of all elements (f64 accumulation) as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self
            .node(x)?
            .value
            .data()
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
        let rg = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        let s = t.data().iter().map(|&v| v as f64).sum::<f64>() / t.numel() as f64;
        let rg = self.req(&[x]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Mean { x }, rg))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// differentiable leaf reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_node = self.node(loss)?;
        if loss_node.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        let mut leaf_grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if loss_node.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            let mut contribs = self.backward_node(node, &g);
            if let Some(&(_, f)) = self.faults.iter().find(|(k, _)| *k == node.op.kind()) {
                for (_, c) in &mut contribs {
                    c.iter_mut().for_each(|v| *v *= f);
                }
            }
            for (v, c) in contribs {
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Runs [`backward`](Self::backward) and adds the gradient of every bound
    /// parameter into `store`. Repeated calls accumulate.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.grads[idx].as_ref()) {
                store.grad_mut(id).add_assign(g)?;
            }
        }
        Ok(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f32]) -> Vec<(Var, Vec<f32>)> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                match pairs {
                    None => {
                        let rows = av.len() / k;
                        if self.wants(*a) {
                            let bt = transpose(bv, k, n);
                            let mut da = vec![0.0; av.len()];
                            gemm_acc(g, &bt, &mut da, rows, n, k);
                            out.push((*a, da));
                        }
                        if self.wants(*b) {
                            let at = transpose(av, rows, k);
                            let mut db = vec![0.0; bv.len()];
                            gemm_acc(&at, g, &mut db, k, rows, n);
                            out.push((*b, db));
                        }
                    }
                    Some(pairs) => {
                        if self.wants(*a) {
                            let mut da = vec![0.0; av.len()];
                            for (i, &(ia, ib)) in pairs.iter().enumerate() {
                                let bt = transpose(&bv[ib * k * n..(ib + 1) * k * n], k, n);
                                gemm_acc(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &bt,
                                    &mut da[ia * m * k..(ia + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                );
                            }
                            out.push((*a, da));
                        }
                        if self.wants(*b) {
                            let mut db = vec![0.0; bv.len()];
                            for (i, &(ia, ib)) in pairs.iter().enumerate() {
                                let at = transpose(&av[ia * m * k..(ia + 1) * m * k], m, k);
                                gemm_acc(
                                    &at,
                                    &g[i * m * n..(i + 1) * m * n],
                                    &mut db[ib * k * n..(ib + 1) * k * n],
                                    k,
                                    m,
                                    n,
                                );
                            }
                            out.push((*b, db));
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let nb = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0f64; nb];
                    for chunk in g.chunks_exact(nb) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v as f64;
                        }
                    }
                    out.push((*b, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale { x, factor } => {
                if self.wants(*x) {
                    out.push((*x, g.iter().map(|v| v * factor).collect()));
                }
            }
            Op::Gelu { x } => {
                if self.wants(*x) {
                    let xv = self.nodes[x.0].value.data();
                    out.push((
                        *x,
                        g.iter()
                            .zip(xv)
                            .map(|(g, &x)| g * gelu_grad_scalar(x))
                            .collect(),
                    ));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.nodes[gain.0].value.data();
                let d = gv.len();
                if self.wants(*x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_g = 0.0f64;
                        let mut mean_gh = 0.0f64;
                        for j in 0..d {
                            let gj = (gr[j] * gv[j]) as f64;
                            mean_g += gj;
                            mean_gh += gj * hr[j] as f64;
                        }
                        mean_g /= d as f64;
                        mean_gh /= d as f64;
                        for j in 0..d {
                            let gj = (gr[j] * gv[j]) as f64;
                            dx[r * d + j] =
                                (rs as f64 * (gj - mean_g - hr[j] as f64 * mean_gh)) as f32;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    let mut dg = vec![0.0f64; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += (gr[j] * hr[j]) as f64;
                        }
                    }
                    out.push((*gain, dg.into_iter().map(|v| v as f32).collect()));
                }
                if self.wants(*bias) {
                    let mut db = vec![0.0f64; d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += gr[j] as f64;
                        }
                    }
                    out.push((*bias, db.into_iter().map(|v| v as f32).collect()));
                }
            }
            Op::SoftmaxMasked { x, mask } => {
                if self.wants(*x) {
                    let p = node.value.data();
                    let (q, k) = (mask.rows(), mask.cols());
                    let mut dx = vec![0.0f32; p.len()];
                    for (r, ((pr, gr), dr)) in p
                        .chunks_exact(k)
                        .zip(g.chunks_exact(k))
                        .zip(dx.chunks_exact_mut(k))
                        .enumerate()
                    {
                        let allowed = mask.row(r % q);
                        let dot: f64 = pr
                            .iter()
                            .zip(gr)
                            .zip(allowed)
                            .filter(|(_, &a)| a)
                            .map(|((&p, &g), _)| p as f64 * g as f64)
                            .sum();
                        for j in 0..k {
                            if allowed[j] {
                                dr[j] = (pr[j] as f64 * (gr[j] as f64 - dot)) as f32;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let lt = &self.nodes[logits.0].value;
                    let v = *lt.shape().last().unwrap();
                    let rows = targets.len();
                    let scale = g[0] as f64 / rows as f64;
                    let mut dl = vec![0.0f32; lt.numel()];
                    for ((row, dr), &t) in lt
                        .data()
                        .chunks_exact(v)
                        .zip(dl.chunks_exact_mut(v))
                        .zip(targets)
                    {
                        let lse = log_sum_exp(row);
                        for j in 0..v {
                            let p = (row[j] as f64 - lse).exp();
                            let y = if j == t as usize { 1.0 } else { 0.0 };
                            dr[j] = ((p - y) * scale) as f32;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            Op::Embedding { table, ids } => {
                if self.wants(*table) {
                    let tv = &self.nodes[table.0].value;
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0f32; tv.numel()];
                    for (gr, &id) in g.chunks_exact(d).zip(ids) {
                        let id = id as usize;
                        for (a, b) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                            *a += b;
                        }
                    }
                    out.push((*table, dt));
                }
            }
            Op::Permute { x, axes } => {
                if self.wants(*x) {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let (dx, _) = permute_data(g, node.value.shape(), &inverse);
                    out.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if self.wants(*x) {
                    out.push((*x, g.to_vec()));
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis] * inner;
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * row + offset;
                            dv.extend_from_slice(&g[start..start + len]);
                        }
                        out.push((v, dv));
                    }
                    offset += len;
                }
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    out.push((*x, vec![g[0]; self.nodes[x.0].value.numel()]));
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let n = self.nodes[x.0].value.numel();
                    out.push((*x, vec![g[0] / n as f32; n]));
                }
            }
        }
        out
    }
}

pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + s.ln()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let db = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index into `out_batch`, the flat batch indices of `a` and
/// `b` that broadcast onto it.
fn batch_pairs(a: &[usize], b: &[usize], out_batch: &[usize]) -> Vec<(usize, usize)> {
    let r = out_batch.len();
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut p = vec![1; r - s.len()];
        p.extend_from_slice(s);
        p
    };
    let (pa, pb) = (pad(a), pad(b));
    let (sa, sb) = (strides(&pa), strides(&pb));
    let total: usize = out_batch.iter().product();
    let mut idx = vec![0usize; r];
    let mut pairs = Vec::with_capacity(total);
    for _ in 0..total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..r {
            if pa[d] != 1 {
                ia += idx[d] * sa[d];
            }
            if pb[d] != 1 {
                ib += idx[d] * sb[d];
            }
        }
        pairs.push((ia, ib));
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    pairs
}

fn permute_data(src: &[f32], shape: &[usize], axes: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let r = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    if r == 0 {
        return (src.to_vec(), out_shape);
    }
    let in_strides = strides(shape);
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let last = out_shape[r - 1];
    let last_step = step[r - 1];
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; r];
    let mut base = 0usize;
    let outer = src.len() / last;
    for _ in 0..outer {
        let mut off = base;
        for _ in 0..last {
            out.push(src[off]);
            off += last_step;
        }
        // advance the odometer over all but the innermost axis
        for d in (0..r - 1).rev() {
            idx[d] += 1;
            base += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

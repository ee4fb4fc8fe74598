//! Decoder-only language models: the GPT-style baseline and the shortcut
//! variant whose last block cross-attends over features tapped from
//! intermediate layers.
//!
//! Layer numbering follows the residual stream: `x^0` is the embedded input
//! and `x^l` is the output of block `l` (1-indexed). A shortcut model with
//! `n_layers = L` runs `L - 1` ordinary blocks and replaces block `L` with a
//! [`ShortcutFinalLayer`] whose queries come from `x^{L-1}` and whose keys
//! and values come from the group-major concatenation of the tapped
//! features.

pub mod attention;
pub mod layers;

use std::sync::Arc;

use atsc_tensor::{Mask, ParamStore, Rng, Tape, Tensor, Var};

pub use attention::{block_causal_mask, group_sums, AttentionParams, AttentionRecord};
pub use layers::{
    Binding, DecoderLayer, FeatureTap, FeedForward, LayerNormParams, Linear, ShortcutFinalLayer,
    ShortcutOutput,
};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: atsc_tensor::ParamId,
    pos_emb: atsc_tensor::ParamId,
    layers: Vec<DecoderLayer>,
    shortcut: Option<ShortcutFinalLayer>,
    ln_f: LayerNormParams,
    head: atsc_tensor::ParamId,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f32),
    Zeros,
    Ones,
}

/// Creates parameters (when given an rng) or looks them up by name.
struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut Rng>,
}

impl Builder<'_> {
    fn tensor(
        &mut self,
        name: String,
        shape: Vec<usize>,
        init: Init,
    ) -> Result<atsc_tensor::ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let t = match init {
                    Init::Normal(std) => Tensor::randn(shape, std, rng),
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Ones => Tensor::ones(shape),
                };
                Ok(self.store.add(name, t))
            }
            None => {
                let id = self
                    .store
                    .find(&name)
                    .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
                let got = self.store.value(id).shape();
                if got != shape.as_slice() {
                    return Err(Error::contract(format!(
                        "parameter {name} has shape {got:?}, expected {shape:?}"
                    )));
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, std: f32) -> Result<Linear> {
        Ok(Linear {
            weight: self.tensor(
                format!("{prefix}.weight"),
                vec![d_in, d_out],
                Init::Normal(std),
            )?,
            bias: self.tensor(format!("{prefix}.bias"), vec![d_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gain: self.tensor(format!("{prefix}.gain"), vec![d], Init::Ones)?,
            bias: self.tensor(format!("{prefix}.bias"), vec![d], Init::Zeros)?,
        })
    }

    fn attention(
        &mut self,
        prefix: &str,
        d: usize,
        heads: usize,
        out_std: f32,
    ) -> Result<AttentionParams> {
        Ok(AttentionParams {
            q: self.linear(&format!("{prefix}.q"), d, d, INIT_STD)?,
            k: self.linear(&format!("{prefix}.k"), d, d, INIT_STD)?,
            v: self.linear(&format!("{prefix}.v"), d, d, INIT_STD)?,
            o: self.linear(&format!("{prefix}.o"), d, d, out_std)?,
            heads,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, f: usize, out_std: f32) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{prefix}.up"), d, f, INIT_STD)?,
            down: self.linear(&format!("{prefix}.down"), f, d, out_std)?,
        })
    }

    fn layout(&mut self, c: &ModelConfig) -> Result<Layout> {
        let d = c.d_model;
        let f = c.ffn_dim();
        let resid_std = INIT_STD / ((2 * c.n_layers) as f32).sqrt();
        let tok_emb = self.tensor(
            "tok_emb".into(),
            vec![c.vocab_size, d],
            Init::Normal(INIT_STD),
        )?;
        let pos_emb = self.tensor(
            "pos_emb".into(),
            vec![c.context_len, d],
            Init::Normal(INIT_STD),
        )?;
        let standard = if c.shortcut_enabled {
            c.n_layers - 1
        } else {
            c.n_layers
        };
        let mut layers = Vec::with_capacity(standard);
        for l in 1..=standard {
            let p = format!("layers.{l}");
            layers.push(DecoderLayer {
                ln1: self.norm(&format!("{p}.ln1"), d)?,
                attn: self.attention(&format!("{p}.attn"), d, c.n_heads, resid_std)?,
                ln2: self.norm(&format!("{p}.ln2"), d)?,
                ffn: self.ffn(&format!("{p}.ffn"), d, f, resid_std)?,
            });
        }
        let shortcut = if c.shortcut_enabled {
            let mut taps = Vec::new();
            for l in c.active_taps() {
                let p = format!("taps.{l}");
                let mlp = if c.taps_use_mlp {
                    let h = c.tap_hidden;
                    Some([
                        self.linear(&format!("{p}.fc1"), d, h, INIT_STD)?,
                        self.linear(&format!("{p}.fc2"), h, h, INIT_STD)?,
                        self.linear(&format!("{p}.out"), h, d, INIT_STD)?,
                    ])
                } else {
                    None
                };
                let group_embedding = if c.group_embedding {
                    Some(self.tensor(format!("{p}.group_emb"), vec![d], Init::Normal(INIT_STD))?)
                } else {
                    None
                };
                taps.push(FeatureTap {
                    layer: l,
                    mlp,
                    group_embedding,
                });
            }
            Some(ShortcutFinalLayer {
                ln_query: self.norm("final.ln_query", d)?,
                ln_feat: self.norm("final.ln_feat", d)?,
                attn: self.attention("final.attn", d, c.final_head_count(), resid_std)?,
                ln2: self.norm("final.ln2", d)?,
                ffn: self.ffn("final.ffn", d, f, resid_std)?,
                taps,
                include_query_stream_group: c.include_query_stream_group,
            })
        } else {
            None
        };
        let ln_f = self.norm("ln_f", d)?;
        let head = self.tensor(
            "head.weight".into(),
            vec![d, c.vocab_size],
            Init::Normal(INIT_STD),
        )?;
        Ok(Layout {
            tok_emb,
            pos_emb,
            layers,
            shortcut,
            ln_f,
            head,
        })
    }
}

/// Forward-pass switches.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    /// Return the final cross-attention weights for every batch row.
    pub capture_attention: bool,
    /// Replaces the block-causal mask of the shortcut layer (test hook).
    pub final_mask_override: Option<&'a Arc<Mask>>,
}

pub struct ForwardOutput {
    /// `[B, T, V]`.
    pub logits: Var,
    /// `x^0 ..= x^L` as tape variables.
    pub layer_outputs: Vec<Var>,
    /// Cross-attention output of the shortcut layer, when present.
    pub shortcut_attn: Option<Var>,
    /// One record per batch row when capture was requested.
    pub attention: Vec<AttentionRecord>,
}

impl Model {
    /// Builds a freshly initialized model. Weights are `N(0, 0.02)`, the
    /// output projections of attention and FFN blocks use
    /// `0.02 / sqrt(2 · n_layers)`, biases are zero and norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        let mut params = ParamStore::new();
        let mut rng = Rng::new(seed);
        let layout = Builder {
            store: &mut params,
            rng: Some(&mut rng),
        }
        .layout(&config)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Reassembles a model from a config and a parameter store holding
    /// exactly the tensors that config requires.
    pub fn from_parts(config: ModelConfig, mut params: ParamStore) -> Result<Self> {
        config.validate().map_err(Error::Config)?;
        let layout = Builder {
            store: &mut params,
            rng: None,
        }
        .layout(&config)?;
        let expected = param_count(&config);
        if params.numel() != expected {
            return Err(Error::contract(format!(
                "parameter store holds {} values, config needs {expected}",
                params.numel()
            )));
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn layers(&self) -> &[DecoderLayer] {
        &self.layout.layers
    }

    pub fn shortcut(&self) -> Option<&ShortcutFinalLayer> {
        self.layout.shortcut.as_ref()
    }

    /// Sets every named parameter to zero. Panics on unknown names.
    pub fn zero_params(&mut self, names: &[&str]) {
        for name in names {
            let id = self
                .params
                .find(name)
                .unwrap_or_else(|| panic!("no parameter named {name}"));
            self.params.value_mut(id).fill(0.0);
        }
    }

    pub fn forward(&self, tape: &mut Tape, tokens: &[u32], batch: usize) -> Result<ForwardOutput> {
        self.forward_with(tape, tokens, batch, ForwardOptions::default())
    }

    /// `tokens` holds `batch` rows of equal length `T <= context_len`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        batch: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if batch == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(batch) {
            return Err(Error::contract(format!(
                "{} tokens do not split into {batch} equal rows",
                tokens.len()
            )));
        }
        let seq = tokens.len() / batch;
        if seq > c.context_len {
            return Err(Error::contract(format!(
                "sequence length {seq} exceeds context length {}",
                c.context_len
            )));
        }
        let bind = Binding::new(tape, &self.params, self.config.layer_norm_eps);
        self.forward_bound(tape, &bind, tokens, batch, opts)
    }

    /// [`Model::forward_with`] over an existing binding of this model's
    /// parameters.
    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        tokens: &[u32],
        batch: usize,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let seq = tokens.len() / batch.max(1);
        if batch == 0 || seq == 0 || seq > c.context_len {
            return Err(Error::contract(format!(
                "cannot run {} tokens as {batch} rows with context length {}",
                tokens.len(),
                c.context_len
            )));
        }
        let tok = tape.embedding(bind.var(self.layout.tok_emb), tokens, &[batch, seq])?;
        let positions: Vec<u32> = (0..seq as u32).collect();
        let pos = tape.embedding(bind.var(self.layout.pos_emb), &positions, &[seq])?;
        let mut x = tape.add(tok, pos)?;

        let causal = Arc::new(Mask::causal(seq));
        let mut outputs = Vec::with_capacity(c.n_layers + 1);
        outputs.push(x);
        for layer in &self.layout.layers {
            x = layer.forward(tape, bind, x, &causal, c.recurrence)?;
            outputs.push(x);
        }
        let mut shortcut_attn = None;
        let mut attention = Vec::new();
        if let Some(sc) = &self.layout.shortcut {
            let res = sc.forward(
                tape,
                bind,
                x,
                &outputs,
                c.recurrence,
                opts.final_mask_override,
            )?;
            x = res.out;
            outputs.push(x);
            shortcut_attn = Some(res.attn_out);
            if opts.capture_attention {
                let heads = sc.attn.heads;
                let groups = c.kv_groups();
                let per_row = heads * seq * groups * seq;
                attention = tape
                    .value(res.probs)
                    .data()
                    .chunks_exact(per_row)
                    .map(|w| AttentionRecord::new(heads, seq, groups, w.to_vec()))
                    .collect();
            }
        } else if opts.capture_attention {
            return Err(Error::contract(
                "attention capture requires a shortcut model (baseline has no cross-attention)",
            ));
        }
        let h = bind.norm(tape, x, &self.layout.ln_f)?;
        let logits = tape.matmul(h, bind.var(self.layout.head))?;
        Ok(ForwardOutput {
            logits,
            layer_outputs: outputs,
            shortcut_attn,
            attention,
        })
    }

    /// Logits `[B, T, V]` for a batch, on a private tape.
    pub fn logits(&self, tokens: &[u32], batch: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, tokens, batch)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Mean NLL of `targets` after a forward over `inputs`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        inputs: &[u32],
        targets: &[u32],
        batch: usize,
    ) -> Result<(ForwardOutput, Var)> {
        let out = self.forward(tape, inputs, batch)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok((out, loss))
    }
}

/// Closed-form parameter total for `config`.
///
/// * embeddings: `V·d + T·d`
/// * decoder block: attention `4(d² + d)`, two norms `4d`, FFN `2df + f + d`
/// * shortcut block: a decoder block plus the shared feature norm `2d`
/// * each tap: `dh + h + h² + h + hd + d` with MLP, `0` without; `+ d` with a
///   group embedding
/// * final norm `2d` and untied head `d·V`
pub fn param_count(c: &ModelConfig) -> usize {
    let d = c.d_model;
    let f = c.ffn_dim();
    let v = c.vocab_size;
    let norm = 2 * d;
    let block = 4 * (d * d + d) + 2 * norm + (d * f + f + f * d + d);
    let embed = v * d + c.context_len * d;
    let out = norm + d * v;
    if !c.shortcut_enabled {
        return embed + c.n_layers * block + out;
    }
    let h = c.tap_hidden;
    let tap = if c.taps_use_mlp {
        d * h + h + h * h + h + h * d + d
    } else {
        0
    } + if c.group_embedding { d } else { 0 };
    embed + (c.n_layers - 1) * block + block + norm + c.active_taps().len() * tap + out
}

//! Training loop, evaluation, checkpoints and experiment harnesses.

pub mod ablation;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod speedup;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use atsc_tensor::{Rng, Tape, Tensor};

pub use ablation::{ablation_cells, run_ablation_suite, AblationRow, AblationTable};
pub use adam::{clip_grad_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use config::{lr_at, AblationOverride, TrainConfig};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter, Split, METRICS_HEADER};
pub use speedup::{speedup_protocol, Crossing, SpeedupReport};

use crate::config::{ConfigIssue, ModelConfig};
use crate::corpus::{crops_at, CropSampler, TokenStream};
use crate::error::{Error, Result};
use crate::model::Model;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 4;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalScore {
    pub nll: f64,
    pub acc: f64,
    pub tokens: u64,
}

/// Fraction of rows whose highest logit (first on ties) is the target.
pub fn top1_accuracy(logits: &Tensor, targets: &[u32]) -> f64 {
    let v = *logits.shape().last().expect("logits have a vocab axis");
    let hits = logits
        .data()
        .chunks_exact(v)
        .zip(targets)
        .filter(|(row, &t)| {
            let mut best = 0;
            for (i, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = i;
                }
            }
            best == t as usize
        })
        .count();
    hits as f64 / targets.len() as f64
}

fn check_vocab(model: &ModelConfig, stream: &TokenStream) -> Result<()> {
    if model.vocab_size != stream.vocab_size() {
        return Err(Error::contract(format!(
            "corpus {} has vocabulary {} but model.vocab_size is {}",
            stream.source(),
            stream.vocab_size(),
            model.vocab_size
        )));
    }
    Ok(())
}

/// Mean NLL (nats) and top-1 accuracy over `n_batches` fixed held-out
/// batches drawn with `eval_seed`.
pub fn evaluate(
    model: &Model,
    val: &Arc<TokenStream>,
    batch: usize,
    n_batches: usize,
    eval_seed: u64,
) -> Result<EvalScore> {
    check_vocab(model.config(), val)?;
    let seq = model.config().context_len;
    let mut sampler = CropSampler::new(Arc::clone(val), seq, Rng::new(eval_seed))?;
    let offsets: Vec<usize> = (0..batch * n_batches)
        .map(|_| sampler.next_offset())
        .collect();
    let (mut nll, mut acc) = (0.0f64, 0.0f64);
    for chunk in offsets.chunks(EVAL_CHUNK) {
        let b = crops_at(val, seq, chunk.to_vec());
        let mut tape = Tape::new();
        let (out, loss) = model.loss(&mut tape, &b.inputs, &b.targets, b.batch)?;
        let w = b.batch as f64;
        nll += tape.value(loss).item() as f64 * w;
        acc += top1_accuracy(tape.value(out.logits), &b.targets) * w;
    }
    let rows = offsets.len() as f64;
    Ok(EvalScore {
        nll: nll / rows,
        acc: acc / rows,
        tokens: (offsets.len() * seq) as u64,
    })
}

/// Collects every model and training validation issue, keyed
/// `model.<field>` / `train.<field>`.
pub fn validate_all(model: &ModelConfig, train: &TrainConfig) -> Result<(), Vec<ConfigIssue>> {
    let mut issues: Vec<ConfigIssue> = Vec::new();
    if let Err(e) = train.validate() {
        issues.extend(e.into_iter().map(|i| i.within("train")));
    }
    if let Err(e) = train.apply_ablation(model).validate() {
        issues.extend(e.into_iter().map(|i| i.within("model")));
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

/// Output files of a training run.
pub struct RunFiles {
    pub metrics: MetricsWriter,
    pub checkpoint: PathBuf,
}

impl RunFiles {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            metrics: MetricsWriter::create(&dir.join(METRICS_FILE))?,
            checkpoint: dir.join(CHECKPOINT_FILE),
        })
    }

    /// Reopens a directory for a run resumed after `step`.
    pub fn resume(dir: &Path, step: usize) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            metrics: MetricsWriter::resume(&dir.join(METRICS_FILE), step)?,
            checkpoint: dir.join(CHECKPOINT_FILE),
        })
    }
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    adam: AdamState,
    sampler: CropSampler,
    val: Arc<TokenStream>,
    step: usize,
    elapsed: f64,
}

impl Trainer {
    /// Fresh run. Parameters are seeded from `cfg.seed`; crops come from an
    /// independent stream of the same seed.
    pub fn new(
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        train: Arc<TokenStream>,
        val: Arc<TokenStream>,
    ) -> Result<Self> {
        validate_all(&model_cfg, &cfg).map_err(Error::Config)?;
        let model_cfg = cfg.apply_ablation(&model_cfg);
        check_vocab(&model_cfg, &train)?;
        check_vocab(&model_cfg, &val)?;
        let seq = model_cfg.context_len;
        let model = Model::new(model_cfg, cfg.seed)?;
        let sampler = CropSampler::new(train, seq, Rng::with_stream(cfg.seed, 3))?;
        Ok(Self {
            adam: AdamState::new(model.params()),
            model,
            cfg,
            sampler,
            val,
            step: 0,
            elapsed: 0.0,
        })
    }

    /// Continues a run exactly where `ckpt` left off.
    pub fn resume(
        ckpt: Checkpoint,
        train: Arc<TokenStream>,
        val: Arc<TokenStream>,
    ) -> Result<Self> {
        let model = ckpt.to_model()?;
        check_vocab(model.config(), &train)?;
        check_vocab(model.config(), &val)?;
        let sampler = CropSampler::new(
            train,
            model.config().context_len,
            Rng::from_state(&ckpt.rng),
        )?;
        if ckpt.adam.m.len() != model.params().len() {
            return Err(Error::contract("optimizer state does not match parameters"));
        }
        Ok(Self {
            model,
            cfg: ckpt.train,
            adam: ckpt.adam,
            sampler,
            val,
            step: ckpt.step,
            elapsed: ckpt.elapsed_seconds,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            step: self.step,
            elapsed_seconds: self.elapsed,
            params: self.model.params().clone(),
            adam: self.adam.clone(),
            rng: self.sampler.rng().state(),
        }
    }

    fn seconds(&self) -> f64 {
        if self.cfg.deterministic {
            0.0
        } else {
            self.elapsed
        }
    }

    fn tokens(&self) -> u64 {
        (self.step * self.cfg.batch_size * self.model.config().context_len) as u64
    }

    /// One optimizer update on a freshly sampled batch.
    pub fn train_step(&mut self) -> Result<MetricsRow> {
        let lr = lr_at(self.step, &self.cfg);
        let b = self.sampler.sample_batch(self.cfg.batch_size);
        let mut tape = Tape::new();
        let (out, loss) = self.model.loss(&mut tape, &b.inputs, &b.targets, b.batch)?;
        let nll = tape.value(loss).item();
        if !nll.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                what: "loss",
            });
        }
        let acc = top1_accuracy(tape.value(out.logits), &b.targets);
        let params = self.model.params_mut();
        params.zero_grad();
        tape.backward_into(loss, params)?;
        drop(tape);
        if let Some(max) = self.cfg.grad_clip {
            if !clip_grad_norm(params, max).is_finite() {
                return Err(Error::Divergence {
                    step: self.step + 1,
                    what: "gradient",
                });
            }
        }
        self.adam.step(params, lr)?;
        self.step += 1;
        Ok(MetricsRow {
            step: self.step,
            split: Split::Train,
            nll: nll as f64,
            acc,
            lr,
            seconds: self.seconds(),
            tokens: self.tokens(),
        })
    }

    /// Validation row at the current step.
    pub fn evaluate(&self) -> Result<MetricsRow> {
        let s = evaluate(
            &self.model,
            &self.val,
            self.cfg.batch_size,
            self.cfg.eval_batches,
            self.cfg.eval_seed,
        )?;
        Ok(MetricsRow {
            step: self.step,
            split: Split::Val,
            nll: s.nll,
            acc: s.acc,
            lr: lr_at(self.step.saturating_sub(1), &self.cfg),
            seconds: self.seconds(),
            tokens: self.tokens(),
        })
    }

    /// Trains until `until` steps (capped at `total_steps`) have been taken.
    /// Evaluates every `eval_every` steps and at the last step; writes
    /// checkpoints every `checkpoint_every` steps and when stopping. A
    /// divergence error leaves the last written checkpoint in place.
    pub fn run(
        &mut self,
        until: usize,
        mut files: Option<&mut RunFiles>,
    ) -> Result<Vec<MetricsRow>> {
        let until = until.min(self.cfg.total_steps);
        let mut rows = Vec::new();
        let mut last = Instant::now();
        while self.step < until {
            let mut row = self.train_step()?;
            let now = Instant::now();
            if !self.cfg.deterministic {
                self.elapsed += (now - last).as_secs_f64();
            }
            last = now;
            row.seconds = self.seconds();
            let mut batch = vec![row];
            let every = self.cfg.eval_every;
            if every > 0 && (self.step.is_multiple_of(every) || self.step == self.cfg.total_steps) {
                let eval = self.evaluate()?;
                // evaluation time is not training time
                last = Instant::now();
                batch.push(eval);
            }
            if let Some(f) = files.as_deref_mut() {
                for r in &batch {
                    f.metrics.append(r)?;
                }
                let ce = self.cfg.checkpoint_every;
                if (ce > 0 && self.step.is_multiple_of(ce)) || self.step == until {
                    self.checkpoint().save(&f.checkpoint)?;
                }
            }
            rows.extend(batch);
        }
        Ok(rows)
    }
}

/// Trains a fresh model to completion, writing `metrics.csv` and
/// `model.ckpt` under `out_dir`.
pub fn train_to_dir(
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    train: Arc<TokenStream>,
    val: Arc<TokenStream>,
    out_dir: &Path,
) -> Result<Vec<MetricsRow>> {
    let total = cfg.total_steps;
    let mut trainer = Trainer::new(model_cfg, cfg, train, val)?;
    let mut files = RunFiles::create(out_dir)?;
    trainer.run(total, Some(&mut files))
}

//! `atsc`: train, evaluate, ablate and inspect attention-shortcut models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration. Failures print one line to stderr:
//! `atsc: error[<kind>]: <message>`.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use atsc_core::atlas;
use atsc_core::corpus::{encode_char27, SyntheticGrammar, TokenStream};
use atsc_core::gradsuite;
use atsc_core::trainer::{
    self, read_metrics, run_ablation_suite, speedup::final_val_nll, speedup_protocol, Checkpoint,
    MetricsRow, MetricsWriter, RunFiles, Split, Trainer, METRICS_FILE,
};
use atsc_core::{param_count, ConfigIssue, Error};
use atsc_tensor::OpKind;
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use run_config::{validate_config, RunConfig};

#[derive(Parser)]
#[command(name = "atsc", version, about = "Attention-shortcut language models")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Writes zero timings so logs compare bytewise.
    #[arg(long)]
    deterministic: bool,
    /// Overrides `train.total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Raw text corpus file (character vocabulary).
    #[arg(long, conflicts_with = "tokens")]
    text: Option<PathBuf>,
    /// TOKS token-stream file.
    #[arg(long)]
    tokens: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or resume one with --ckpt.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint to resume from.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Stop after this many total steps (default: train.total_steps).
        #[arg(long)]
        until: Option<usize>,
    },
    /// Score a checkpoint on the held-out split.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train the tap ablations and the width sweep.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Export final-layer attention maps for one input.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        /// Input text (character vocabulary).
        #[arg(long, conflicts_with = "tokens", required_unless_present = "tokens")]
        text: Option<String>,
        /// TOKS file holding the input ids.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(long, default_value = "attn")]
        out: PathBuf,
    },
    /// Validate a run configuration and report parameter counts.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finite-difference checks of every op and model component.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic easy/hard token stream.
    MakeSynthetic {
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.9)]
        p_easy: f64,
        #[arg(long, default_value_t = 200_000)]
        length: usize,
        #[arg(long, default_value_t = 27)]
        vocab: usize,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if matches!(e, Error::Config(_)) { 3 } else { 1 },
            kind: e.kind(),
            message: e.to_string(),
        }
    }
}

fn config_failure(issues: Vec<ConfigIssue>) -> Failure {
    Error::Config(issues).into()
}

type CliResult<T = ()> = Result<T, Failure>;

fn io<T>(path: &Path, r: std::io::Result<T>) -> CliResult<T> {
    r.map_err(|e| Error::io(path, e).into())
}

/// Loaded configuration plus whether the document pinned the vocabulary.
struct Loaded {
    cfg: RunConfig,
    explicit_vocab: bool,
    base_dir: PathBuf,
}

fn load_run_config(args: &RunArgs) -> CliResult<Loaded> {
    let (mut cfg, explicit_vocab, base_dir) = match &args.config {
        Some(path) => {
            let text = io(path, fs::read_to_string(path))?;
            let cfg = validate_config(&text).map_err(config_failure)?;
            let explicit = serde_json::from_str::<Value>(&text)
                .ok()
                .and_then(|v| v.get("model").and_then(|m| m.get("vocab_size")).cloned())
                .is_some();
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
            (cfg, explicit, dir)
        }
        None => (RunConfig::default(), false, PathBuf::new()),
    };
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if args.deterministic {
        cfg.train.deterministic = true;
    }
    if let Some(n) = args.steps {
        cfg.train.total_steps = n;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    // flag paths are relative to the working directory, config paths to the file
    if let Some(t) = &args.text {
        cfg.data.text = Some(absolute(t)?);
        cfg.data.tokens = None;
        cfg.data.synthetic = None;
    }
    if let Some(t) = &args.tokens {
        cfg.data.tokens = Some(absolute(t)?);
        cfg.data.text = None;
        cfg.data.synthetic = None;
    }
    cfg.check().map_err(config_failure)?;
    Ok(Loaded {
        cfg,
        explicit_vocab,
        base_dir,
    })
}

fn absolute(p: &Path) -> CliResult<PathBuf> {
    io(p, std::path::absolute(p))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || base.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads the configured corpus and splits it into train and validation.
fn load_corpus(loaded: &Loaded) -> CliResult<(Arc<TokenStream>, Arc<TokenStream>)> {
    let d = &loaded.cfg.data;
    let stream = if let Some(p) = &d.text {
        TokenStream::read_text(&resolve(&loaded.base_dir, p))?
    } else if let Some(p) = &d.tokens {
        TokenStream::load(&resolve(&loaded.base_dir, p))?
    } else if let Some(s) = &d.synthetic {
        SyntheticGrammar::new(s.vocab_size, s.p_easy, s.seed)?
            .generate(s.length)
            .stream
    } else {
        return Err(config_failure(vec![ConfigIssue::new(
            "data",
            "no corpus: set data.text, data.tokens or data.synthetic, or pass --text/--tokens",
        )]));
    };
    let t = &loaded.cfg.train;
    let (train, val) = stream.split(t.train_tokens, t.val_tokens);
    Ok((Arc::new(train), Arc::new(val)))
}

fn prepare_out(dir: &Path) -> CliResult {
    io(dir, fs::create_dir_all(dir))
}

fn print_row(r: &MetricsRow) {
    println!(
        "step {} {} nll {:.4} acc {:.4} ({} tokens)",
        r.step, r.split, r.nll, r.acc, r.tokens
    );
}

fn cmd_train(run: RunArgs, ckpt: Option<PathBuf>, until: Option<usize>) -> CliResult {
    let mut loaded = load_run_config(&run)?;
    let (train, val) = load_corpus(&loaded)?;
    let out = loaded.cfg.out_dir.clone();
    prepare_out(&out)?;
    let (mut trainer, mut files) = match ckpt {
        Some(path) => {
            let c = Checkpoint::load(&path)?;
            let files = RunFiles::resume(&out, c.step)?;
            (Trainer::resume(c, train, val)?, files)
        }
        None => {
            if !loaded.explicit_vocab {
                loaded.cfg.model.vocab_size = train.vocab_size();
            }
            let json = serde_json::to_string_pretty(&loaded.cfg).map_err(Error::from)?;
            let cfg_path = out.join("config.json");
            io(&cfg_path, fs::write(&cfg_path, json))?;
            let t = Trainer::new(
                loaded.cfg.model.clone(),
                loaded.cfg.train.clone(),
                train,
                val,
            )?;
            (t, RunFiles::create(&out)?)
        }
    };
    let stop = until.unwrap_or(trainer.config().total_steps);
    let rows = trainer.run(stop, Some(&mut files))?;
    if let Some(r) = rows.iter().rev().find(|r| r.split == Split::Val) {
        print_row(r);
    }
    if let Some(r) = rows.iter().rev().find(|r| r.split == Split::Train) {
        print_row(r);
    }
    println!("checkpoint {}", files.checkpoint.display());
    Ok(())
}

fn cmd_eval(run: RunArgs, ckpt: PathBuf) -> CliResult {
    let mut loaded = load_run_config(&run)?;
    let c = Checkpoint::load(&ckpt)?;
    loaded.cfg.train = c.train.clone();
    let (_, val) = load_corpus(&loaded)?;
    let model = c.to_model()?;
    let t = &c.train;
    let s = trainer::evaluate(
        &model,
        &val,
        t.batch_size,
        t.eval_batches.max(1),
        t.eval_seed,
    )?;
    let row = MetricsRow {
        step: c.step,
        split: Split::Val,
        nll: s.nll,
        acc: s.acc,
        lr: trainer::lr_at(c.step.saturating_sub(1), t),
        seconds: 0.0,
        tokens: s.tokens,
    };
    let out = loaded.cfg.out_dir;
    prepare_out(&out)?;
    let path = out.join("eval.csv");
    let mut w = MetricsWriter::create(&path)?;
    w.append(&row)?;
    print_row(&row);
    Ok(())
}

fn cmd_ablate(run: RunArgs) -> CliResult {
    let mut loaded = load_run_config(&run)?;
    let (train, val) = load_corpus(&loaded)?;
    if !loaded.explicit_vocab {
        loaded.cfg.model.vocab_size = train.vocab_size();
    }
    let out = loaded.cfg.out_dir.clone();
    prepare_out(&out)?;
    let table = run_ablation_suite(
        &loaded.cfg.model,
        &loaded.cfg.train,
        train,
        val,
        [32, 128],
        Some(&out),
    );
    for (name, body) in [
        ("ablation.csv", table.to_csv()),
        ("ablation.txt", table.to_text()),
    ] {
        let p = out.join(name);
        io(&p, fs::write(&p, body))?;
    }
    print!("{}", table.to_text());

    // time-to-target of the full shortcut model against the baseline
    let base_log = out.join("ablation_baseline").join(METRICS_FILE);
    let short_log = out
        .join("ablation_all_layers_with_MLP_features")
        .join(METRICS_FILE);
    if let (Ok(b), Ok(s)) = (read_metrics(&base_log), read_metrics(&short_log)) {
        if let Some(target) = final_val_nll(&b) {
            let report = speedup_protocol(&b, &s, target);
            let p = out.join("speedup.txt");
            io(&p, fs::write(&p, format!("{report}\n")))?;
            println!("{report}");
        }
    }
    Ok(())
}

fn cmd_attn(
    ckpt: PathBuf,
    text: Option<String>,
    tokens: Option<PathBuf>,
    out: PathBuf,
) -> CliResult {
    let c = Checkpoint::load(&ckpt)?;
    let model = c.to_model()?;
    let ids = match (text, tokens) {
        (Some(t), _) => {
            if model.config().vocab_size != 27 {
                return Err(Error::contract(format!(
                    "--text needs a character model (vocab 27), checkpoint has {}",
                    model.config().vocab_size
                ))
                .into());
            }
            encode_char27(t.as_bytes())
        }
        (None, Some(p)) => TokenStream::load(&p)?.ids().to_vec(),
        (None, None) => unreachable!("clap requires one input"),
    };
    let dump = atlas::capture(&model, &ids)?;
    let files = atlas::export(&dump, &out)?;
    println!(
        "wrote {} files for {} heads x {} groups to {}",
        files.len(),
        dump.record.heads,
        dump.record.groups,
        out.display()
    );
    Ok(())
}

fn cmd_check(config: PathBuf) -> CliResult {
    let loaded = load_run_config(&RunArgs {
        config: Some(config.clone()),
        ..RunArgs::default()
    })?;
    let m = loaded.cfg.train.apply_ablation(&loaded.cfg.model);
    println!("{}: ok", config.display());
    println!(
        "layers {} d_model {} heads {} final_heads {} context {} vocab {}",
        m.n_layers,
        m.d_model,
        m.n_heads,
        m.final_head_count(),
        m.context_len,
        m.vocab_size
    );
    println!(
        "params {} (baseline {})",
        param_count(&m),
        param_count(&m.baseline())
    );
    Ok(())
}

fn cmd_gradcheck(seed: u64, out: Option<PathBuf>) -> CliResult {
    let mut lines = Vec::new();
    let mut all = true;
    for e in gradsuite::run(seed)? {
        let r = &e.report;
        all &= r.passed;
        lines.push(format!(
            "{} {:<22} max_err {:.3e} tol {:.0e} coords {}",
            if r.passed { "PASS" } else { "FAIL" },
            e.name,
            r.max_rel_err,
            r.tol,
            r.checks.len()
        ));
    }
    for kind in [OpKind::MatMul, OpKind::LayerNorm, OpKind::SoftmaxMasked] {
        let caught = gradsuite::detects_fault(seed, kind)?;
        all &= caught;
        lines.push(format!(
            "{} planted {kind:?} fault {}",
            if caught { "PASS" } else { "FAIL" },
            if caught { "detected" } else { "missed" }
        ));
    }
    for l in &lines {
        println!("{l}");
    }
    if let Some(dir) = out {
        prepare_out(&dir)?;
        let p = dir.join("gradcheck.txt");
        io(&p, fs::write(&p, lines.join("\n") + "\n"))?;
    }
    if all {
        Ok(())
    } else {
        Err(Failure {
            code: 1,
            kind: "gradcheck",
            message: "one or more gradient checks failed".into(),
        })
    }
}

fn cmd_make_synthetic(
    out: PathBuf,
    seed: u64,
    p_easy: f64,
    length: usize,
    vocab: usize,
) -> CliResult {
    let g = SyntheticGrammar::new(vocab, p_easy, seed)?;
    let c = g.generate(length);
    prepare_out(&out)?;
    let toks = out.join("synthetic.toks");
    c.stream.save(&toks)?;
    let mask = out.join("easy.mask");
    let bytes: Vec<u8> = c.easy.iter().map(|&e| e as u8).collect();
    io(&mask, fs::write(&mask, bytes))?;
    let easy = c.easy.iter().filter(|&&e| e).count();
    println!(
        "wrote {} tokens ({} easy) to {}",
        c.stream.len(),
        easy,
        toks.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train { run, ckpt, until } => cmd_train(run, ckpt, until),
        Command::Eval { run, ckpt } => cmd_eval(run, ckpt),
        Command::Ablate { run } => cmd_ablate(run),
        Command::Attn {
            ckpt,
            text,
            tokens,
            out,
        } => cmd_attn(ckpt, text, tokens, out),
        Command::Check { config } => cmd_check(config),
        Command::Gradcheck { seed, out } => cmd_gradcheck(seed, out),
        Command::MakeSynthetic {
            out,
            seed,
            p_easy,
            length,
            vocab,
        } => cmd_make_synthetic(out, seed, p_easy, length, vocab),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("atsc: error[{}]: {}", f.kind, f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}

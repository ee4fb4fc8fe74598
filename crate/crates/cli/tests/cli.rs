use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn atsc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atsc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "model": {"n_layers": 3, "d_model": 16, "n_heads": 2, "context_len": 16,
            "tap_layers": [1, 2], "tap_hidden": 16},
  "train": {"batch_size": 2, "total_steps": 10, "lr0": 0.003, "eval_every": 0,
            "eval_batches": 1, "train_tokens": 4000, "val_tokens": 1000},
  "data": {"synthetic": {"length": 5000, "seed": 3}}
}"#;

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_then_export_attention() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let out = dir.path().join("run");
    let o = atsc(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--deterministic",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 11, "{metrics}");
    assert!(metrics.lines().skip(1).all(|l| l.contains(",train,")));
    let ckpt = out.join("model.ckpt");
    assert!(ckpt.exists());
    assert!(out.join("config.json").exists());

    let attn = dir.path().join("attn");
    let o = atsc(&[
        "attn",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--text",
        "the quick brown",
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let group_maps = fs::read_dir(&attn)
        .unwrap()
        .filter(|e| {
            let n = e.as_ref().unwrap().file_name().into_string().unwrap();
            n.contains("_group") && n.ends_with(".pgm")
        })
        .count();
    // 2 taps x 4 cross-attention heads
    assert_eq!(group_maps, 8);

    let o = atsc(&[
        "eval",
        "--config",
        &cfg,
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        attn.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(attn.join("eval.csv").exists());
}

#[test]
fn resume_matches_unbroken_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let whole = dir.path().join("whole");
    let split = dir.path().join("split");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec![
            "train",
            "--config",
            &cfg,
            "--out",
            out.to_str().unwrap(),
            "--deterministic",
        ];
        args.extend_from_slice(extra);
        let o = atsc(&args);
        assert!(o.status.success(), "{}", stderr(&o));
    };
    run(&whole, &[]);
    run(&split, &["--until", "4"]);
    let ckpt = split.join("model.ckpt");
    run(&split, &["--ckpt", ckpt.to_str().unwrap()]);
    assert_eq!(
        fs::read(whole.join("metrics.csv")).unwrap(),
        fs::read(split.join("metrics.csv")).unwrap()
    );
}

#[test]
fn invalid_config_exits_3_naming_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"model": {"d_model": 130, "n_heads": 8, "widht": 3}}"#,
    );
    let o = atsc(&["train", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    let e = stderr(&o);
    assert!(e.starts_with("atsc: error[config]"), "{e}");
    assert!(e.contains("model.widht"), "{e}");
    assert_eq!(e.lines().count(), 1);

    let cfg = write_config(dir.path(), r#"{"model": {"d_model": 130, "n_heads": 8}}"#);
    let e = stderr(&atsc(&["train", "--config", &cfg]));
    assert!(e.contains("model.d_model"), "{e}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(atsc(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(atsc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(atsc(&["attn", "--ckpt", "x"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = atsc(&[
        "attn",
        "--ckpt",
        dir.path().join("nope").to_str().unwrap(),
        "--text",
        "ab",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("atsc: error[io]"), "{}", stderr(&o));
}

#[test]
fn shipped_presets_validate() {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    for name in ["paper.json", "desk.json"] {
        let path = presets.join(name);
        let o = atsc(&["check", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let out = String::from_utf8(o.stdout).unwrap();
        assert!(out.contains("layers 10 "), "{out}");
        assert!(out.contains("final_heads 16 "), "{out}");
    }
    let o = atsc(&[
        "check",
        "--config",
        presets.join("paper.json").to_str().unwrap(),
    ]);
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("params 7307264 (baseline 2055424)"), "{out}");
}

#[test]
fn synthetic_corpus_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let o = atsc(&[
        "make-synthetic",
        "--out",
        dir.path().to_str().unwrap(),
        "--length",
        "600",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let toks = dir.path().join("synthetic.toks");
    let s = atsc_core::corpus::TokenStream::load(&toks).unwrap();
    assert_eq!((s.len(), s.vocab_size()), (600, 27));
    assert_eq!(fs::read(dir.path().join("easy.mask")).unwrap().len(), 600);
}

#[test]
fn gradcheck_passes() {
    let o = atsc(&["gradcheck", "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    assert!(out.contains("full_model"));
}

#[test]
fn flag_paths_are_relative_to_working_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_dir = dir.path().join("configs");
    fs::create_dir(&cfg_dir).unwrap();
    let body = TINY.replace(
        r#""data": {"synthetic": {"length": 5000, "seed": 3}}"#,
        r#""data": {}"#,
    );
    let cfg = write_config(&cfg_dir, &body);
    let o = atsc(&[
        "make-synthetic",
        "--out",
        dir.path().to_str().unwrap(),
        "--length",
        "5000",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_atsc"))
        .current_dir(dir.path())
        .args([
            "train",
            "--config",
            &cfg,
            "--tokens",
            "synthetic.toks",
            "--out",
            "run",
            "--steps",
            "3",
        ])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/model.ckpt").exists());
}

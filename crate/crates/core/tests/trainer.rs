use std::sync::Arc;

use atsc_core::corpus::{SyntheticGrammar, TokenStream};
use atsc_core::trainer::{
    ablation_cells, evaluate, lr_at, read_metrics, run_ablation_suite, speedup_protocol, AdamState,
    Checkpoint, MetricsRow, RunFiles, Split, TrainConfig, Trainer, METRICS_FILE,
};
use atsc_core::{Error, ModelConfig};
use atsc_tensor::{ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn tiny_model(v: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        context_len: 16,
        vocab_size: v,
        tap_layers: vec![1, 2],
        tap_hidden: 32,
        ..ModelConfig::default()
    }
}

fn tiny_train(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        total_steps: steps,
        lr0: 3e-3,
        seed: 11,
        eval_every: 3,
        eval_batches: 2,
        deterministic: true,
        ..TrainConfig::default()
    }
}

fn random_stream(n: usize, v: usize, seed: u64) -> Arc<TokenStream> {
    let mut rng = Rng::new(seed);
    Arc::new(TokenStream::new((0..n).map(|_| rng.below(v) as u32).collect(), v, "rand").unwrap())
}

#[test]
fn schedule_halves_at_midpoint() {
    let cfg = TrainConfig {
        total_steps: 1000,
        ..TrainConfig::default()
    };
    assert_eq!(lr_at(0, &cfg), 2e-4);
    assert_eq!(lr_at(499, &cfg), 2e-4);
    assert_eq!(lr_at(500, &cfg), 1e-4);
    assert_eq!(lr_at(999, &cfg), 1e-4);
}

proptest! {
    #[test]
    fn schedule_is_non_increasing(total in 2usize..10_000, a in 0usize..10_000, b in 0usize..10_000) {
        let cfg = TrainConfig { total_steps: total, ..TrainConfig::default() };
        let (lo, hi) = (a.min(b) % total, a.max(b) % total);
        let (lo, hi) = (lo.min(hi), lo.max(hi));
        prop_assert!(lr_at(lo, &cfg) >= lr_at(hi, &cfg));
    }
}

fn one_param(values: &[f32]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new([values.len()], values.to_vec()).unwrap());
    s
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut store = one_param(&[1.0, 1.0]);
    let id = store.find("w").unwrap();
    let mut adam = AdamState::new(&store);
    for _ in 0..500 {
        let w = store.value(id).clone();
        for (g, x) in store.grad_mut(id).data_mut().iter_mut().zip(w.data()) {
            *g = 2.0 * x;
        }
        adam.step(&mut store, 0.1).unwrap();
    }
    let norm = store
        .value(id)
        .data()
        .iter()
        .map(|x| x * x)
        .sum::<f32>()
        .sqrt();
    assert!(norm < 1e-3, "{norm}");
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = one_param(&[0.5, -2.0, 3.0]);
    let mut adam = AdamState::new(&store);
    for _ in 0..10 {
        adam.step(&mut store, 1e-2).unwrap();
    }
    assert_eq!(
        store.value(store.find("w").unwrap()).data(),
        &[0.5, -2.0, 3.0]
    );
}

#[test]
fn adam_first_step_moves_lr_per_coordinate() {
    let mut store = one_param(&[0.0, 0.0]);
    let id = store.find("w").unwrap();
    store.grad_mut(id).data_mut().copy_from_slice(&[1.0, -1.0]);
    let mut adam = AdamState::new(&store);
    adam.step(&mut store, 1e-3).unwrap();
    let w = store.value(id).data();
    assert!(
        (w[0] + 1e-3).abs() < 1e-8 && (w[1] - 1e-3).abs() < 1e-8,
        "{w:?}"
    );
    assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
}

#[test]
fn adam_rejects_non_finite_gradients() {
    let mut store = one_param(&[1.0, 2.0]);
    let id = store.find("w").unwrap();
    store.grad_mut(id).data_mut()[1] = f32::NAN;
    let mut adam = AdamState::new(&store);
    let err = adam.step(&mut store, 0.1).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1, .. }), "{err}");
    assert_eq!(store.value(id).data(), &[1.0, 2.0]);
    assert_eq!(adam.t, 0);
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let data = random_stream(2000, 7, 1);
    let mut t = Trainer::new(tiny_model(7), tiny_train(10), data.clone(), data).unwrap();
    t.run(4, None).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    t.checkpoint().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(loaded.step, 4);
    let mut corrupt = bytes.clone();
    corrupt.pop();
    assert!(matches!(
        Checkpoint::from_bytes(&corrupt, &path),
        Err(Error::Format { .. })
    ));
}

#[test]
fn resumed_run_reproduces_metrics_bytes() {
    let data = random_stream(3000, 9, 2);
    let (model, train) = (tiny_model(9), tiny_train(8));
    let dir = tempfile::tempdir().unwrap();

    let whole = dir.path().join("whole");
    let mut files = RunFiles::create(&whole).unwrap();
    let mut t = Trainer::new(model.clone(), train.clone(), data.clone(), data.clone()).unwrap();
    t.run(8, Some(&mut files)).unwrap();

    let split = dir.path().join("split");
    let mut files = RunFiles::create(&split).unwrap();
    let mut t = Trainer::new(model, train, data.clone(), data.clone()).unwrap();
    t.run(5, Some(&mut files)).unwrap();
    drop((t, files));
    let ckpt = Checkpoint::load(&split.join("model.ckpt")).unwrap();
    assert_eq!(ckpt.step, 5);
    let mut files = RunFiles::resume(&split, ckpt.step).unwrap();
    let mut t = Trainer::resume(ckpt, data.clone(), data).unwrap();
    t.run(8, Some(&mut files)).unwrap();
    drop(files);

    let a = std::fs::read(whole.join(METRICS_FILE)).unwrap();
    let b = std::fs::read(split.join(METRICS_FILE)).unwrap();
    assert_eq!(String::from_utf8(a).unwrap(), String::from_utf8(b).unwrap());
    assert_eq!(
        std::fs::read(whole.join("model.ckpt")).unwrap(),
        std::fs::read(split.join("model.ckpt")).unwrap()
    );
}

#[test]
fn same_seed_same_log() {
    let data = random_stream(2000, 5, 3);
    let run = || {
        let mut t = Trainer::new(tiny_model(5), tiny_train(6), data.clone(), data.clone()).unwrap();
        t.run(6, None).unwrap()
    };
    let a: Vec<String> = run().iter().map(MetricsRow::to_csv).collect();
    let b: Vec<String> = run().iter().map(MetricsRow::to_csv).collect();
    assert_eq!(a, b);
    // 6 train rows, val rows at steps 3 and 6
    assert_eq!(a.len(), 8);
}

#[test]
fn untrained_evaluation_is_chance_level_and_repeatable() {
    let v = 27;
    let data = random_stream(20_000, v, 4);
    let model = atsc_core::Model::new(
        ModelConfig {
            context_len: 64,
            ..ModelConfig::paper(v)
        },
        5,
    )
    .unwrap();
    let a = evaluate(&model, &data, 8, 2, 77).unwrap();
    let b = evaluate(&model, &data, 8, 2, 77).unwrap();
    assert_eq!(a, b);
    let ln_v = (v as f64).ln();
    assert!((a.nll - ln_v).abs() / ln_v < 0.05, "{}", a.nll);
    assert!((a.acc - 1.0 / v as f64).abs() < 0.03, "{}", a.acc);
}

#[test]
fn vocabulary_mismatch_is_contract_error() {
    let data = random_stream(500, 5, 6);
    let model = atsc_core::Model::new(tiny_model(7), 0).unwrap();
    assert!(matches!(
        evaluate(&model, &data, 2, 1, 0),
        Err(Error::Contract(_))
    ));
    let r = Trainer::new(tiny_model(7), tiny_train(4), data.clone(), data);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn invalid_configs_report_every_issue() {
    let data = random_stream(500, 7, 7);
    let bad_model = ModelConfig {
        d_model: 17,
        ..tiny_model(7)
    };
    let bad_train = TrainConfig {
        total_steps: 1,
        lr0: 0.0,
        ..tiny_train(4)
    };
    match Trainer::new(bad_model, bad_train, data.clone(), data) {
        Err(Error::Config(issues)) => {
            let keys: Vec<&str> = issues.iter().map(|i| i.key.as_str()).collect();
            assert!(keys.contains(&"train.total_steps"), "{keys:?}");
            assert!(keys.contains(&"train.lr0"), "{keys:?}");
            assert!(keys.contains(&"model.d_model"), "{keys:?}");
        }
        other => panic!("{:?}", other.err()),
    }
}

#[test]
fn deterministic_grammar_is_learned() {
    let g = SyntheticGrammar::new(11, 1.0, 8).unwrap();
    let stream = g.generate(20_000).stream;
    let (train, val) = stream.split(18_000, 2_000);
    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 32,
        n_heads: 4,
        context_len: 32,
        vocab_size: 11,
        tap_layers: vec![1],
        tap_hidden: 32,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        batch_size: 8,
        total_steps: 400,
        lr0: 1e-2,
        eval_every: 0,
        ..tiny_train(400)
    };
    let val = Arc::new(val);
    let mut t = Trainer::new(cfg, train_cfg, Arc::new(train), val.clone()).unwrap();
    t.run(400, None).unwrap();
    let s = evaluate(t.model(), &val, 8, 4, 1).unwrap();
    assert!(s.nll < 0.05, "val nll {}", s.nll);
}

fn val_row(step: usize, nll: f64, seconds: f64) -> MetricsRow {
    MetricsRow {
        step,
        split: Split::Val,
        nll,
        acc: 0.0,
        lr: 2e-4,
        seconds,
        tokens: 0,
    }
}

#[test]
fn speedup_formula() {
    let base: Vec<_> = (1..=20)
        .map(|i| val_row(i * 100, 3.0 - 0.1 * i as f64, i as f64))
        .collect();
    let same = speedup_protocol(&base, &base, 2.05);
    assert_eq!(same.step_speedup_pct, Some(0.0));
    assert_eq!(same.time_speedup_pct, Some(0.0));

    let b = vec![val_row(1300, 1.9, 130.0)];
    let s = vec![val_row(680, 1.9, 70.0)];
    let r = speedup_protocol(&b, &s, 2.0);
    assert!((r.step_speedup_pct.unwrap() - 47.6923).abs() < 1e-3);

    let r = speedup_protocol(&[val_row(100, 2.5, 1.0)], &s, 2.0);
    assert!(r.baseline.is_none());
    assert!(r.step_speedup_pct.is_none());
    assert!(r.to_string().contains("baseline: not reached"));
}

#[test]
fn ablation_table_has_eight_rows() {
    let data = random_stream(3000, 7, 9);
    let base = ModelConfig {
        n_layers: 4,
        tap_layers: vec![1, 2, 3],
        ..tiny_model(7)
    };
    let dir = tempfile::tempdir().unwrap();
    let table = run_ablation_suite(
        &base,
        &tiny_train(3),
        data.clone(),
        data,
        [8, 16],
        Some(dir.path()),
    );
    assert_eq!(table.rows.len(), 8);
    assert_eq!(
        table.rows.iter().filter(|r| r.group == "ablation").count(),
        4
    );
    assert!(
        table
            .rows
            .iter()
            .all(|r| r.error.is_none() && r.val_nll.is_some()),
        "{table:?}"
    );
    let csv = table.to_csv();
    assert_eq!(csv.lines().count(), 9);
    assert!(csv.lines().all(|l| l.split(',').count() == 7));
    assert_eq!(table.to_text().lines().count(), 10);
    // each cell logged the same evaluation schedule
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let rows = read_metrics(&entry.unwrap().path().join(METRICS_FILE)).unwrap();
        assert_eq!(rows.iter().filter(|r| r.split == Split::Val).count(), 1);
    }
    let cells = ablation_cells(&base, [8, 16]);
    let no_mlp = &cells[3].2;
    assert!(no_mlp.shortcut_enabled && !no_mlp.taps_use_mlp);
    let no_mlp_model = atsc_core::Model::new(no_mlp.clone(), 0).unwrap();
    assert!(no_mlp_model
        .params()
        .iter()
        .all(|(_, p)| !p.name().starts_with("taps.")));
}

#[test]
fn failing_cell_does_not_stop_the_suite() {
    let data = random_stream(3000, 7, 10);
    let base = ModelConfig {
        n_layers: 4,
        tap_layers: vec![1, 2, 3],
        ..tiny_model(7)
    };
    // d=10 is not divisible by the 4 cross-attention heads
    let table = run_ablation_suite(&base, &tiny_train(2), data.clone(), data, [10, 16], None);
    assert_eq!(table.rows.len(), 8);
    assert!(table.rows[5].error.is_some());
    assert!(table.rows[7].error.is_none());
}

use atsc_core::atlas::{aggregate_by_group, capture, export, parse_csv, render_pgm, AtlasDump};
use atsc_core::model::AttentionRecord;
use atsc_core::{Error, Model, ModelConfig};
use atsc_tensor::Rng;

fn model(seed: u64) -> Model {
    Model::new(
        ModelConfig {
            n_layers: 5,
            d_model: 32,
            n_heads: 2,
            context_len: 32,
            vocab_size: 27,
            tap_layers: vec![1, 2, 3, 4],
            tap_hidden: 32,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

fn tokens(n: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(27) as u32).collect()
}

fn synthetic(heads: usize, t: usize, g: usize, weights: Vec<f32>) -> AtlasDump {
    AtlasDump {
        fingerprint: String::new(),
        tokens: vec![0; t],
        group_layers: (1..=g).collect(),
        record: AttentionRecord::new(heads, t, g, weights),
    }
}

#[test]
fn captured_weights_respect_the_mask() {
    let d = capture(&model(1), &tokens(20, 2)).unwrap();
    let r = &d.record;
    assert_eq!((r.heads, r.seq_len, r.groups), (4, 20, 4));
    for h in 0..r.heads {
        let first = r.row(h, 0);
        assert!(first.iter().filter(|&&w| w != 0.0).count() <= 4);
        for t in 0..20 {
            for g in 0..4 {
                for k in t + 1..20 {
                    assert_eq!(r.weight(h, t, g, k), 0.0);
                }
            }
        }
    }
}

#[test]
fn aggregates_match_brute_force_recomputation() {
    let d = capture(&model(3), &tokens(24, 4)).unwrap();
    let r = &d.record;
    let mut brute = Vec::new();
    for h in 0..r.heads {
        for t in 0..r.seq_len {
            for g in 0..r.groups {
                let mut acc = 0.0f64;
                for k in 0..r.seq_len {
                    acc += r.weights[(h * r.seq_len + t) * r.kv_len() + g * r.seq_len + k] as f64;
                }
                brute.push(acc as f32);
            }
        }
    }
    let stored: Vec<u32> = r.group_agg.iter().map(|x| x.to_bits()).collect();
    let recomputed: Vec<u32> = brute.iter().map(|x| x.to_bits()).collect();
    assert_eq!(stored, recomputed);
    assert_eq!(aggregate_by_group(&d), r.group_agg);
    for row in r.group_agg.chunks_exact(r.groups) {
        let s: f64 = row.iter().map(|&x| x as f64).sum();
        assert!((s - 1.0).abs() < 1e-5);
    }
}

#[test]
fn uniform_weights_split_evenly() {
    let (h, t, g) = (2, 1, 4);
    let d = synthetic(h, t, g, vec![0.25; h * t * g * t]);
    assert!(aggregate_by_group(&d).iter().all(|&a| a == 0.25));
}

#[test]
fn mass_on_one_group_is_one_hot() {
    let (t, g) = (3, 4);
    let mut w = vec![0.0f32; t * g * t];
    for q in 0..t {
        for k in 0..=q {
            w[q * g * t + 3 * t + k] = 1.0 / (q + 1) as f32;
        }
    }
    let agg = aggregate_by_group(&synthetic(1, t, g, w));
    for q in 0..t {
        let row = &agg[q * g..(q + 1) * g];
        assert_eq!(&row[..3], &[0.0, 0.0, 0.0]);
        assert!((row[3] - 1.0).abs() < 1e-6);
    }
}

#[test]
fn export_round_trips_csv_to_pgm() {
    let d = capture(&model(5), &tokens(16, 6)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = export(&d, dir.path()).unwrap();
    let heads = d.record.heads;
    assert_eq!(files.len(), heads * (2 + 4) + 1);
    for h in 0..heads {
        let csv = std::fs::read_to_string(dir.path().join(format!("attn_head{h}.csv"))).unwrap();
        let (t, g, values) = parse_csv(&csv).unwrap();
        assert_eq!((t, g), (16, 4));
        assert_eq!(csv.lines().count(), 16 + 1);
        assert!(csv.lines().all(|l| l.split(',').count() == g + 1));
        let pgm = std::fs::read(dir.path().join(format!("attn_head{h}.pgm"))).unwrap();
        assert_eq!(render_pgm(&values, t, g), pgm);
    }
}

#[test]
fn flat_aggregates_render_flat_gray() {
    let (t, g) = (2, 4);
    let d = synthetic(1, t, g, {
        let mut w = vec![0.0f32; t * g * t];
        for q in 0..t {
            for grp in 0..g {
                for k in 0..=q {
                    w[q * g * t + grp * t + k] = 0.25 / (q + 1) as f32;
                }
            }
        }
        w
    });
    let agg = aggregate_by_group(&d);
    let pgm = render_pgm(&agg, t, g);
    assert!(pgm.ends_with(&[128u8; 8]));
}

#[test]
fn baseline_capture_is_contract_error() {
    let base = Model::new(model(0).config().baseline(), 0).unwrap();
    assert!(matches!(
        capture(&base, &[1, 2, 3]),
        Err(Error::Contract(_))
    ));
}

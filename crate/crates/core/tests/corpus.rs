use std::path::Path;
use std::sync::Arc;

use atsc_core::corpus::{
    bigram_oracle_nll, decode_char27, encode_char27, CropSampler, SyntheticGrammar, TokenStream,
};
use atsc_core::Error;
use atsc_tensor::Rng;
use proptest::prelude::*;

fn counting_stream(n: u32) -> Arc<TokenStream> {
    Arc::new(TokenStream::new((0..n).collect(), n as usize, "count").unwrap())
}

#[test]
fn targets_are_inputs_shifted_by_one() {
    let mut s = CropSampler::new(counting_stream(600), 512, Rng::new(1)).unwrap();
    for _ in 0..20 {
        let b = s.sample_batch(4);
        assert_eq!(b.inputs.len(), 4 * 512);
        for r in 0..4 {
            let row_in = &b.inputs[r * 512..(r + 1) * 512];
            let row_tg = &b.targets[r * 512..(r + 1) * 512];
            assert_eq!(row_in[0] as usize, b.offsets[r]);
            for i in 0..511 {
                assert_eq!(row_tg[i], row_in[i + 1]);
            }
            assert_eq!(row_tg[511], row_in[511] + 1);
        }
    }
}

#[test]
fn fixed_seed_repeats_batches() {
    let stream = counting_stream(600);
    let mut a = CropSampler::new(stream.clone(), 512, Rng::new(9)).unwrap();
    let mut b = CropSampler::new(stream, 512, Rng::new(9)).unwrap();
    for _ in 0..10 {
        assert_eq!(a.sample_batch(3), b.sample_batch(3));
    }
}

#[test]
fn short_stream_is_contract_error() {
    let r = CropSampler::new(counting_stream(512), 512, Rng::new(0));
    assert!(matches!(r, Err(Error::Contract(_))));
    assert!(CropSampler::new(counting_stream(513), 512, Rng::new(0)).is_ok());
}

#[test]
fn offsets_are_uniform() {
    let mut s = CropSampler::new(counting_stream(600), 512, Rng::new(3)).unwrap();
    let bins = s.offset_count();
    assert_eq!(bins, 88);
    let draws = 100_000;
    let mut hist = vec![0u64; bins];
    for _ in 0..draws {
        hist[s.next_offset()] += 1;
    }
    let expected = draws as f64 / bins as f64;
    let chi2: f64 = hist
        .iter()
        .map(|&o| (o as f64 - expected).powi(2) / expected)
        .sum();
    // 87 degrees of freedom: mean 87, sd ~13.2; 150 is beyond p = 1e-4
    assert!(chi2 < 150.0, "chi-square {chi2}");
}

#[test]
fn easy_fraction_tracks_p_easy() {
    let g = SyntheticGrammar::new(27, 0.5, 4).unwrap();
    let c = g.generate(100_000);
    let n = c.easy.len() - g.lags.1;
    let easy = c.easy.iter().filter(|&&e| e).count() as f64 / n as f64;
    assert!((easy - 0.5).abs() < 0.02, "{easy}");
}

#[test]
fn bigram_oracle_separates_easy_from_hard() {
    let g = SyntheticGrammar::new(27, 0.5, 5).unwrap();
    let c = g.generate(50_000);
    let ids = c.stream.ids();
    let hard: Vec<bool> = c
        .easy
        .iter()
        .enumerate()
        .map(|(i, &e)| i >= g.lags.1 && !e)
        .collect();
    assert_eq!(bigram_oracle_nll(ids, 27, &c.easy).unwrap(), 0.0);
    assert!(bigram_oracle_nll(ids, 27, &hard).unwrap() > 1.0);
    // easy tokens really are the rule applied to the previous token
    for i in 1..ids.len() {
        if c.easy[i] {
            assert_eq!(ids[i], g.rule[ids[i - 1] as usize]);
        }
    }
}

#[test]
fn fully_easy_grammar_is_a_function() {
    let g = SyntheticGrammar::new(27, 1.0, 6).unwrap();
    let c = g.generate(10_000);
    let after_warmup: Vec<bool> = (0..c.easy.len()).map(|i| i >= g.lags.1).collect();
    assert_eq!(after_warmup, c.easy);
    assert_eq!(
        bigram_oracle_nll(c.stream.ids(), 27, &after_warmup).unwrap(),
        0.0
    );
}

#[test]
fn p_easy_outside_unit_interval_rejected() {
    assert!(SyntheticGrammar::new(27, 1.5, 0).is_err());
    assert!(SyntheticGrammar::new(27, -0.1, 0).is_err());
}

#[test]
fn toks_round_trip_one_mebibyte() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.toks");
    let mut rng = Rng::new(7);
    let n = (1 << 20) / 4;
    let ids: Vec<u32> = (0..n).map(|_| rng.below(1024) as u32).collect();
    let s = TokenStream::new(ids, 1024, "rand").unwrap();
    s.save(&path).unwrap();
    let back = TokenStream::load(&path).unwrap();
    assert_eq!(back.ids(), s.ids());
    assert_eq!(back.vocab_size(), 1024);
    assert_eq!(std::fs::read(&path).unwrap(), s.to_toks_bytes());
}

#[test]
fn out_of_vocab_id_reports_offset() {
    let s = TokenStream::new(vec![0, 1023], 1024, "x").unwrap();
    let mut bytes = s.to_toks_bytes();
    bytes[24..28].copy_from_slice(&1024u32.to_le_bytes());
    match TokenStream::from_toks_bytes(&bytes, Path::new("x.toks")) {
        Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_headers_rejected() {
    let good = TokenStream::new(vec![1, 2, 3], 4, "x")
        .unwrap()
        .to_toks_bytes();
    let p = Path::new("x.toks");
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let mut bad_version = good.clone();
    bad_version[4] = 9;
    let mut bad_count = good.clone();
    bad_count[12] = 4;
    for (bytes, offset) in [
        (&good[..10], 10u64),
        (&bad_magic[..], 0),
        (&bad_version[..], 4),
        (&bad_count[..], 12),
        (&good[..good.len() - 1], 12),
    ] {
        match TokenStream::from_toks_bytes(bytes, p) {
            Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset),
            other => panic!("{other:?}"),
        }
    }
}

proptest! {
    #[test]
    fn encode_is_total_and_length_preserving(text in proptest::collection::vec(any::<u8>(), 0..256)) {
        let ids = encode_char27(&text);
        prop_assert_eq!(ids.len(), text.len());
        prop_assert!(ids.iter().all(|&i| i < 27));
        let expected: String = text
            .iter()
            .map(|&b| if b.is_ascii_alphabetic() { b.to_ascii_lowercase() as char } else { ' ' })
            .collect();
        prop_assert_eq!(decode_char27(&ids), expected);
    }

    #[test]
    fn loader_rejects_any_corrupted_id(
        len in 1usize..200,
        vocab in 2u32..5000,
        seed in any::<u64>(),
        excess in 0u32..1000,
    ) {
        let mut rng = Rng::new(seed);
        let ids: Vec<u32> = (0..len).map(|_| rng.below(vocab as usize) as u32).collect();
        let mut bytes = TokenStream::new(ids, vocab as usize, "p").unwrap().to_toks_bytes();
        let at = rng.below(len);
        let off = 20 + 4 * at;
        bytes[off..off + 4].copy_from_slice(&(vocab + excess).to_le_bytes());
        match TokenStream::from_toks_bytes(&bytes, Path::new("p")) {
            Err(Error::Format { offset, .. }) => prop_assert_eq!(offset as usize, off),
            other => prop_assert!(false, "{:?}", other),
        }
    }
}

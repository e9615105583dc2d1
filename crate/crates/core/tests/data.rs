mod common;

use common::tiny_config;
use proptest::prelude::*;
use signflow_autograd::Tensor;
use signflow_core::data::{batch_pad, masked_mse, Corpus, MotifTable, Normalizer, STD_FLOOR};
use signflow_core::manifest::{load_corpus, write_corpus};
use signflow_core::seqfile::{decode_sequence, encode_sequence, read_sequence, write_sequence};
use signflow_core::{Config, SignError, SignSequence, TextTokens};

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn motif_table_is_deterministic_and_distinct() {
    let cfg = Config::default();
    let t = MotifTable::from_config(&cfg).unwrap();
    assert_eq!(t, MotifTable::from_config(&cfg).unwrap());
    assert_eq!(t.motif(0).len(), 8 * 8 * 2);
    let mut worst: f64 = -1.0;
    for i in 0..t.vocab_size {
        for j in i + 1..t.vocab_size {
            worst = worst.max(pearson(t.motif(i), t.motif(j)));
        }
    }
    assert!(worst < 0.99, "max pairwise correlation {worst}");
    let other = MotifTable::build(20, 8, 2, 8, 2, 0.3, cfg.data.seed + 1).unwrap();
    assert_ne!(t, other);
}

#[test]
fn step_sizes_follow_the_configured_std() {
    let delta = 0.25;
    let t = MotifTable::build(400, 8, 2, 8, 2, delta, 5).unwrap();
    let w = t.frame_width();
    let mut steps = Vec::new();
    for tok in 0..t.vocab_size {
        let m = t.motif(tok);
        for f in 1..t.motif_len {
            for c in 0..w {
                steps.push(m[f * w + c] - m[(f - 1) * w + c]);
            }
        }
    }
    let n = steps.len() as f64;
    let mean = steps.iter().sum::<f64>() / n;
    let std = (steps.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((std / delta - 1.0).abs() < 0.1, "step std {std}");
}

#[test]
fn sentence_lengths_follow_the_formula() {
    let t = MotifTable::build(20, 8, 2, 8, 2, 0.3, 1).unwrap();
    let one = t.render(&TextTokens::new(vec![4], 20).unwrap(), 25.0).unwrap();
    assert_eq!(one.frames(), 8);
    let three = t.render(&TextTokens::new(vec![4, 4, 19], 20).unwrap(), 25.0).unwrap();
    assert_eq!(three.frames(), 8 * 3 + 2 * 2);
    let cfg = tiny_config();
    let corpus = Corpus::generate(&cfg).unwrap();
    for s in &corpus.samples {
        let n = s.tokens.len();
        assert_eq!(s.sign.frames(), n * cfg.data.motif_len + (n - 1) * cfg.data.transition_frames);
    }
}

#[test]
fn transitions_lie_between_motif_endpoints() {
    let t = MotifTable::build(5, 3, 2, 4, 3, 0.3, 2).unwrap();
    let s = t.render(&TextTokens::new(vec![1, 3], 5).unwrap(), 25.0).unwrap();
    let w = 6;
    let a = &t.motif(1)[3 * w..];
    let b = &t.motif(3)[..w];
    for k in 0..3 {
        let f = s.frame(4 + k);
        let lambda = (f[0] - a[0]) / (b[0] - a[0]);
        assert!(lambda > 0.0 && lambda < 1.0);
        for c in 0..w {
            assert!((f[c] - (a[c] + lambda * (b[c] - a[c]))).abs() < 1e-12);
        }
    }
}

#[test]
fn corpus_is_pure_and_splits_are_honest() {
    let mut cfg = Config::default();
    cfg.data.num_samples = 300;
    cfg.data.audio_missing = 0.3;
    let a = Corpus::generate(&cfg).unwrap();
    assert_eq!(a, Corpus::generate(&cfg).unwrap());

    let sp = &a.split;
    let mut all: Vec<usize> = sp.train.iter().chain(&sp.dev).chain(&sp.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..300).collect::<Vec<_>>());
    let n = 300.0;
    assert!((sp.dev.len() as f64 - cfg.data.dev_fraction * n).abs() <= 1.0);
    assert!((sp.test.len() as f64 - cfg.data.test_fraction * n).abs() <= 1.0);
    let missing = a.samples.iter().filter(|s| s.audio.is_none()).count() as f64;
    assert!((missing - 0.3 * n).abs() <= 1.0);

    for s in &a.samples {
        assert_eq!(a.table.decode_nearest(&s.sign), s.tokens.ids());
        assert!((2..=6).contains(&s.tokens.len()));
    }
}

#[test]
fn normalizer_matches_two_pass_statistics() {
    let cfg = tiny_config();
    let corpus = Corpus::generate(&cfg).unwrap();
    let norm = Normalizer::fit(corpus.train_samples().map(|s| &s.sign)).unwrap();
    let w = corpus.table.frame_width();
    let frames: Vec<&[f64]> = corpus.train_samples().flat_map(|s| (0..s.sign.frames()).map(move |t| s.sign.frame(t))).collect();
    let n = frames.len() as f64;
    for c in 0..w {
        let mean = frames.iter().map(|f| f[c]).sum::<f64>() / n;
        let var = frames.iter().map(|f| (f[c] - mean) * (f[c] - mean)).sum::<f64>() / n;
        assert!((norm.mean[c] - mean).abs() < 1e-12);
        assert!((norm.std[c] - var.sqrt()).abs() < 1e-12);
    }

    let applied: Vec<SignSequence> = corpus.train_samples().map(|s| norm.apply(&s.sign)).collect();
    let refit = Normalizer::fit(applied.iter()).unwrap();
    assert!(refit.mean.iter().all(|m| m.abs() < 1e-6));
    assert!(refit.std.iter().all(|s| (s - 1.0).abs() < 1e-6));
    for s in corpus.samples.iter().take(10) {
        let back = norm.invert(&norm.apply(&s.sign));
        for (x, y) in back.data().iter().zip(s.sign.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    let flat = SignSequence::new(3, 1, 2, 25.0, vec![2.0, -1.0, 2.0, -1.0, 2.0, -1.0]).unwrap();
    let n = Normalizer::fit([&flat]).unwrap();
    assert_eq!(n.std, vec![STD_FLOOR, STD_FLOOR]);
    assert!(n.apply(&flat).data().iter().all(|&v| v == 0.0));
    assert!(Normalizer::fit(std::iter::empty::<&SignSequence>()).is_err());
}

fn seq(frames: usize, seed: f64) -> SignSequence {
    SignSequence::new(frames, 2, 2, 25.0, (0..frames * 4).map(|i| (i as f64 * seed).sin()).collect()).unwrap()
}

#[test]
fn padding_and_masked_loss() {
    let (a, b) = (seq(3, 0.3), seq(5, 0.7));
    let same = batch_pad(&[(0, &a), (1, &seq(3, 0.1))], 8).unwrap();
    assert!(same.masks.iter().flatten().all(|&m| m));
    let p = batch_pad(&[(0, &a), (1, &b)], 8).unwrap();
    assert_eq!(p.len, 5);
    assert_eq!(p.masks[0], vec![true, true, true, false, false]);
    assert!(p.frames[0].row(4).iter().all(|&v| v == 0.0));
    match batch_pad(&[(0, &a), (17, &b)], 4) {
        Err(e) => assert!(e.to_string().contains("17")),
        Ok(_) => panic!("over-length sample accepted"),
    }

    // Predictions differ from targets everywhere, including padded tails.
    let preds: Vec<Tensor> = p.frames.iter().map(|t| Tensor::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, v)| v + 0.1 * (i % 7) as f64).collect()).unwrap()).collect();
    let mut oracle = 0.0;
    for (k, s) in [&a, &b].iter().enumerate() {
        let n = s.data().len();
        let se: f64 = preds[k].data()[..n].iter().zip(s.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        oracle += se / n as f64;
    }
    assert!((masked_mse(&preds, &p).unwrap() - oracle / 2.0).abs() < 1e-12);
}

#[test]
fn sequence_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.sgsq");
    let s = seq(4, 0.5).with_data((0..16).map(|i| (i as f32 * 0.37) as f64).collect()).unwrap();
    write_sequence(&s, &path).unwrap();
    assert_eq!(read_sequence(&path).unwrap(), s);

    let bytes = encode_sequence(&s);
    assert_eq!(&bytes[..5], b"SGSQ1");
    assert_eq!(bytes.len(), 21 + 16 * 4);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_sequence(&bad), Err(SignError::Format { offset: 0, .. })));
    let mut zero = bytes.clone();
    zero[5..9].copy_from_slice(&0u32.to_le_bytes());
    assert!(decode_sequence(&zero).is_err());
    assert!(matches!(decode_sequence(&bytes[..30]), Err(SignError::Format { .. })));
    let mut huge = bytes.clone();
    huge[5..9].copy_from_slice(&u32::MAX.to_le_bytes());
    huge[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(decode_sequence(&huge).is_err());
}

proptest! {
    #[test]
    fn sequence_round_trip(frames in 1usize..20, joints in 1usize..5, coords in 1usize..4, rate in 1.0f32..120.0, seed in any::<u32>()) {
        let data: Vec<f64> = (0..frames * joints * coords).map(|i| ((i as u64 * 2654435761 + seed as u64) % 10007) as f32 as f64 / 97.0).collect();
        let data: Vec<f64> = data.iter().map(|&v| v as f32 as f64).collect();
        let s = SignSequence::new(frames, joints, coords, rate, data).unwrap();
        let back = decode_sequence(&encode_sequence(&s)).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode_sequence(&back), encode_sequence(&s));
    }
}

#[test]
fn corpus_directory_round_trip() {
    let cfg = tiny_config();
    let corpus = Corpus::generate(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&cfg, &corpus, dir.path()).unwrap();
    let (c2, back) = load_corpus(dir.path()).unwrap();
    assert_eq!(c2.data, cfg.data);
    assert_eq!(back, corpus);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), cfg.data.num_samples + 1);

    let first = dir.path().join("seq").join("000000.sgsq");
    let mut bytes = std::fs::read(&first).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&first, bytes).unwrap();
    assert!(load_corpus(dir.path()).is_err());
}

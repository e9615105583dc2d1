//! Held-out evaluation: generation, keypoint metrics and back-translated
//! text metrics, plus the two reference baselines.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use signflow_autograd::ParamStore;

use crate::backtranslate::BackTranslator;
use crate::data::{derive_seed, Corpus, Normalizer};
use crate::error::{contract, Result, SignError};
use crate::features::extract_text_features;
use crate::metrics::{bleu_n, dtw_distance, keypoint_mse, rouge_l_f1};
use crate::model::{GenerationConfig, Modality, SignModel};
use crate::sign::{Embedding, SignSequence, TextTokens};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub keypoint_mse: f64,
    pub dtw: f64,
    pub samples: usize,
    /// Exact-match rate of the back-translator on the ground-truth
    /// sequences of the same split.
    pub bt_accuracy: f64,
}

impl MetricReport {
    pub fn bleu1(&self) -> f64 {
        self.bleu[0]
    }

    /// `key=value` pairs, one per line.
    pub fn to_lines(&self) -> String {
        self.to_string()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = MetricReport::default();
        for (no, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SignError::Evaluation(format!("line {}: expected key=value", no + 1)))?;
            let bad = || SignError::Evaluation(format!("line {}: bad value for `{k}`", no + 1));
            match k {
                "samples" => r.samples = v.parse().map_err(|_| bad())?,
                _ => {
                    let x: f64 = v.parse().map_err(|_| bad())?;
                    match k {
                        "bleu1" => r.bleu[0] = x,
                        "bleu2" => r.bleu[1] = x,
                        "bleu3" => r.bleu[2] = x,
                        "bleu4" => r.bleu[3] = x,
                        "rouge_l" => r.rouge_l = x,
                        "keypoint_mse" => r.keypoint_mse = x,
                        "dtw" => r.dtw = x,
                        "bt_accuracy" => r.bt_accuracy = x,
                        _ => return Err(SignError::Evaluation(format!("unknown report key `{k}`"))),
                    }
                }
            }
        }
        Ok(r)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.bleu.iter().enumerate() {
            writeln!(f, "bleu{}={b}", i + 1)?;
        }
        writeln!(f, "rouge_l={}", self.rouge_l)?;
        writeln!(f, "keypoint_mse={}", self.keypoint_mse)?;
        writeln!(f, "dtw={}", self.dtw)?;
        writeln!(f, "samples={}", self.samples)?;
        writeln!(f, "bt_accuracy={}", self.bt_accuracy)
    }
}

/// One scored prediction: normalized generated and reference sequences.
pub struct Scored<'a> {
    pub pred: SignSequence,
    pub gt: SignSequence,
    pub tokens: &'a [usize],
}

/// Thread pool honouring `SIGNFLOW_THREADS`.
pub fn eval_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SIGNFLOW_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| SignError::Config(format!("SIGNFLOW_THREADS=`{v}` is not a positive integer")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| SignError::Evaluation(e.to_string()))
}

fn require_bt(bt: Option<&BackTranslator>) -> Result<&BackTranslator> {
    bt.ok_or_else(|| {
        SignError::Evaluation("no back-translator; train one first with `signflow train-bt`".into())
    })
}

/// Metric means over already generated sequences.
pub fn score(items: &[Scored<'_>], bt: Option<&BackTranslator>) -> Result<MetricReport> {
    let bt = require_bt(bt)?;
    if items.is_empty() {
        return Err(contract("nothing to evaluate"));
    }
    let per: Vec<([f64; 4], f64, f64, f64, bool)> = eval_pool()?.install(|| {
        items
            .par_iter()
            .map(|it| {
                let hyp = bt.translate(&it.pred)?;
                let mut bleu = [0.0; 4];
                for (n, b) in bleu.iter_mut().enumerate() {
                    *b = bleu_n(&hyp, it.tokens, n + 1)?;
                }
                let rouge = rouge_l_f1(&hyp, it.tokens)?;
                let mse = keypoint_mse(&it.pred, &it.gt)?;
                let dtw = dtw_distance(&it.pred, &it.gt)?;
                let exact = bt.translate(&it.gt)? == it.tokens;
                Ok((bleu, rouge, mse, dtw, exact))
            })
            .collect::<Result<_>>()
    })?;
    let n = per.len() as f64;
    let mut r = MetricReport {
        samples: per.len(),
        ..MetricReport::default()
    };
    for (bleu, rouge, mse, dtw, exact) in &per {
        for k in 0..4 {
            r.bleu[k] += bleu[k] / n;
        }
        r.rouge_l += rouge / n;
        r.keypoint_mse += mse / n;
        r.dtw += dtw / n;
        r.bt_accuracy += f64::from(u8::from(*exact)) / n;
    }
    Ok(r)
}

/// Conditioning embedding of a corpus sample. Audio-conditioned samples
/// without audio go through the mapping network.
pub fn condition_for(model: &SignModel, store: &ParamStore, corpus: &Corpus, id: usize, m: Modality) -> Result<Embedding> {
    let s = corpus.get(id);
    let text = || -> Result<Embedding> {
        let f = extract_text_features(&s.tokens, model.cfg.model.text_feature_dim, model.cfg.data.feature_seed)?;
        model.embed(store, &f, Modality::Text)
    };
    match (m, &s.audio) {
        (Modality::Text, _) => text(),
        (Modality::Audio, Some(a)) => model.embed(store, &a.frames, Modality::Audio),
        (Modality::Audio, None) => model.pseudo_audio(store, &text()?),
    }
}

/// Generates for every id and scores against the references.
pub fn evaluate_run(
    model: &SignModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[usize],
    bt: Option<&BackTranslator>,
    gen: &GenerationConfig,
    m: Modality,
) -> Result<MetricReport> {
    require_bt(bt)?;
    let preds = generate_split(model, store, corpus, ids, gen, m)?;
    let norm = model.normalizer(store);
    let items: Vec<Scored<'_>> = ids
        .iter()
        .zip(preds)
        .map(|(&id, pred)| Scored {
            pred,
            gt: norm.apply(&corpus.get(id).sign),
            tokens: corpus.get(id).tokens.ids(),
        })
        .collect();
    score(&items, bt)
}

/// Averaged generations for `ids`; each sample's seed is derived from its id.
pub fn generate_split(
    model: &SignModel,
    store: &ParamStore,
    corpus: &Corpus,
    ids: &[usize],
    gen: &GenerationConfig,
    m: Modality,
) -> Result<Vec<SignSequence>> {
    eval_pool()?.install(|| {
        ids.par_iter()
            .map(|&id| {
                let cond = condition_for(model, store, corpus, id, m)?;
                let g = GenerationConfig {
                    seed: derive_seed(gen.seed, id as u64),
                    ..gen.clone()
                };
                model.generate_averaged(store, &cond, m, None, &g)
            })
            .collect()
    })
}

/// Framewise mean of the normalized training sequences, `max_len` frames
/// long; frames past a sequence's end repeat its last frame.
pub fn corpus_mean_sequence(corpus: &Corpus, norm: &Normalizer, max_len: usize) -> Result<SignSequence> {
    let w = corpus.table.frame_width();
    let mut acc = vec![0.0; max_len * w];
    let mut n = 0.0;
    for s in corpus.train_samples() {
        let z = norm.apply(&s.sign);
        for t in 0..max_len {
            let src = z.frame(t.min(z.frames() - 1));
            acc[t * w..(t + 1) * w].iter_mut().zip(src).for_each(|(a, v)| *a += v);
        }
        n += 1.0;
    }
    if n == 0.0 {
        return Err(contract("empty training split"));
    }
    acc.iter_mut().for_each(|a| *a /= n);
    let fr = corpus.samples[0].sign.frame_rate;
    SignSequence::new(max_len, corpus.table.joints, corpus.table.coords, fr, acc)
}

/// Scores the corpus-mean sequence, cut to each reference's length.
pub fn corpus_mean_baseline(corpus: &Corpus, norm: &Normalizer, ids: &[usize], bt: Option<&BackTranslator>) -> Result<MetricReport> {
    let max_len = ids.iter().map(|&i| corpus.get(i).sign.frames()).max().unwrap_or(1);
    let mean = corpus_mean_sequence(corpus, norm, max_len)?;
    let w = mean.frame_width();
    let items = ids
        .iter()
        .map(|&id| {
            let gt = norm.apply(&corpus.get(id).sign);
            let pred = SignSequence::new(gt.frames(), gt.joints(), gt.coords(), gt.frame_rate, mean.data()[..gt.frames() * w].to_vec())?;
            Ok(Scored {
                pred,
                gt,
                tokens: corpus.get(id).tokens.ids(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    score(&items, bt)
}

/// Renders each sentence with a randomly permuted word-to-motif mapping:
/// well-formed signing that carries the wrong words.
pub fn shuffled_motif_baseline(
    corpus: &Corpus,
    norm: &Normalizer,
    ids: &[usize],
    bt: Option<&BackTranslator>,
    seed: u64,
) -> Result<MetricReport> {
    let v = corpus.table.vocab_size;
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5AFF)));
    let items = ids
        .iter()
        .map(|&id| {
            let s = corpus.get(id);
            let mapped = TextTokens::new(s.tokens.ids().iter().map(|&t| perm[t]).collect(), v)?;
            let pred = norm.apply(&corpus.table.render(&mapped, s.sign.frame_rate)?);
            Ok(Scored {
                pred,
                gt: norm.apply(&s.sign),
                tokens: s.tokens.ids(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    score(&items, bt)
}

/// `(normalized sequence, tokens)` pairs for back-translator training.
pub fn bt_pairs(corpus: &Corpus, norm: &Normalizer, ids: &[usize]) -> Vec<(SignSequence, Vec<usize>)> {
    ids.iter()
        .map(|&i| (norm.apply(&corpus.get(i).sign), corpus.get(i).tokens.ids().to_vec()))
        .collect()
}

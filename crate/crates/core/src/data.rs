//! Procedural corpus: per-token keypoint motifs joined by interpolated
//! transitions, optional synthetic audio, splits and normalization.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use signflow_autograd::Tensor;

use crate::config::Config;
use crate::error::{contract, Result};
use crate::features::{splitmix64, AudioSynth};
use crate::sign::{AudioFeatureSeq, SignSequence, TextTokens};

/// Derives an independent stream seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotifTable {
    pub vocab_size: usize,
    pub joints: usize,
    pub coords: usize,
    pub motif_len: usize,
    pub transition_frames: usize,
    /// `vocab_size` blocks of `motif_len * joints * coords` values.
    motifs: Vec<f64>,
}

impl MotifTable {
    /// Each motif starts from a standard-normal pose and walks with smoothed
    /// Gaussian steps of std `delta_std`.
    pub fn build(
        vocab_size: usize,
        joints: usize,
        coords: usize,
        motif_len: usize,
        transition_frames: usize,
        delta_std: f64,
        seed: u64,
    ) -> Result<Self> {
        if vocab_size == 0 || joints == 0 || coords == 0 || motif_len == 0 {
            return Err(contract("motif table dimensions must be positive"));
        }
        let w = joints * coords;
        // [1,2,1]/sqrt(6) has unit energy, so smoothing keeps the step std.
        let kernel = [1.0, 2.0, 1.0].map(|k: f64| k / 6f64.sqrt());
        let mut motifs = Vec::with_capacity(vocab_size * motif_len * w);
        for tok in 0..vocab_size {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tok as u64));
            let mut pose: Vec<f64> = (0..w).map(|_| StandardNormal.sample(&mut rng)).collect();
            let steps = motif_len - 1;
            let raw: Vec<f64> = (0..(steps + 2) * w).map(|_| StandardNormal.sample(&mut rng)).collect();
            motifs.extend_from_slice(&pose);
            for s in 0..steps {
                for (c, p) in pose.iter_mut().enumerate() {
                    let d: f64 = (0..3).map(|k| kernel[k] * raw[(s + k) * w + c]).sum();
                    *p += delta_std * d;
                }
                motifs.extend_from_slice(&pose);
            }
        }
        Ok(MotifTable {
            vocab_size,
            joints,
            coords,
            motif_len,
            transition_frames,
            motifs,
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let d = &cfg.data;
        Self::build(
            d.vocab_size,
            d.joints,
            d.coords,
            d.motif_len,
            d.transition_frames,
            d.delta_std,
            d.seed,
        )
    }

    pub fn frame_width(&self) -> usize {
        self.joints * self.coords
    }

    /// `motif_len * joints * coords` values of one token.
    pub fn motif(&self, token: usize) -> &[f64] {
        let n = self.motif_len * self.frame_width();
        &self.motifs[token * n..(token + 1) * n]
    }

    pub fn sentence_frames(&self, n: usize) -> usize {
        n * self.motif_len + n.saturating_sub(1) * self.transition_frames
    }

    /// Concatenated motifs with linear transitions between neighbours.
    pub fn render(&self, tokens: &TextTokens, frame_rate: f32) -> Result<SignSequence> {
        let w = self.frame_width();
        let mut data = Vec::with_capacity(self.sentence_frames(tokens.len()) * w);
        for (k, &t) in tokens.ids().iter().enumerate() {
            if t >= self.vocab_size {
                return Err(contract(format!("token {t} has no motif")));
            }
            if k > 0 {
                let end = data[data.len() - w..].to_vec();
                let start = &self.motif(t)[..w];
                let steps = self.transition_frames + 1;
                for i in 1..steps {
                    let f = i as f64 / steps as f64;
                    data.extend(end.iter().zip(start).map(|(a, b)| a + (b - a) * f));
                }
            }
            data.extend_from_slice(self.motif(t));
        }
        SignSequence::new(data.len() / w, self.joints, self.coords, frame_rate, data)
    }

    /// Recovers tokens by matching each motif-length segment to its nearest
    /// motif. Exact on clean renders; `seq` must use the table's raw units.
    pub fn decode_nearest(&self, seq: &SignSequence) -> Vec<usize> {
        let w = self.frame_width();
        let period = self.motif_len + self.transition_frames;
        let n = ((seq.frames() + self.transition_frames) as f64 / period as f64).round().max(1.0) as usize;
        (0..n)
            .map(|k| {
                let start = (k * period).min(seq.frames().saturating_sub(self.motif_len));
                let seg_len = self.motif_len.min(seq.frames() - start);
                let seg = &seq.data()[start * w..(start + seg_len) * w];
                (0..self.vocab_size)
                    .map(|t| {
                        let m = &self.motif(t)[..seg_len * w];
                        let d: f64 = seg.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                        (t, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .map(|(t, _)| t)
                    .expect("non-empty vocabulary")
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub id: usize,
    pub tokens: TextTokens,
    pub audio: Option<AudioFeatureSeq>,
    /// Raw (unnormalized) keypoints.
    pub sign: SignSequence,
}

pub fn synthesize_sample(
    id: usize,
    tokens: TextTokens,
    table: &MotifTable,
    audio: Option<&AudioSynth>,
    seed: u64,
    frame_rate: f32,
) -> Result<CorpusSample> {
    let sign = table.render(&tokens, frame_rate)?;
    let audio = audio.map(|a| a.extract(&tokens, seed)).transpose()?;
    Ok(CorpusSample { id, tokens, audio, sign })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
    pub audio_missing_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub table: MotifTable,
    pub audio: AudioSynth,
    pub samples: Vec<CorpusSample>,
    pub split: DatasetSplit,
}

impl Corpus {
    /// Pure function of the data section of `cfg`.
    pub fn generate(cfg: &Config) -> Result<Self> {
        let d = &cfg.data;
        let table = MotifTable::from_config(cfg)?;
        let audio = AudioSynth {
            dim: cfg.model.audio_feature_dim,
            frames_per_token: d.frames_per_token,
            jitter: d.audio_jitter,
            frame_rate: 50.0,
            feature_seed: d.feature_seed,
        };
        let n = d.num_samples;
        let mut ids: Vec<usize> = (0..n).collect();
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(d.seed, 0xA0D10)));
        let n_missing = (d.audio_missing * n as f64).round() as usize;
        let mut missing = vec![false; n];
        for &i in &ids[..n_missing] {
            missing[i] = true;
        }

        let mut samples = Vec::with_capacity(n);
        for (id, &miss) in missing.iter().enumerate() {
            let seed = derive_seed(d.seed, 1_000_000 + id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let len = rng.random_range(d.min_tokens..=d.max_tokens).min(d.max_words);
            let toks = (0..len).map(|_| rng.random_range(0..d.vocab_size)).collect();
            let tokens = TextTokens::new(toks, d.vocab_size)?;
            let synth = (!miss).then_some(&audio);
            samples.push(synthesize_sample(id, tokens, &table, synth, seed, d.frame_rate)?);
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(d.seed, 0x5B117)));
        let n_test = (d.test_fraction * n as f64).round() as usize;
        let n_dev = (d.dev_fraction * n as f64).round() as usize;
        let test = order[..n_test].to_vec();
        let dev = order[n_test..n_test + n_dev].to_vec();
        let train = order[n_test + n_dev..].to_vec();
        Ok(Corpus {
            table,
            audio,
            samples,
            split: DatasetSplit {
                train,
                dev,
                test,
                audio_missing_fraction: d.audio_missing,
            },
        })
    }

    pub fn get(&self, id: usize) -> &CorpusSample {
        &self.samples[id]
    }

    pub fn train_samples(&self) -> impl Iterator<Item = &CorpusSample> {
        self.split.train.iter().map(|&i| &self.samples[i])
    }

    /// Mean normalized first pose over `ids`.
    pub fn mean_first_pose(&self, ids: &[usize], norm: &Normalizer) -> Vec<f64> {
        let w = self.table.frame_width();
        let mut acc = vec![0.0; w];
        for &i in ids {
            let s = norm.apply(&self.samples[i].sign);
            acc.iter_mut().zip(s.frame(0)).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= ids.len().max(1) as f64);
        acc
    }
}

/// Per-coordinate standardization fitted on training frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl Normalizer {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a SignSequence>) -> Result<Self> {
        let mut count = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        let mut m2: Vec<f64> = Vec::new();
        for s in samples {
            if mean.is_empty() {
                mean = vec![0.0; s.frame_width()];
                m2 = vec![0.0; s.frame_width()];
            } else if s.frame_width() != mean.len() {
                return Err(contract("normalizer fit over mixed pose layouts"));
            }
            for t in 0..s.frames() {
                count += 1;
                for (c, &x) in s.frame(t).iter().enumerate() {
                    let d = x - mean[c];
                    mean[c] += d / count as f64;
                    m2[c] += d * (x - mean[c]);
                }
            }
        }
        if count == 0 {
            return Err(contract("cannot fit a normalizer on an empty split"));
        }
        let mut std = Vec::with_capacity(mean.len());
        for (c, m) in m2.iter().enumerate() {
            let s = (m / count as f64).sqrt();
            if s < STD_FLOOR {
                eprintln!("warning: coordinate {c} is constant; std floored at {STD_FLOOR}");
            }
            std.push(s.max(STD_FLOOR));
        }
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, s: &SignSequence) -> SignSequence {
        self.map(s, |x, m, sd| (x - m) / sd)
    }

    pub fn invert(&self, s: &SignSequence) -> SignSequence {
        self.map(s, |x, m, sd| x * sd + m)
    }

    fn map(&self, s: &SignSequence, f: impl Fn(f64, f64, f64) -> f64) -> SignSequence {
        let w = self.mean.len();
        let data = s
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, self.mean[i % w], self.std[i % w]))
            .collect();
        s.with_data(data).expect("layout preserved")
    }
}

/// Zero-padded `[len, width]` frames with per-frame validity.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub frames: Vec<Tensor>,
    pub masks: Vec<Vec<bool>>,
    pub len: usize,
}

pub fn batch_pad(samples: &[(usize, &SignSequence)], max_len: usize) -> Result<PaddedBatch> {
    if let Some((id, s)) = samples.iter().find(|(_, s)| s.frames() > max_len) {
        return Err(contract(format!("sample {id} has {} frames, limit is {max_len}", s.frames())));
    }
    let len = samples.iter().map(|(_, s)| s.frames()).max().unwrap_or(0);
    let mut frames = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for (_, s) in samples {
        let w = s.frame_width();
        let mut data = s.data().to_vec();
        data.resize(len * w, 0.0);
        frames.push(Tensor::new(vec![len, w], data)?);
        masks.push((0..len).map(|t| t < s.frames()).collect());
    }
    Ok(PaddedBatch { frames, masks, len })
}

/// Mean over samples of each sample's MSE on its valid frames.
pub fn masked_mse(pred: &[Tensor], target: &PaddedBatch) -> Result<f64> {
    if pred.len() != target.frames.len() || pred.is_empty() {
        return Err(contract("prediction and target batch sizes differ"));
    }
    let mut total = 0.0;
    for ((p, t), mask) in pred.iter().zip(&target.frames).zip(&target.masks) {
        if p.shape() != t.shape() {
            return Err(contract(format!("padded shapes {:?} and {:?} differ", p.shape(), t.shape())));
        }
        let w = t.shape()[1];
        let (mut se, mut n) = (0.0, 0usize);
        for (r, &ok) in mask.iter().enumerate() {
            if ok {
                se += p.row(r).iter().zip(t.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                n += w;
            }
        }
        total += se / n.max(1) as f64;
    }
    Ok(total / pred.len() as f64)
}

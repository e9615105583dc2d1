//! Deterministic stand-ins for pretrained text and speech feature extractors.
//!
//! Text features are hash-expanded Gaussian vectors: for token `t` and
//! component `i`, two 64-bit words are drawn from [`hash_word`] with
//! counters `2i` and `2i+1`, turned into uniforms on (0,1] and [0,1), and
//! combined with Box-Muller (`sqrt(-2 ln u1) * cos(2 pi u2)`). The vector
//! is then scaled to unit length. Audio base vectors use the same recipe
//! under a salted seed and are left unnormalized.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use signflow_autograd::Tensor;

use crate::error::{contract, Result};
use crate::sign::{AudioFeatureSeq, TextTokens};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
pub const AUDIO_SALT: u64 = 0xA0D1_0F0E_A7E5_0001;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Word number `counter` of the stream keyed by `(seed, token)`.
pub fn hash_word(seed: u64, token: u64, counter: u64) -> u64 {
    let key = splitmix64(seed ^ splitmix64(token.wrapping_add(1).wrapping_mul(GOLDEN)));
    splitmix64(key.wrapping_add(counter.wrapping_mul(GOLDEN)))
}

fn gaussian_vector(seed: u64, token: u64, dim: usize) -> Vec<f64> {
    let scale = 1.0 / (1u64 << 53) as f64;
    (0..dim as u64)
        .map(|i| {
            let u1 = ((hash_word(seed, token, 2 * i) >> 11) + 1) as f64 * scale;
            let u2 = (hash_word(seed, token, 2 * i + 1) >> 11) as f64 * scale;
            (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect()
}

/// Unit-length feature vector of one token.
pub fn token_feature(token: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = gaussian_vector(seed, token as u64, dim);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// `[tokens, dim]` matrix of per-token features.
pub fn extract_text_features(tokens: &TextTokens, dim: usize, seed: u64) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(contract("cannot featurize an empty token list"));
    }
    let data = tokens
        .ids()
        .iter()
        .flat_map(|&t| token_feature(t, dim, seed))
        .collect();
    Ok(Tensor::new(vec![tokens.len(), dim], data)?)
}

/// Block-structured synthetic speech: each token becomes `frames_per_token`
/// copies of its base vector plus Gaussian jitter.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioSynth {
    pub dim: usize,
    pub frames_per_token: usize,
    pub jitter: f64,
    pub frame_rate: f64,
    /// Seed of the base vectors, shared across the corpus.
    pub feature_seed: u64,
}

impl AudioSynth {
    pub fn base_vector(&self, token: usize) -> Vec<f64> {
        gaussian_vector(self.feature_seed ^ AUDIO_SALT, token as u64, self.dim)
    }

    /// Features for `tokens`; `seed` only drives the jitter.
    pub fn extract(&self, tokens: &TextTokens, seed: u64) -> Result<AudioFeatureSeq> {
        if tokens.is_empty() {
            return Err(contract("cannot synthesize audio for an empty token list"));
        }
        if self.frames_per_token == 0 {
            return Err(contract("frames_per_token must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(tokens.len() * self.frames_per_token * self.dim);
        for &t in tokens.ids() {
            let base = self.base_vector(t);
            for _ in 0..self.frames_per_token {
                for b in &base {
                    let n: f64 = StandardNormal.sample(&mut rng);
                    data.push(b + self.jitter * n);
                }
            }
        }
        let frames = Tensor::new(vec![tokens.len() * self.frames_per_token, self.dim], data)?;
        AudioFeatureSeq::new(frames, self.frame_rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(jitter: f64) -> AudioSynth {
        AudioSynth {
            dim: 16,
            frames_per_token: 4,
            jitter,
            frame_rate: 50.0,
            feature_seed: 3,
        }
    }

    #[test]
    fn text_features_are_unit_and_repeatable() {
        let toks = TextTokens::new(vec![1, 5, 1], 20).unwrap();
        let a = extract_text_features(&toks, 64, 42).unwrap();
        let b = extract_text_features(&toks, 64, 42).unwrap();
        assert_eq!(a, b);
        for r in 0..3 {
            let n: f64 = a.row(r).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert_eq!(a.row(0), a.row(2));
        assert_ne!(a.row(0), a.row(1));
    }

    #[test]
    fn audio_frame_count_and_zero_jitter_blocks() {
        let toks = TextTokens::new(vec![2, 7, 9], 20).unwrap();
        let a = synth(0.0).extract(&toks, 1).unwrap();
        assert_eq!(a.num_frames(), 12);
        for block in 0..3 {
            for f in 1..4 {
                assert_eq!(a.frames.row(block * 4), a.frames.row(block * 4 + f));
            }
        }
    }

    #[test]
    fn jitter_depends_on_seed_only() {
        let toks = TextTokens::new(vec![2, 7], 20).unwrap();
        let s = synth(0.1);
        assert_eq!(s.extract(&toks, 5).unwrap(), s.extract(&toks, 5).unwrap());
        assert_ne!(s.extract(&toks, 5).unwrap(), s.extract(&toks, 6).unwrap());
    }
}

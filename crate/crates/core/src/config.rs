//! Run configuration. Every section rejects unknown keys so typos surface
//! as errors instead of silently falling back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::binding::Pair;
use crate::error::{io_err, Result, SignError};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub diffusion: DiffusionConfig,
    pub binding: BindingConfig,
    pub ecl: EclConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab_size: usize,
    pub joints: usize,
    pub coords: usize,
    pub motif_len: usize,
    pub transition_frames: usize,
    pub delta_std: f64,
    pub num_samples: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Sentences longer than this are dropped; inert at the default lengths.
    pub max_words: usize,
    pub frame_rate: f32,
    pub frames_per_token: usize,
    pub audio_jitter: f64,
    pub audio_missing: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
    pub feature_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab_size: 20,
            joints: 8,
            coords: 2,
            motif_len: 8,
            transition_frames: 2,
            delta_std: 0.3,
            num_samples: 2000,
            min_tokens: 2,
            max_tokens: 6,
            max_words: 20,
            frame_rate: 25.0,
            frames_per_token: 4,
            audio_jitter: 0.05,
            audio_missing: 0.0,
            dev_fraction: 0.1,
            test_fraction: 0.1,
            seed: 1,
            feature_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub text_feature_dim: usize,
    pub audio_feature_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub encoder_blocks: usize,
    pub producer_blocks: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            text_feature_dim: 64,
            audio_feature_dim: 16,
            heads: 4,
            mlp_hidden: 128,
            encoder_blocks: 2,
            producer_blocks: 6,
            max_len: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Refinement depth H; 0 selects single-pass direct regression.
    pub steps: usize,
    pub sigma_init: f64,
    /// Base std of the per-step noise, scaled by `1 - delta_{h+1}`.
    pub noise_std: f64,
    pub length_weight: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 10,
            sigma_init: 0.1,
            noise_std: 0.1,
            length_weight: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BindingConfig {
    pub temperature: f64,
    /// Average both retrieval directions instead of anchors-to-positives only.
    pub symmetric: bool,
    pub pairs: Vec<Pair>,
}

impl Default for BindingConfig {
    fn default() -> Self {
        BindingConfig {
            temperature: 0.07,
            symmetric: true,
            pairs: vec![Pair::TextSign, Pair::TextAudio],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EclConfig {
    pub warmup_epochs: usize,
    pub lambda_diffusion: f64,
    pub lambda_ecl: f64,
    pub lambda_nce: f64,
    /// Real producer passes inside the differentiable sampler.
    pub sampler_steps: usize,
    /// Apply the mapping network after sign encoding in the unpaired loss.
    pub printed_order: bool,
    /// Keep the sign encoder fixed under the consistency losses.
    pub freeze_sign_encoder: bool,
}

impl Default for EclConfig {
    fn default() -> Self {
        EclConfig {
            warmup_epochs: 50,
            lambda_diffusion: 1.0,
            lambda_ecl: 1.0,
            lambda_nce: 1.0,
            sampler_steps: 3,
            printed_order: false,
            freeze_sign_encoder: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
    /// Stop after this many seconds of wall time; 0 means no limit.
    pub time_budget_secs: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 16,
            lr: 1e-3,
            ema_decay: 0.999,
            clip_norm: 1.0,
            seed: 0,
            time_budget_secs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub num_averaged: usize,
    pub seed: u64,
    pub max_samples: usize,
    pub bt_dim: usize,
    pub bt_heads: usize,
    pub bt_hidden: usize,
    pub bt_epochs: usize,
    pub bt_max_tokens: usize,
    pub bt_noise: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            num_averaged: 20,
            seed: 0,
            max_samples: 0,
            bt_dim: 32,
            bt_heads: 2,
            bt_hidden: 64,
            bt_epochs: 20,
            bt_max_tokens: 8,
            bt_noise: 0.3,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| SignError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SignError::Config(m));
        let d = &self.data;
        if d.vocab_size == 0 || d.joints == 0 || d.coords == 0 || d.motif_len == 0 {
            return bad("vocab_size, joints, coords and motif_len must be positive".into());
        }
        if d.min_tokens == 0 || d.min_tokens > d.max_tokens {
            return bad(format!("token range {}..={} is empty", d.min_tokens, d.max_tokens));
        }
        if !(0.0..=1.0).contains(&d.audio_missing) {
            return bad(format!("audio_missing {} outside [0,1]", d.audio_missing));
        }
        if d.dev_fraction + d.test_fraction >= 1.0 || d.dev_fraction < 0.0 || d.test_fraction < 0.0 {
            return bad("dev and test fractions must leave a training split".into());
        }
        let m = &self.model;
        if m.dim % 2 != 0 || m.text_feature_dim == 0 || m.audio_feature_dim == 0 {
            return bad(format!("model dim {} must be even and feature dims positive", m.dim));
        }
        if m.heads == 0 || m.dim % m.heads != 0 {
            return bad(format!("{} heads do not divide dim {}", m.heads, m.dim));
        }
        let longest = d.max_tokens * d.motif_len + (d.max_tokens - 1) * d.transition_frames;
        if longest > m.max_len {
            return bad(format!("max_len {} is below the longest sentence ({longest} frames)", m.max_len));
        }
        if self.binding.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        if !(self.train.ema_decay > 0.0 && self.train.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0,1)".into());
        }
        let e = &self.ecl;
        if [e.lambda_diffusion, e.lambda_ecl, e.lambda_nce].iter().any(|l| *l < 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.train.batch_size < 2 {
            return bad("batch_size must be at least 2 so negatives exist".into());
        }
        if self.eval.num_averaged == 0 {
            return bad("num_averaged must be at least 1".into());
        }
        Ok(())
    }

    /// Frame count of a sentence with `n` tokens.
    pub fn sentence_frames(&self, n: usize) -> usize {
        n * self.data.motif_len + n.saturating_sub(1) * self.data.transition_frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = Config::from_toml("[train]\nepochz = 3\n").unwrap_err().to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = Config::from_toml("[nonsense]\n").unwrap_err().to_string();
        assert!(err.contains("nonsense"), "{err}");
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = Config::from_toml("[diffusion]\nsteps = 4\n").unwrap();
        assert_eq!(c.diffusion.steps, 4);
        assert_eq!(c.model, ModelConfig::default());
    }
}

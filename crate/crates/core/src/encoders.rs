//! The five learned encoders: text, audio, sign, diffusion step and noise.

use rand::Rng;
use signflow_autograd::nn::{AttentionBlock, Linear, Mlp};
use signflow_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::ModelConfig;
use crate::error::{contract, Result};

/// Sinusoidal table: `PE(p, 2i) = sin(p / 10000^(2i/dim))`, `PE(p, 2i+1) = cos(..)`.
pub fn positional_encoding(length: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 != 0 {
        return Err(contract(format!("positional encoding needs an even dim, got {dim}")));
    }
    let mut data = vec![0.0; length * dim];
    for p in 0..length {
        for i in 0..dim / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[p * dim + 2 * i] = angle.sin();
            data[p * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![length, dim], data)?)
}

/// Input projection, positional encoding, attention blocks, mean pooling and
/// an output MLP.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub input: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub head: Mlp,
    pub dim: usize,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{name}.input"), in_dim, cfg.dim, rng)?;
        let blocks = (0..cfg.encoder_blocks)
            .map(|b| AttentionBlock::new(store, &format!("{name}.block{b}"), cfg.dim, cfg.heads, cfg.mlp_hidden, rng))
            .collect::<std::result::Result<_, _>>()?;
        let head = Mlp::new(store, &format!("{name}.head"), cfg.dim, cfg.mlp_hidden, cfg.dim, rng)?;
        Ok(SequenceEncoder {
            input,
            blocks,
            head,
            dim: cfg.dim,
        })
    }

    /// `x: [n, in_dim]` to a `[dim]` embedding.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(contract(format!("encoder input must be a non-empty matrix, got {shape:?}")));
        }
        if shape[1] != self.input.in_dim {
            return Err(contract(format!(
                "encoder expects {} features per row, got {}",
                self.input.in_dim, shape[1]
            )));
        }
        let h = self.input.forward(g, x)?;
        let pe = g.constant(positional_encoding(shape[0], self.dim)?);
        let mut h = g.add(h, pe)?;
        for b in &self.blocks {
            h = b.forward(g, h, None)?;
        }
        let pooled = g.mean_rows(h)?;
        let pooled = g.reshape(pooled, &[1, self.dim])?;
        let out = self.head.forward(g, pooled)?;
        Ok(g.reshape(out, &[self.dim])?)
    }
}

/// Learned lookup of `steps + 1` rows followed by an MLP.
#[derive(Clone, Debug)]
pub struct StepEncoder {
    pub table: ParamId,
    pub head: Mlp,
    pub steps: usize,
    pub dim: usize,
}

impl StepEncoder {
    pub fn new(store: &mut ParamStore, name: &str, steps: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let table = store.add(
            format!("{name}.table"),
            signflow_autograd::nn::normal_tensor(&[steps + 1, cfg.dim], 1.0, rng),
        )?;
        let head = Mlp::new(store, &format!("{name}.head"), cfg.dim, cfg.mlp_hidden, cfg.dim, rng)?;
        Ok(StepEncoder {
            table,
            head,
            steps,
            dim: cfg.dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, h: usize) -> Result<Var> {
        if h > self.steps {
            return Err(contract(format!("step {h} outside 0..={}", self.steps)));
        }
        let table = g.param(self.table);
        let row = g.gather_rows(table, &[h])?;
        let out = self.head.forward(g, row)?;
        Ok(g.reshape(out, &[self.dim])?)
    }
}

/// `E_t`, `E_a`, `E_s`, `E_h`, `E_n`, each under its own parameter prefix.
#[derive(Clone, Debug)]
pub struct Encoders {
    pub text: SequenceEncoder,
    pub audio: SequenceEncoder,
    pub sign: SequenceEncoder,
    pub step: StepEncoder,
    pub noise: SequenceEncoder,
}

pub const TEXT_PREFIX: &str = "enc.text.";
pub const AUDIO_PREFIX: &str = "enc.audio.";
pub const SIGN_PREFIX: &str = "enc.sign.";
pub const STEP_PREFIX: &str = "enc.step.";
pub const NOISE_PREFIX: &str = "enc.noise.";

impl Encoders {
    pub fn new(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        frame_width: usize,
        steps: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Encoders {
            text: SequenceEncoder::new(store, "enc.text", cfg.text_feature_dim, cfg, rng)?,
            audio: SequenceEncoder::new(store, "enc.audio", cfg.audio_feature_dim, cfg, rng)?,
            sign: SequenceEncoder::new(store, "enc.sign", frame_width, cfg, rng)?,
            step: StepEncoder::new(store, "enc.step", steps, cfg, rng)?,
            noise: SequenceEncoder::new(store, "enc.noise", frame_width, cfg, rng)?,
        })
    }

    /// Rejects non-finite keypoints before they reach `E_s` or `E_n`.
    pub fn check_frames(t: &Tensor) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(contract("keypoint input contains non-finite coordinates"))
        }
    }
}

//! The sign predictor: encoders, causal producer, length predictors and the
//! text-to-audio mapping network, plus graph and value-level samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use signflow_autograd::nn::{causal_mask, AttentionBlock, LayerNorm, Linear, Mlp};
use signflow_autograd::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::Config;
use crate::data::derive_seed;
use crate::diffusion::{build_schedule, length_from_log, DiffusionSchedule};
use crate::encoders::{positional_encoding, Encoders};
use crate::error::{contract, Result, SignError};
use crate::sign::{Embedding, SignSequence};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

/// Causal attention over `[cond; e_h; e_n; frame slots]`, read out at the
/// frame slots by a two-layer head.
#[derive(Clone, Debug)]
pub struct Producer {
    pub frame_in: Linear,
    pub blocks: Vec<AttentionBlock>,
    pub norm: LayerNorm,
    pub head: Mlp,
    pub dim: usize,
    pub frame_width: usize,
    pub max_len: usize,
}

/// Number of conditioning positions ahead of the frame slots.
pub const PREFIX: usize = 3;

impl Producer {
    pub fn new(store: &mut ParamStore, cfg: &Config, frame_width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let m = &cfg.model;
        let blocks = (0..m.producer_blocks)
            .map(|b| AttentionBlock::new(store, &format!("producer.block{b}"), m.dim, m.heads, m.mlp_hidden, rng))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Producer {
            frame_in: Linear::new(store, "producer.frame_in", frame_width, m.dim, rng)?,
            blocks,
            norm: LayerNorm::new(store, "producer.norm", m.dim)?,
            head: Mlp::new(store, "producer.head", m.dim, m.mlp_hidden, frame_width, rng)?,
            dim: m.dim,
            frame_width,
            max_len: m.max_len,
        })
    }

    /// `state: [T, J*C]` noisy frames; returns `p_h: [T, J*C]`.
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var, e_h: Var, e_n: Var, state: Var) -> Result<Var> {
        for (name, v) in [("condition", cond), ("step", e_h), ("noise", e_n)] {
            if g.shape(v) != [self.dim] {
                return Err(contract(format!("{name} embedding has shape {:?}, expected [{}]", g.shape(v), self.dim)));
            }
        }
        let shape = g.shape(state).to_vec();
        if shape.len() != 2 || shape[1] != self.frame_width || shape[0] == 0 {
            return Err(contract(format!("frame state has shape {shape:?}, width must be {}", self.frame_width)));
        }
        let t = shape[0];
        if t > self.max_len {
            return Err(contract(format!("target length {t} exceeds max_len {}", self.max_len)));
        }
        let slots = self.frame_in.forward(g, state)?;
        let pe = g.constant(positional_encoding(t, self.dim)?);
        let slots = g.add(slots, pe)?;
        let mut x = g.concat_rows(&[cond, e_h, e_n, slots])?;
        let mask = causal_mask(PREFIX + t)?;
        for b in &self.blocks {
            x = b.forward(g, x, Some(&mask))?;
        }
        let x = self.norm.forward(g, x)?;
        let frames = g.slice_rows(x, PREFIX, t)?;
        Ok(self.head.forward(g, frames)?)
    }
}

/// MLP from a conditioning embedding to a log frame count.
#[derive(Clone, Debug)]
pub struct LengthPredictor {
    pub mlp: Mlp,
}

impl LengthPredictor {
    pub fn forward(&self, g: &mut Graph<'_>, cond: Var) -> Result<Var> {
        let d = g.shape(cond)[0];
        let x = g.reshape(cond, &[1, d])?;
        let y = self.mlp.forward(g, x)?;
        Ok(g.reshape(y, &[1])?)
    }
}

/// Residual MLP producing a pseudo-audio embedding from a text embedding.
#[derive(Clone, Debug)]
pub struct MappingNetwork {
    pub mlp: Mlp,
}

impl MappingNetwork {
    pub fn forward(&self, g: &mut Graph<'_>, e_t: Var) -> Result<Var> {
        let d = g.shape(e_t)[0];
        let x = g.reshape(e_t, &[1, d])?;
        let y = self.mlp.forward(g, x)?;
        let y = g.reshape(y, &[d])?;
        Ok(g.add(e_t, y)?)
    }

    /// Zeroes the residual branch so the network is the identity map.
    pub fn set_identity(&self, store: &mut ParamStore) {
        for id in [self.mlp.fc2.weight, self.mlp.fc2.bias] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }
}

/// Parameter layout of the whole predictor.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub encoders: Encoders,
    pub producer: Producer,
    pub len_text: LengthPredictor,
    pub len_audio: LengthPredictor,
    pub mapping: MappingNetwork,
    /// Corpus-mean first pose, normalized; fixed after corpus fitting.
    pub first_pose: ParamId,
    pub norm_mean: ParamId,
    pub norm_std: ParamId,
}

pub const MAPPING_PREFIX: &str = "mapping.";
pub const AUX_PREFIX: &str = "aux.";

/// Architecture plus its live parameters.
#[derive(Clone, Debug)]
pub struct SignModel {
    pub cfg: Config,
    pub arch: Architecture,
    pub params: ParamStore,
    pub schedule: Option<DiffusionSchedule>,
}

/// Rounds every value to the nearest `f32`, the precision of checkpoints.
pub fn round_store_to_f32(store: &mut ParamStore) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = *v as f32 as f64);
    }
}

impl SignModel {
    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.data.joints * cfg.data.coords;
        let steps = cfg.diffusion.steps;
        let m = &cfg.model;
        let encoders = Encoders::new(&mut store, m, w, steps, &mut rng)?;
        let producer = Producer::new(&mut store, cfg, w, &mut rng)?;
        let len_text = LengthPredictor {
            mlp: Mlp::new(&mut store, "length.text", m.dim, m.mlp_hidden, 1, &mut rng)?,
        };
        let len_audio = LengthPredictor {
            mlp: Mlp::new(&mut store, "length.audio", m.dim, m.mlp_hidden, 1, &mut rng)?,
        };
        let mapping = MappingNetwork {
            mlp: Mlp::new(&mut store, "mapping", m.dim, m.mlp_hidden, m.dim, &mut rng)?,
        };
        let first_pose = store.add("aux.first_pose", Tensor::zeros(&[w]))?;
        let norm_mean = store.add("aux.norm_mean", Tensor::zeros(&[w]))?;
        let norm_std = store.add("aux.norm_std", Tensor::full(&[w], 1.0))?;
        round_store_to_f32(&mut store);
        let schedule = if steps == 0 { None } else { Some(build_schedule(steps)?) };
        Ok(SignModel {
            cfg: cfg.clone(),
            arch: Architecture {
                encoders,
                producer,
                len_text,
                len_audio,
                mapping,
                first_pose,
                norm_mean,
                norm_std,
            },
            params: store,
            schedule,
        })
    }

    /// Parameters updated by the optimizer (everything except `aux.*`).
    pub fn trainable(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .filter(|(_, n, _)| !n.starts_with(AUX_PREFIX))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn frame_width(&self) -> usize {
        self.arch.producer.frame_width
    }

    pub fn steps(&self) -> usize {
        self.cfg.diffusion.steps
    }

    pub fn set_first_pose(&mut self, pose: &[f64]) -> Result<()> {
        let t = self.params.get_mut(self.arch.first_pose);
        if pose.len() != t.len() {
            return Err(contract("first pose width differs from the model"));
        }
        t.data_mut().copy_from_slice(pose);
        round_store_to_f32(&mut self.params);
        Ok(())
    }

    pub fn first_pose(&self, store: &ParamStore) -> Vec<f64> {
        store.get(self.arch.first_pose).data().to_vec()
    }

    pub fn set_normalizer(&mut self, norm: &crate::data::Normalizer) -> Result<()> {
        for (id, v) in [(self.arch.norm_mean, &norm.mean), (self.arch.norm_std, &norm.std)] {
            let t = self.params.get_mut(id);
            if t.len() != v.len() {
                return Err(contract("normalizer width differs from the model"));
            }
            t.data_mut().copy_from_slice(v);
        }
        round_store_to_f32(&mut self.params);
        Ok(())
    }

    pub fn normalizer(&self, store: &ParamStore) -> crate::data::Normalizer {
        crate::data::Normalizer {
            mean: store.get(self.arch.norm_mean).data().to_vec(),
            std: store.get(self.arch.norm_std).data().to_vec(),
        }
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, feats: &Tensor) -> Result<Var> {
        let x = g.constant(feats.clone());
        self.arch.encoders.text.forward(g, x)
    }

    pub fn encode_audio(&self, g: &mut Graph<'_>, feats: &Tensor) -> Result<Var> {
        let x = g.constant(feats.clone());
        self.arch.encoders.audio.forward(g, x)
    }

    pub fn encode_condition(&self, g: &mut Graph<'_>, feats: &Tensor, m: Modality) -> Result<Var> {
        match m {
            Modality::Text => self.encode_text(g, feats),
            Modality::Audio => self.encode_audio(g, feats),
        }
    }

    /// `E_s` over a frame matrix already in the graph.
    pub fn encode_sign(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        crate::encoders::Encoders::check_frames(g.value(frames))?;
        self.arch.encoders.sign.forward(g, frames)
    }

    pub fn encode_noise(&self, g: &mut Graph<'_>, z: &Tensor) -> Result<Var> {
        crate::encoders::Encoders::check_frames(z)?;
        let x = g.constant(z.clone());
        self.arch.encoders.noise.forward(g, x)
    }

    pub fn encode_step(&self, g: &mut Graph<'_>, h: usize) -> Result<Var> {
        self.arch.encoders.step.forward(g, h)
    }

    pub fn predict_p(&self, g: &mut Graph<'_>, cond: Var, e_h: Var, e_n: Var, state: Var) -> Result<Var> {
        self.arch.producer.forward(g, cond, e_h, e_n, state)
    }

    pub fn length_head(&self, m: Modality) -> &LengthPredictor {
        match m {
            Modality::Text => &self.arch.len_text,
            Modality::Audio => &self.arch.len_audio,
        }
    }

    pub fn map_text_to_audio(&self, g: &mut Graph<'_>, e_t: Var) -> Result<Var> {
        self.arch.mapping.forward(g, e_t)
    }

    /// Initial sequence: the first pose tiled to `len` plus `N(0, sigma_init^2)`.
    pub fn initial_noise(&self, store: &ParamStore, len: usize, seed: u64) -> Result<Tensor> {
        let pose = self.first_pose(store);
        let sigma = self.cfg.diffusion.sigma_init;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(len * pose.len());
        for _ in 0..len {
            data.extend_from_slice(&pose);
        }
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("valid std");
            data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        Ok(Tensor::new(vec![len, pose.len()], data)?)
    }

    /// Seeded noise added after step `h`, or `None` when it is zero.
    fn step_noise(&self, sched: &DiffusionSchedule, h: usize, shape: &[usize], base: f64, seed: u64) -> Option<Tensor> {
        let sigma = sched.noise_std(h, base);
        if sigma <= 0.0 {
            return None;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, h as u64));
        let normal = Normal::new(0.0, sigma).expect("valid std");
        let n = shape.iter().product();
        Some(Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape"))
    }

    /// Refinement inside a graph so gradients reach `cond`.
    ///
    /// Only the first `real_steps` steps call the producer; the remaining
    /// steps keep blending the last prediction, which is where the full
    /// sampler would converge if predictions stopped changing. Noise after
    /// every step except the last is drawn from `seed`, so two calls with
    /// the same seed share it.
    pub fn sample_in_graph(
        &self,
        g: &mut Graph<'_>,
        cond: Var,
        z: &Tensor,
        real_steps: usize,
        seed: u64,
    ) -> Result<Var> {
        let e_n = self.encode_noise(g, z)?;
        let mut s = g.constant(z.clone());
        let Some(sched) = self.schedule.clone() else {
            let e_h = self.encode_step(g, 0)?;
            return self.predict_p(g, cond, e_h, e_n, s);
        };
        let mut p = None;
        for h in 1..=sched.steps {
            if h <= real_steps.max(1) {
                let e_h = self.encode_step(g, h)?;
                p = Some(self.predict_p(g, cond, e_h, e_n, s)?);
            }
            let a = sched.alpha(h);
            let pa = g.scale(p.expect("first step always predicts"), a);
            let sa = g.scale(s, 1.0 - a);
            s = g.add(pa, sa)?;
            if h < sched.steps {
                if let Some(noise) = self.step_noise(&sched, h, z.shape(), self.cfg.diffusion.noise_std, seed) {
                    let n = g.constant(noise);
                    s = g.add(s, n)?;
                }
            }
        }
        Ok(s)
    }

    /// Predicted frame count for a conditioning embedding.
    pub fn predict_length(&self, store: &ParamStore, cond: &Embedding, m: Modality) -> Result<usize> {
        let mut g = Graph::with_params(store);
        let c = g.constant(Tensor::vector(cond.values().to_vec()));
        let out = self.length_head(m).forward(&mut g, c)?;
        let log_len = g.value(out).data()[0];
        if !log_len.is_finite() {
            return Err(SignError::Generation(format!("length predictor returned {log_len}")));
        }
        Ok(length_from_log(log_len, self.cfg.model.max_len))
    }

    /// Conditioning embedding from raw features.
    pub fn embed(&self, store: &ParamStore, feats: &Tensor, m: Modality) -> Result<Embedding> {
        let mut g = Graph::with_params(store);
        let v = self.encode_condition(&mut g, feats, m)?;
        Ok(Embedding::raw(g.value(v).data().to_vec()))
    }

    /// Pseudo-audio embedding `M(e_t)`.
    pub fn pseudo_audio(&self, store: &ParamStore, e_t: &Embedding) -> Result<Embedding> {
        let mut g = Graph::with_params(store);
        let c = g.constant(Tensor::vector(e_t.values().to_vec()));
        let v = self.map_text_to_audio(&mut g, c)?;
        Ok(Embedding::raw(g.value(v).data().to_vec()))
    }

    /// One run of the refinement sampler from `z`, returning the final state.
    pub fn refine_from(&self, store: &ParamStore, cond: &Embedding, z: &Tensor, noise_std: f64, seed: u64) -> Result<Tensor> {
        self.refine_partial(store, cond, z, noise_std, seed, self.steps())
    }

    /// The sampler stopped after `upto` of its steps. Noise follows every
    /// step except the last step of the full schedule.
    pub fn refine_partial(
        &self,
        store: &ParamStore,
        cond: &Embedding,
        z: &Tensor,
        noise_std: f64,
        seed: u64,
        upto: usize,
    ) -> Result<Tensor> {
        let mut g = Graph::with_params(store);
        let c = g.constant(Tensor::vector(cond.values().to_vec()));
        let e_n = self.encode_noise(&mut g, z)?;
        let Some(sched) = &self.schedule else {
            let e_h = self.encode_step(&mut g, 0)?;
            let s = g.constant(z.clone());
            let p = self.predict_p(&mut g, c, e_h, e_n, s)?;
            return Ok(g.value(p).clone());
        };
        if upto > sched.steps {
            return Err(contract(format!("cannot run {upto} of {} steps", sched.steps)));
        }
        let mut s = z.clone();
        for h in 1..=upto {
            let sv = g.constant(s.clone());
            let e_h = self.encode_step(&mut g, h)?;
            let p = self.predict_p(&mut g, c, e_h, e_n, sv)?;
            let a = sched.alpha(h);
            for (x, pv) in s.data_mut().iter_mut().zip(g.value(p).data()) {
                *x = a * pv + (1.0 - a) * *x;
            }
            if h < sched.steps {
                if let Some(noise) = self.step_noise(sched, h, z.shape(), noise_std, seed) {
                    s.data_mut().iter_mut().zip(noise.data()).for_each(|(x, n)| *x += n);
                }
            }
        }
        Ok(s)
    }

    /// Full sampler: length, initial noise, `H` refinement steps.
    pub fn sample_sequence(
        &self,
        store: &ParamStore,
        cond: &Embedding,
        m: Modality,
        len_override: Option<usize>,
        gen: &GenerationConfig,
    ) -> Result<SignSequence> {
        let len = match len_override {
            Some(n) if n == 0 || n > self.cfg.model.max_len => {
                return Err(contract(format!("length {n} outside 1..={}", self.cfg.model.max_len)))
            }
            Some(n) => n,
            None => self.predict_length(store, cond, m)?,
        };
        let z = self.initial_noise(store, len, derive_seed(gen.seed, 0x2E80))?;
        let out = self.refine_from(store, cond, &z, gen.noise_injection_std, derive_seed(gen.seed, 0x5E9))?;
        if !out.all_finite() {
            return Err(SignError::Generation("sampler produced non-finite coordinates".into()));
        }
        SignSequence::from_tensor(&out, self.cfg.data.joints, self.cfg.data.coords, self.cfg.data.frame_rate)
    }

    /// Framewise mean of `num_averaged` samples with derived seeds.
    pub fn generate_averaged(
        &self,
        store: &ParamStore,
        cond: &Embedding,
        m: Modality,
        len_override: Option<usize>,
        gen: &GenerationConfig,
    ) -> Result<SignSequence> {
        if gen.num_averaged == 0 {
            return Err(contract("num_averaged must be at least 1"));
        }
        if gen.num_averaged == 1 {
            return self.sample_sequence(store, cond, m, len_override, gen);
        }
        let len = match len_override {
            Some(n) => n,
            None => self.predict_length(store, cond, m)?,
        };
        let runs: Vec<SignSequence> = (0..gen.num_averaged)
            .into_par_iter()
            .map(|i| {
                let sub = GenerationConfig {
                    seed: derive_seed(gen.seed, 0xA7E0 + i as u64),
                    num_averaged: 1,
                    ..gen.clone()
                };
                self.sample_sequence(store, cond, m, Some(len), &sub)
            })
            .collect::<Result<_>>()?;
        let mut acc = vec![0.0; runs[0].data().len()];
        for r in &runs {
            acc.iter_mut().zip(r.data()).for_each(|(a, v)| *a += v);
        }
        let n = runs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        runs[0].with_data(acc)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationConfig {
    pub num_averaged: usize,
    /// Base std of the noise injected between steps (never after the last).
    pub noise_injection_std: f64,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            num_averaged: 20,
            noise_injection_std: 0.1,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn from_config(cfg: &Config) -> Self {
        GenerationConfig {
            num_averaged: cfg.eval.num_averaged,
            noise_injection_std: cfg.diffusion.noise_std,
            seed: cfg.eval.seed,
        }
    }
}

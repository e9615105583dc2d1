//! Sign-to-token decoder used to score generated sequences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use signflow_autograd::nn::{causal_mask, AttentionBlock, CrossAttentionBlock, LayerNorm, Linear};
use signflow_autograd::{Adam, Graph, ParamId, ParamStore, Tensor, Var};

use crate::config::Config;
use crate::encoders::positional_encoding;
use crate::error::{contract, Result};
use crate::model::round_store_to_f32;
use crate::sign::SignSequence;

#[derive(Clone, Debug)]
pub struct BackTranslator {
    pub cfg: Config,
    pub params: ParamStore,
    frame_in: Linear,
    encoder: Vec<AttentionBlock>,
    embed: ParamId,
    decoder: Vec<CrossAttentionBlock>,
    norm: LayerNorm,
    out: Linear,
    dim: usize,
}

impl BackTranslator {
    /// Token ids `0..vocab`, then the end marker, then the start marker.
    pub fn end_token(&self) -> usize {
        self.cfg.data.vocab_size
    }

    fn start_token(&self) -> usize {
        self.cfg.data.vocab_size + 1
    }

    pub fn new(cfg: &Config, seed: u64) -> Result<Self> {
        let e = &cfg.eval;
        if e.bt_heads == 0 || e.bt_dim % e.bt_heads != 0 || e.bt_dim % 2 != 0 {
            return Err(contract(format!("back-translator dim {} vs heads {}", e.bt_dim, e.bt_heads)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = cfg.data.joints * cfg.data.coords;
        let v = cfg.data.vocab_size;
        let frame_in = Linear::new(&mut store, "bt.frame_in", w, e.bt_dim, &mut rng)?;
        let encoder = (0..2)
            .map(|i| AttentionBlock::new(&mut store, &format!("bt.enc{i}"), e.bt_dim, e.bt_heads, e.bt_hidden, &mut rng))
            .collect::<std::result::Result<_, _>>()?;
        let embed = store.add(
            "bt.embed",
            signflow_autograd::nn::normal_tensor(&[v + 2, e.bt_dim], 1.0, &mut rng),
        )?;
        let decoder = (0..2)
            .map(|i| CrossAttentionBlock::new(&mut store, &format!("bt.dec{i}"), e.bt_dim, e.bt_heads, e.bt_hidden, &mut rng))
            .collect::<std::result::Result<_, _>>()?;
        let norm = LayerNorm::new(&mut store, "bt.norm", e.bt_dim)?;
        let out = Linear::new(&mut store, "bt.out", e.bt_dim, v + 1, &mut rng)?;
        round_store_to_f32(&mut store);
        Ok(BackTranslator {
            cfg: cfg.clone(),
            params: store,
            frame_in,
            encoder,
            embed,
            decoder,
            norm,
            out,
            dim: e.bt_dim,
        })
    }

    fn encode(&self, g: &mut Graph<'_>, frames: &Tensor) -> Result<Var> {
        let x = g.constant(frames.clone());
        let h = self.frame_in.forward(g, x)?;
        let pe = g.constant(positional_encoding(frames.shape()[0], self.dim)?);
        let mut h = g.add(h, pe)?;
        for b in &self.encoder {
            h = b.forward(g, h, None)?;
        }
        Ok(h)
    }

    /// Logits `[len(prefix), vocab + 1]` for every prefix position.
    fn decode(&self, g: &mut Graph<'_>, memory: Var, prefix: &[usize]) -> Result<Var> {
        let table = g.param(self.embed);
        let x = g.gather_rows(table, prefix)?;
        let pe = g.constant(positional_encoding(prefix.len(), self.dim)?);
        let mut x = g.add(x, pe)?;
        let mask = causal_mask(prefix.len())?;
        for b in &self.decoder {
            x = b.forward(g, x, memory, &mask)?;
        }
        let x = self.norm.forward(g, x)?;
        Ok(self.out.forward(g, x)?)
    }

    /// Teacher-forced cross entropy of `tokens` followed by the end marker.
    pub fn loss(&self, g: &mut Graph<'_>, frames: &Tensor, tokens: &[usize]) -> Result<Var> {
        let memory = self.encode(g, frames)?;
        let mut prefix = vec![self.start_token()];
        prefix.extend_from_slice(tokens);
        let mut targets = tokens.to_vec();
        targets.push(self.end_token());
        let logits = self.decode(g, memory, &prefix)?;
        Ok(g.cross_entropy(logits, &targets)?)
    }

    /// Greedy decoding; stops at the end marker or `bt_max_tokens`.
    pub fn translate(&self, s: &SignSequence) -> Result<Vec<usize>> {
        let mut g = Graph::with_params(&self.params);
        let frames = s.to_tensor();
        let memory = self.encode(&mut g, &frames)?;
        let mut prefix = vec![self.start_token()];
        let mut out = Vec::new();
        for _ in 0..self.cfg.eval.bt_max_tokens {
            let logits = self.decode(&mut g, memory, &prefix)?;
            let last = g.value(logits).row(prefix.len() - 1);
            let next = last
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .expect("non-empty logits");
            if next == self.end_token() {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }

    /// Trains on `(normalized sequence, tokens)` pairs with Gaussian
    /// coordinate jitter of std `bt_noise` as augmentation.
    pub fn fit(&mut self, data: &[(SignSequence, Vec<usize>)], seed: u64, mut on_epoch: impl FnMut(usize, f64)) -> Result<()> {
        if data.is_empty() {
            return Err(contract("back-translator needs training data"));
        }
        let ids: Vec<ParamId> = self.params.ids().collect();
        let mut adam = Adam::new(&self.params, ids.clone(), 2e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.cfg.eval.bt_noise;
        let batch = 16;
        for epoch in 0..self.cfg.eval.bt_epochs {
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(batch) {
                let mut g = Graph::with_params(&self.params);
                let mut terms = Vec::with_capacity(chunk.len());
                for &i in chunk {
                    let (seq, toks) = &data[i];
                    let mut frames = seq.to_tensor();
                    if noise > 0.0 {
                        let normal = Normal::new(0.0, noise * rng.random::<f64>()).expect("valid std");
                        frames.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
                    }
                    terms.push(self.loss(&mut g, &frames, toks)?);
                }
                let mut l = terms[0];
                for &t in &terms[1..] {
                    l = g.add(l, t)?;
                }
                let l = g.scale(l, 1.0 / terms.len() as f64);
                total += g.value(l).data()[0] * chunk.len() as f64;
                let mut grads = g.backward(l)?.param_grads(&g);
                drop(g);
                grads.fill_missing(&self.params, &ids);
                grads.clip_global_norm(1.0);
                adam.step(&mut self.params, &grads)?;
                round_store_to_f32(&mut self.params);
            }
            on_epoch(epoch, total / data.len() as f64);
        }
        Ok(())
    }

    /// Fraction of sequences decoded to exactly their tokens.
    pub fn exact_accuracy(&self, data: &[(SignSequence, Vec<usize>)]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0;
        for (s, t) in data {
            if &self.translate(s)? == t {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    /// Re-binds a parameter store loaded from disk.
    pub fn with_params(mut self, params: ParamStore) -> Result<Self> {
        if params.len() != self.params.len()
            || self.params.iter().zip(params.iter()).any(|(a, b)| a.1 != b.1 || a.2.shape() != b.2.shape())
        {
            return Err(contract("back-translator parameters do not match the configuration"));
        }
        self.params = params;
        Ok(self)
    }
}

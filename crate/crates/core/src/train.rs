//! Joint training: diffusion regression, length prediction, binding and
//! warmup-gated consistency losses, one Adam step per minibatch.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use signflow_autograd::{Adam, EmaState, Graph, ParamStore, Tensor, Var};

use crate::binding::{info_nce_loss, triadic_loss, Pair};
use crate::data::{derive_seed, Corpus, Normalizer};
use crate::ecl::{ecl_total_graph, ecl_triplet_loss, ecl_unpaired_loss, EclDraw, LossReport};
use crate::error::{contract, Result, SignError};
use crate::features::extract_text_features;
use crate::model::{round_store_to_f32, SignModel};

/// A corpus sample with features and normalized keypoints ready for the graph.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub text: Tensor,
    pub audio: Option<Tensor>,
    /// Normalized `[T, J*C]` keypoints.
    pub sign: Tensor,
}

pub fn prepare(corpus: &Corpus, ids: &[usize], norm: &Normalizer, model: &SignModel) -> Result<Vec<Prepared>> {
    let cfg = &model.cfg;
    ids.iter()
        .map(|&id| {
            let s = corpus.get(id);
            Ok(Prepared {
                id,
                tokens: s.tokens.ids().to_vec(),
                text: extract_text_features(&s.tokens, cfg.model.text_feature_dim, cfg.data.feature_seed)?,
                audio: s.audio.as_ref().map(|a| a.frames.clone()),
                sign: norm.apply(&s.sign).to_tensor(),
            })
        })
        .collect()
}

fn mix(a: &Tensor, b: &Tensor, w: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| w * x + (1.0 - w) * y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// Diffusion regression at step `h` for one conditioning stream.
///
/// The sampler blends predictions into the state with weights that sum to
/// `1 - c_H`, where `c_H = prod (1 - alpha_j)` is the weight that stays on
/// the initial sequence `z`. The regression target is the anchor
/// `q = (s0 - c_H z) / (1 - c_H)`, the constant prediction that makes the
/// sampler land exactly on `s0`. The state fed to step `h > 1` is what the
/// sampler would hold if every earlier step had predicted the model's own
/// first-step output `p1`: `c_{h-1} z + (1 - c_{h-1}) p1`, plus the
/// per-step noise. Later steps thus learn to correct the model's estimate
/// rather than copy the answer. `p1` stays on the tape, so the loss is an
/// ordinary differentiable function of the condition and the parameters.
/// With `H = 0` the producer regresses `s0` in a single pass from `z`.
pub fn diffusion_loss(
    model: &SignModel,
    g: &mut Graph<'_>,
    cond: Var,
    e_n: Var,
    s0: &Tensor,
    z: &Tensor,
    h: usize,
    noise_seed: u64,
) -> Result<Var> {
    let Some(sched) = &model.schedule else {
        let e_h = model.encode_step(g, 0)?;
        let state = g.constant(z.clone());
        let p = model.predict_p(g, cond, e_h, e_n, state)?;
        let target = g.constant(s0.clone());
        return Ok(g.mse(p, target)?);
    };
    if h == 0 || h > sched.steps {
        return Err(contract(format!("training step {h} outside 1..={}", sched.steps)));
    }
    let c_end = sched.keep(1, sched.steps);
    let q = mix(s0, z, 1.0 / (1.0 - c_end));
    let start = g.constant(z.clone());
    let state = if h == 1 {
        start
    } else {
        let e_1 = model.encode_step(g, 1)?;
        let p1 = model.predict_p(g, cond, e_1, e_n, start)?;
        let c_prev = sched.keep(1, h - 1);
        let guess = g.scale(p1, 1.0 - c_prev);
        let mut rest = z.clone();
        rest.data_mut().iter_mut().for_each(|v| *v *= c_prev);
        let sigma = sched.noise_std(h - 1, model.cfg.diffusion.noise_std);
        if sigma > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let normal = Normal::new(0.0, sigma).expect("valid std");
            rest.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
        }
        let rest = g.constant(rest);
        g.add(guess, rest)?
    };
    let e_h = model.encode_step(g, h)?;
    let p = model.predict_p(g, cond, e_h, e_n, state)?;
    let target = g.constant(q);
    Ok(g.mse(p, target)?)
}

fn mean_of(g: &mut Graph<'_>, vars: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = vars.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &v in rest {
        acc = g.add(acc, v)?;
    }
    Ok(Some(g.scale(acc, 1.0 / vars.len() as f64)))
}

fn value(g: &Graph<'_>, v: Option<Var>) -> f64 {
    v.map_or(0.0, |v| g.value(v).data()[0])
}

/// Optimizer, EMA and counters around a model.
pub struct Trainer {
    pub model: SignModel,
    pub adam: Adam,
    pub ema: EmaState,
    pub epoch: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: SignModel) -> Result<Self> {
        let adam = Adam::new(&model.params, model.trainable(), model.cfg.train.lr);
        let ema = EmaState::new(&model.params, model.cfg.train.ema_decay)?;
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(model.cfg.train.seed, 0x7A11));
        Ok(Trainer {
            model,
            adam,
            ema,
            epoch: 0,
            rng,
        })
    }

    /// Parameters with the EMA shadow substituted.
    pub fn ema_params(&self) -> Result<ParamStore> {
        let mut p = self.model.params.clone();
        self.ema.write_to(&mut p)?;
        Ok(p)
    }

    /// One pass over `data` in shuffled minibatches; returns the epoch mean.
    pub fn train_epoch(&mut self, data: &[Prepared]) -> Result<LossReport> {
        if data.is_empty() {
            return Err(contract("training needs at least one sample"));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let bs = self.model.cfg.train.batch_size;
        let mut batches: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        let mut sum = LossReport::default();
        for b in &batches {
            let refs: Vec<&Prepared> = b.iter().map(|&i| &data[i]).collect();
            let r = self.batch_step(&refs)?;
            sum.l_d += r.l_d;
            sum.l_ecl += r.l_ecl;
            sum.l_nce += r.l_nce;
            sum.total += r.total;
            sum.mapping_aux += r.mapping_aux;
            for (p, v) in r.pairs {
                *sum.pairs.entry(p).or_insert(0.0) += v;
            }
        }
        let n = batches.len() as f64;
        sum.l_d /= n;
        sum.l_ecl /= n;
        sum.l_nce /= n;
        sum.total /= n;
        sum.mapping_aux /= n;
        sum.pairs.values_mut().for_each(|v| *v /= n);
        sum.epoch = self.epoch;
        self.epoch += 1;
        Ok(sum)
    }

    pub fn batch_step(&mut self, batch: &[&Prepared]) -> Result<LossReport> {
        let model = &self.model;
        let cfg = &model.cfg;
        let warm = self.epoch >= cfg.ecl.warmup_epochs;
        let use_ecl = warm && cfg.ecl.lambda_ecl > 0.0;
        // With no weight on generation, only the binding terms are built.
        let diffuse = cfg.ecl.lambda_diffusion > 0.0 || use_ecl;
        let steps = model.steps();
        let store = &model.params;
        let mut g = Graph::with_params(store);

        let mut d_terms = Vec::new();
        let mut len_terms = Vec::new();
        let mut paired = Vec::new();
        let mut unpaired = Vec::new();
        let mut aux_terms = Vec::new();
        let (mut text_rows, mut sign_rows) = (Vec::new(), Vec::new());
        let mut audio_rows = Vec::new();
        for s in batch {
            let t_len = s.sign.shape()[0];
            let log_len = (t_len as f64).ln();
            let e_t = model.encode_text(&mut g, &s.text)?;
            let e_a = s.audio.as_ref().map(|a| model.encode_audio(&mut g, a)).transpose()?;
            let sign = g.constant(s.sign.clone());
            let e_s = model.encode_sign(&mut g, sign)?;
            text_rows.push(e_t);
            sign_rows.push(e_s);

            if let Some(e_a) = e_a {
                audio_rows.push((e_a, e_s, e_t));
            }
            if !diffuse {
                continue;
            }

            let z = model.initial_noise(store, t_len, self.rng.random())?;
            let e_n = model.encode_noise(&mut g, &z)?;
            let h = if steps == 0 { 0 } else { self.rng.random_range(1..=steps) };
            let noise_seed: u64 = self.rng.random();
            d_terms.push(diffusion_loss(model, &mut g, e_t, e_n, &s.sign, &z, h, noise_seed)?);
            let target_len = g.constant(Tensor::vector(vec![log_len]));
            let lt = model.arch.len_text.forward(&mut g, e_t)?;
            len_terms.push(g.mse(lt, target_len)?);

            match e_a {
                Some(e_a) => {
                    d_terms.push(diffusion_loss(model, &mut g, e_a, e_n, &s.sign, &z, h, noise_seed)?);
                    let la = model.arch.len_audio.forward(&mut g, e_a)?;
                    len_terms.push(g.mse(la, target_len)?);
                    let t_fixed = g.detach(e_t);
                    let a_fixed = g.detach(e_a);
                    let mapped = model.map_text_to_audio(&mut g, t_fixed)?;
                    let diff = g.sub(mapped, a_fixed)?;
                    aux_terms.push(g.l2_norm(diff));
                }
                None if warm => {
                    // Audio stream on pseudo-audio; the mapping network is
                    // trained only by its own objectives, hence the detach.
                    let mapped = model.map_text_to_audio(&mut g, e_t)?;
                    let pseudo = g.detach(mapped);
                    d_terms.push(diffusion_loss(model, &mut g, pseudo, e_n, &s.sign, &z, h, noise_seed)?);
                }
                None => {}
            }

            if use_ecl {
                let draw = EclDraw {
                    z: &z,
                    seed: self.rng.random(),
                };
                match e_a {
                    Some(e_a) => paired.push(ecl_triplet_loss(model, &mut g, e_t, e_a, &draw)?),
                    None => unpaired.push(ecl_unpaired_loss(model, &mut g, e_t, &draw)?),
                }
            }
        }

        let l_d = match (mean_of(&mut g, &d_terms)?, mean_of(&mut g, &len_terms)?) {
            (Some(d), Some(len)) => {
                let len_w = g.scale(len, cfg.diffusion.length_weight);
                Some(g.add(d, len_w)?)
            }
            _ => None,
        };

        let tau = cfg.binding.temperature;
        let sym = cfg.binding.symmetric;
        let mut terms = BTreeMap::new();
        for &pair in &cfg.binding.pairs {
            let (a, b) = match pair {
                Pair::TextSign => (text_rows.clone(), sign_rows.clone()),
                Pair::TextAudio => audio_rows.iter().map(|r| (r.2, r.0)).unzip(),
                Pair::AudioSign => audio_rows.iter().map(|r| (r.0, r.1)).unzip(),
            };
            if a.len() < 2 {
                continue;
            }
            let a = g.concat_rows(&a)?;
            let a = g.normalize_rows(a)?;
            let b = g.concat_rows(&b)?;
            let b = g.normalize_rows(b)?;
            terms.insert(pair, info_nce_loss(&mut g, a, b, tau, sym)?);
        }
        let l_nce = if terms.is_empty() { None } else { Some(triadic_loss(&mut g, &terms)?) };
        let l_ecl = if use_ecl { ecl_total_graph(&mut g, &paired, &unpaired)? } else { None };
        let aux = mean_of(&mut g, &aux_terms)?;

        let mut report = crate::ecl::total_loss(value(&g, l_d), value(&g, l_ecl), value(&g, l_nce), &cfg.ecl)?;
        report.mapping_aux = value(&g, aux);
        report.epoch = self.epoch;
        for (p, v) in &terms {
            report.pairs.insert(*p, g.value(*v).data()[0]);
        }
        if !report.mapping_aux.is_finite() {
            return Err(SignError::Training("mapping_aux is not finite".into()));
        }

        let mut objective = None;
        for (v, w) in [(l_d, cfg.ecl.lambda_diffusion), (l_ecl, cfg.ecl.lambda_ecl), (l_nce, cfg.ecl.lambda_nce), (aux, 1.0)] {
            if let Some(v) = v {
                let wv = g.scale(v, w);
                objective = Some(match objective {
                    Some(o) => g.add(o, wv)?,
                    None => wv,
                });
            }
        }
        let objective = objective.ok_or_else(|| contract("batch has no active loss term"))?;
        let mut grads = g.backward(objective)?.param_grads(&g);
        drop(g);
        let trainable = self.adam.params().to_vec();
        grads.fill_missing(&self.model.params, &trainable);
        if !grads.all_finite() {
            return Err(SignError::Training("gradients are not finite".into()));
        }
        if cfg.train.clip_norm > 0.0 {
            grads.clip_global_norm(cfg.train.clip_norm);
        }
        self.adam.step(&mut self.model.params, &grads)?;
        round_store_to_f32(&mut self.model.params);
        let n = self.adam.step_count() as f64;
        let decay = self.ema.decay.min((1.0 + n) / (10.0 + n));
        self.ema.update_with_decay(&self.model.params, decay)?;
        self.adam.round_to_f32();
        self.ema.round_to_f32();
        Ok(report)
    }
}

/// Tab-separated training log line.
pub fn log_line(r: &LossReport, wall_secs: f64) -> String {
    format!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
        r.epoch, r.l_d, r.l_ecl, r.l_nce, r.total, wall_secs
    )
}

pub const LOG_HEADER: &str = "epoch\tl_d\tl_ecl\tl_nce\ttotal\twall_secs";

/// Fits the normalizer and first pose on the training split, then trains for
/// `cfg.train.epochs` epochs (or until the time budget runs out).
pub fn train_model(
    corpus: &Corpus,
    model: SignModel,
    mut on_epoch: impl FnMut(&LossReport, f64),
) -> Result<Trainer> {
    let norm = Normalizer::fit(corpus.train_samples().map(|s| &s.sign))?;
    let mut model = model;
    model.set_normalizer(&norm)?;
    // The stored copy is f32-rounded; train against exactly what is saved.
    let norm = model.normalizer(&model.params);
    let pose = corpus.mean_first_pose(&corpus.split.train, &norm);
    model.set_first_pose(&pose)?;
    let data = prepare(corpus, &corpus.split.train, &norm, &model)?;
    let budget = model.cfg.train.time_budget_secs;
    let epochs = model.cfg.train.epochs;
    let mut trainer = Trainer::new(model)?;
    let start = Instant::now();
    for _ in 0..epochs {
        let r = trainer.train_epoch(&data)?;
        let wall = start.elapsed().as_secs_f64();
        on_epoch(&r, wall);
        if budget > 0 && wall > budget as f64 {
            break;
        }
    }
    Ok(trainer)
}

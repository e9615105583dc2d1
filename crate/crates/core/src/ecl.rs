//! Embedding-consistency losses and the combined training objective.

use std::collections::BTreeMap;

use signflow_autograd::{Graph, Tensor, Var};

use crate::binding::Pair;
use crate::config::EclConfig;
use crate::error::{contract, Result, SignError};
use crate::model::SignModel;

/// `||a - b||_2`.
pub fn embedding_error(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("embedding lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// Shared inputs of one consistency comparison: the initial sequence and
/// the seed of the per-step noise, identical for both streams.
pub struct EclDraw<'a> {
    pub z: &'a Tensor,
    pub seed: u64,
}

fn sign_embedding_of(model: &SignModel, g: &mut Graph<'_>, seq: Var, freeze: bool) -> Result<Var> {
    if freeze {
        g.frozen(|g| model.encode_sign(g, seq))
    } else {
        model.encode_sign(g, seq)
    }
}

/// `||E_s(G(e_a)) - E_s(G(e_t))||_2` with both generations differentiable.
pub fn ecl_triplet_loss(model: &SignModel, g: &mut Graph<'_>, e_t: Var, e_a: Var, draw: &EclDraw<'_>) -> Result<Var> {
    let cfg = &model.cfg.ecl;
    let s_a = model.sample_in_graph(g, e_a, draw.z, cfg.sampler_steps, draw.seed)?;
    let s_t = model.sample_in_graph(g, e_t, draw.z, cfg.sampler_steps, draw.seed)?;
    let h_a = sign_embedding_of(model, g, s_a, cfg.freeze_sign_encoder)?;
    let h_t = sign_embedding_of(model, g, s_t, cfg.freeze_sign_encoder)?;
    let d = g.sub(h_a, h_t)?;
    Ok(g.l2_norm(d))
}

/// Pseudo-audio consistency for a text-only sample.
///
/// The default compares `E_s(G(M(e_t)))` with `E_s(G(e_t))`. With
/// `printed_order` the mapping network is instead applied to the sign
/// embedding of the text stream, `M(E_s(G(e_t)))`, since `M` acts on
/// embeddings and cannot take a keypoint sequence.
pub fn ecl_unpaired_loss(model: &SignModel, g: &mut Graph<'_>, e_t: Var, draw: &EclDraw<'_>) -> Result<Var> {
    let cfg = &model.cfg.ecl;
    let s_t = model.sample_in_graph(g, e_t, draw.z, cfg.sampler_steps, draw.seed)?;
    let h_t = sign_embedding_of(model, g, s_t, cfg.freeze_sign_encoder)?;
    let other = if cfg.printed_order {
        model.map_text_to_audio(g, h_t)?
    } else {
        let pseudo = model.map_text_to_audio(g, e_t)?;
        let s_p = model.sample_in_graph(g, pseudo, draw.z, cfg.sampler_steps, draw.seed)?;
        sign_embedding_of(model, g, s_p, cfg.freeze_sign_encoder)?
    };
    let d = g.sub(other, h_t)?;
    Ok(g.l2_norm(d))
}

/// Mean paired term plus mean unpaired term; zero during warmup.
pub fn ecl_total(epoch: usize, cfg: &EclConfig, paired: &[f64], unpaired: &[f64]) -> f64 {
    if epoch < cfg.warmup_epochs {
        return 0.0;
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    mean(paired) + mean(unpaired)
}

/// Graph version of [`ecl_total`] over per-sample loss nodes.
pub fn ecl_total_graph(g: &mut Graph<'_>, paired: &[Var], unpaired: &[Var]) -> Result<Option<Var>> {
    let mut parts = Vec::new();
    for group in [paired, unpaired] {
        if group.is_empty() {
            continue;
        }
        let mut acc = group[0];
        for &v in &group[1..] {
            acc = g.add(acc, v)?;
        }
        parts.push(g.scale(acc, 1.0 / group.len() as f64));
    }
    Ok(match parts.as_slice() {
        [] => None,
        [a] => Some(*a),
        [a, b] => Some(g.add(*a, *b)?),
        _ => unreachable!(),
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub epoch: usize,
    pub l_d: f64,
    pub l_ecl: f64,
    pub l_nce: f64,
    pub total: f64,
    pub pairs: BTreeMap<Pair, f64>,
    /// Regression of `M(e_t)` onto `e_a`; trains the mapping network only
    /// and is kept out of `total`.
    pub mapping_aux: f64,
}

/// `lambda1 * l_d + lambda2 * l_ecl + lambda3 * l_nce`.
pub fn total_loss(l_d: f64, l_ecl: f64, l_nce: f64, cfg: &EclConfig) -> Result<LossReport> {
    for (name, v) in [("l_d", l_d), ("l_ecl", l_ecl), ("l_nce", l_nce)] {
        if !v.is_finite() {
            return Err(SignError::Training(format!("{name} is not finite ({v})")));
        }
    }
    Ok(LossReport {
        l_d,
        l_ecl,
        l_nce,
        total: cfg.lambda_diffusion * l_d + cfg.lambda_ecl * l_ecl + cfg.lambda_nce * l_nce,
        ..LossReport::default()
    })
}

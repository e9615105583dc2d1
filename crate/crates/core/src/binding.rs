//! Contrastive alignment of text, audio and sign embeddings.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use signflow_autograd::{Graph, Var};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pair {
    #[serde(rename = "text-sign")]
    TextSign,
    #[serde(rename = "text-audio")]
    TextAudio,
    #[serde(rename = "audio-sign")]
    AudioSign,
}

impl Pair {
    pub fn label(self) -> &'static str {
        match self {
            Pair::TextSign => "text_sign",
            Pair::TextAudio => "text_audio",
            Pair::AudioSign => "audio_sign",
        }
    }
}

/// Dot product of two unit vectors.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(contract(format!("similarity of lengths {} and {}", a.len(), b.len())));
    }
    for v in [a, b] {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-6 {
            return Err(contract(format!("similarity expects unit vectors, got norm {n}")));
        }
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

/// InfoNCE over index-aligned `[M, d]` unit-norm rows.
///
/// Row `m` of `anchors` must pick row `m` of `positives` out of the batch.
/// With `symmetric` the positives-to-anchors direction is averaged in.
pub fn info_nce_loss(g: &mut Graph<'_>, anchors: Var, positives: Var, tau: f64, symmetric: bool) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(contract(format!("temperature {tau} must be positive")));
    }
    let (sa, sp) = (g.shape(anchors).to_vec(), g.shape(positives).to_vec());
    if sa.len() != 2 || sa != sp {
        return Err(contract(format!("anchor shape {sa:?} and positive shape {sp:?} differ")));
    }
    if sa[0] < 2 {
        return Err(contract("InfoNCE needs at least two pairs so negatives exist"));
    }
    let targets: Vec<usize> = (0..sa[0]).collect();
    let sims = g.matmul_t(anchors, positives)?;
    let logits = g.scale(sims, 1.0 / tau);
    let forward = g.cross_entropy(logits, &targets)?;
    if !symmetric {
        return Ok(forward);
    }
    let back_logits = g.transpose(logits)?;
    let backward = g.cross_entropy(back_logits, &targets)?;
    let sum = g.add(forward, backward)?;
    Ok(g.scale(sum, 0.5))
}

/// Sum of the per-pair InfoNCE terms; pairs absent from `terms` add nothing.
pub fn triadic_loss(g: &mut Graph<'_>, terms: &BTreeMap<Pair, Var>) -> Result<Var> {
    let mut it = terms.values();
    let first = *it
        .next()
        .ok_or_else(|| contract("triadic loss needs at least one active pair"))?;
    it.try_fold(first, |acc, &v| Ok(g.add(acc, v)?))
}

/// Mean matched cosine minus mean mismatched cosine.
pub fn emergent_alignment_score(text: &[Vec<f64>], audio: &[Vec<f64>]) -> Result<f64> {
    if text.len() != audio.len() {
        return Err(contract("text and audio embedding counts differ"));
    }
    let n = text.len();
    if n < 2 {
        return Err(contract("alignment score needs at least two items"));
    }
    let (mut matched, mut mismatched) = (0.0, 0.0);
    for (i, t) in text.iter().enumerate() {
        for (j, a) in audio.iter().enumerate() {
            let c = cosine_sim(t, a)?;
            if i == j {
                matched += c;
            } else {
                mismatched += c;
            }
        }
    }
    Ok(matched / n as f64 - mismatched / (n * (n - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use signflow_autograd::Tensor;

    fn rows(g: &mut Graph<'_>, r: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(r).unwrap())
    }

    #[test]
    fn cosine_cases() {
        let a = [1.0, 0.0];
        assert_eq!(cosine_sim(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_sim(&a, &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&a, &[-1.0, 0.0]).unwrap(), -1.0);
        assert!(cosine_sim(&a, &[2.0, 0.0]).is_err());
    }

    #[test]
    fn two_item_closed_form() {
        let mut g = Graph::new();
        let a = rows(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = info_nce_loss(&mut g, a, a, 1.0, false).unwrap();
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((g.value(l).item().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn uniform_similarities_give_log_batch() {
        let mut g = Graph::new();
        let e = vec![vec![1.0, 0.0]; 4];
        let a = rows(&mut g, &e);
        let l = info_nce_loss(&mut g, a, a, 0.07, true).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argument_checks() {
        let mut g = Graph::new();
        let a = rows(&mut g, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(info_nce_loss(&mut g, a, a, 0.0, true).is_err());
        let one = rows(&mut g, &[vec![1.0, 0.0]]);
        assert!(info_nce_loss(&mut g, one, one, 1.0, true).is_err());
        assert!(triadic_loss(&mut g, &BTreeMap::new()).is_err());
    }

    #[test]
    fn triadic_sums_terms() {
        let mut g = Graph::new();
        let mut terms = BTreeMap::new();
        for p in [Pair::TextSign, Pair::TextAudio, Pair::AudioSign] {
            terms.insert(p, g.constant(Tensor::scalar(0.5)));
        }
        let l = triadic_loss(&mut g, &terms).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 1.5);
    }

    #[test]
    fn anti_aligned_mismatches_score_near_two() {
        let t = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        assert_eq!(emergent_alignment_score(&t, &t).unwrap(), 2.0);
        assert!(emergent_alignment_score(&t[..1], &t[..1]).is_err());
    }
}

//! Keypoint and back-translation metrics.

use std::collections::HashMap;

use crate::error::{contract, Result};
use crate::sign::SignSequence;

/// Frame `i` of the output takes the input frame whose span covers the
/// centre of output slot `i`.
pub fn resample(s: &SignSequence, len: usize) -> Result<SignSequence> {
    if len == 0 {
        return Err(contract("cannot resample to zero frames"));
    }
    let src = s.frames();
    let mut data = Vec::with_capacity(len * s.frame_width());
    for i in 0..len {
        let j = (((2 * i + 1) * src) / (2 * len)).min(src - 1);
        data.extend_from_slice(s.frame(j));
    }
    SignSequence::new(len, s.joints(), s.coords(), s.frame_rate, data)
}

/// Mean squared coordinate error after resampling `pred` to `gt`'s length.
pub fn keypoint_mse(pred: &SignSequence, gt: &SignSequence) -> Result<f64> {
    if !pred.same_layout(gt) {
        return Err(contract(format!(
            "pose layouts {}x{} and {}x{} differ",
            pred.joints(),
            pred.coords(),
            gt.joints(),
            gt.coords()
        )));
    }
    let p = if pred.frames() == gt.frames() {
        pred.clone()
    } else {
        resample(pred, gt.frames())?
    };
    let se: f64 = p.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(se / gt.data().len() as f64)
}

/// Dynamic time warping with Euclidean frame cost, divided by the length of
/// the optimal path. Ties prefer the shorter path, which keeps the result
/// symmetric in its arguments.
pub fn dtw_distance(a: &SignSequence, b: &SignSequence) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(contract("DTW over different pose layouts"));
    }
    let (n, m) = (a.frames(), b.frames());
    if n == 0 || m == 0 {
        return Err(contract("DTW of an empty sequence"));
    }
    let dist = |i: usize, j: usize| -> f64 {
        a.frame(i)
            .iter()
            .zip(b.frame(j))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    // (cost, path length) per cell, row-major.
    let mut table = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = dist(i, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 && j > 0 {
                    cands.push(table[(i - 1) * m + j - 1]);
                }
                if i > 0 {
                    cands.push(table[(i - 1) * m + j]);
                }
                if j > 0 {
                    cands.push(table[i * m + j - 1]);
                }
                cands
                    .into_iter()
                    .min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)))
                    .expect("at least one predecessor")
            };
            table[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    let (cost, len) = table[n * m - 1];
    Ok(cost / len as f64)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped `n`-gram matches and hypothesis `n`-gram total.
fn clipped_precision(hyp: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

/// Cumulative BLEU-`n`: geometric mean of clipped precisions 1..=n with
/// uniform weights, times the brevity penalty `exp(1 - r/c)` when `c < r`.
///
/// An empty hypothesis scores 0. Orders for which neither side has any
/// n-grams are left out of the mean, so identical short sentences score 1.
pub fn bleu_n(hyp: &[usize], reference: &[usize], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(contract("BLEU order must be at least 1"));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for k in 1..=n {
        let (matched, total) = clipped_precision(hyp, reference, k);
        if total == 0 && reference.len() < k {
            continue;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
        orders += 1;
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    Ok(bp * (log_sum / orders as f64).exp())
}

pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1 (beta = 1).
pub fn rouge_l_f1(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(contract("ROUGE-L needs a non-empty reference"));
    }
    let l = lcs_len(hyp, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / hyp.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

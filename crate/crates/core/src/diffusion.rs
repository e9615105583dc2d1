//! Refinement schedule and the sequence-level operations of the sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};
use crate::sign::SignSequence;

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    /// `delta[h-1]` holds `delta_h` for `h = 1..=steps+1`.
    pub delta: Vec<f64>,
    /// `alpha[h-1]` holds `alpha_h` for `h = 1..=steps`.
    pub alpha: Vec<f64>,
}

/// `delta_h = min(1, 1/ln(h+1))`, `alpha_h = delta_h - delta_{h+1}`.
pub fn build_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(contract("a schedule needs at least one step"));
    }
    let delta: Vec<f64> = (1..=steps + 1)
        .map(|h| (1.0 / ((h + 1) as f64).ln()).min(1.0))
        .collect();
    let alpha = delta.windows(2).map(|w| w[0] - w[1]).collect();
    Ok(DiffusionSchedule { steps, delta, alpha })
}

impl DiffusionSchedule {
    pub fn delta(&self, h: usize) -> f64 {
        self.delta[h - 1]
    }

    pub fn alpha(&self, h: usize) -> f64 {
        self.alpha[h - 1]
    }

    /// Weight left on the starting sequence after steps `from..=to` of
    /// refinement: `prod (1 - alpha_j)`.
    pub fn keep(&self, from: usize, to: usize) -> f64 {
        (from..=to).map(|j| 1.0 - self.alpha(j)).product()
    }

    /// Noise std added after step `h`: `base * (1 - delta_{h+1})`.
    pub fn noise_std(&self, h: usize, base: f64) -> f64 {
        base * (1.0 - self.delta[h])
    }
}

fn blend(a: &SignSequence, b: &SignSequence, w: f64, op: &str) -> Result<SignSequence> {
    a.check_same_shape(b, op)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| w * x + (1.0 - w) * y)
        .collect();
    a.with_data(data)
}

/// `alpha * p + (1 - alpha) * prev`.
pub fn refine_step(p: &SignSequence, prev: &SignSequence, alpha: f64) -> Result<SignSequence> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(contract(format!("step weight {alpha} outside [0,1]")));
    }
    blend(p, prev, alpha, "refine_step")
}

/// `alpha * s0 + (1 - alpha) * s_next`.
pub fn training_target(s0: &SignSequence, s_next: &SignSequence, alpha: f64) -> Result<SignSequence> {
    blend(s0, s_next, alpha, "training_target")
}

/// Adds i.i.d. `N(0, sigma^2)` to every coordinate.
pub fn inject_noise(s: &SignSequence, sigma: f64, seed: u64) -> Result<SignSequence> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(contract(format!("noise std {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(s.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid std");
    let data = s.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    s.with_data(data)
}

/// `round(exp(log_len))` clamped to `[1, max_len]`.
pub fn length_from_log(log_len: f64, max_len: usize) -> usize {
    if log_len.is_nan() {
        return 1;
    }
    let n = log_len.exp().round();
    if n < 1.0 {
        1
    } else if n > max_len as f64 {
        max_len
    } else {
        n as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> SignSequence {
        SignSequence::new(1, 1, 1, 25.0, vec![v]).unwrap()
    }

    #[test]
    fn clamped_first_step() {
        let s = build_schedule(10).unwrap();
        assert_eq!(s.delta(1), 1.0);
        assert_eq!(s.delta.len(), 11);
        assert_eq!(s.alpha.len(), 10);
        assert!(build_schedule(0).is_err());
    }

    #[test]
    fn refine_endpoints() {
        let p = scalar(2.0);
        let prev = scalar(0.0);
        assert_eq!(refine_step(&p, &prev, 1.0).unwrap(), p);
        assert_eq!(refine_step(&p, &prev, 0.0).unwrap(), prev);
        assert_eq!(refine_step(&p, &prev, 0.5).unwrap().data(), &[1.0]);
        assert!(refine_step(&p, &prev, 1.5).is_err());
        let two = SignSequence::new(2, 1, 1, 25.0, vec![0.0, 0.0]).unwrap();
        assert!(refine_step(&p, &two, 0.5).is_err());
    }

    #[test]
    fn target_endpoints() {
        let s0 = scalar(3.0);
        let next = scalar(-1.0);
        assert_eq!(training_target(&s0, &next, 1.0).unwrap(), s0);
        assert_eq!(training_target(&s0, &next, 0.0).unwrap(), next);
    }

    #[test]
    fn noise_identity_and_determinism() {
        let s = SignSequence::new(4, 2, 2, 25.0, vec![0.5; 16]).unwrap();
        assert_eq!(inject_noise(&s, 0.0, 3).unwrap(), s);
        assert_eq!(inject_noise(&s, 0.2, 3).unwrap(), inject_noise(&s, 0.2, 3).unwrap());
        assert_ne!(inject_noise(&s, 0.2, 3).unwrap(), inject_noise(&s, 0.2, 4).unwrap());
        assert!(inject_noise(&s, -1.0, 3).is_err());
    }

    #[test]
    fn length_rounding() {
        assert_eq!(length_from_log(0.0, 64), 1);
        assert_eq!(length_from_log(12f64.ln(), 64), 12);
        assert_eq!(length_from_log((640f64).ln(), 64), 64);
        assert_eq!(length_from_log(-50.0, 64), 1);
    }
}

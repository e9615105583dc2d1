use crate::error::{Result, TensorError};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    params: Vec<ParamId>,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    /// Optimises the listed parameters with zeroed moments.
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64) -> Self {
        let first = params.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        let second = params.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            params,
            first,
            second,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    /// Restores counters and moments, e.g. from a checkpoint.
    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) -> Result<()> {
        let fits = |m: &[Vec<f64>]| {
            m.len() == self.first.len() && m.iter().zip(&self.first).all(|(a, b)| a.len() == b.len())
        };
        if !fits(&first) || !fits(&second) {
            return Err(TensorError::Contract("optimizer moments do not match parameters".into()));
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Rounds both moment arrays to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for m in self.first.iter_mut().chain(self.second.iter_mut()) {
            m.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        for &id in &self.params {
            match grads.get(id) {
                None => {
                    return Err(TensorError::Contract(format!(
                        "no gradient for parameter `{}`",
                        store.name(id)
                    )))
                }
                Some(g) if g.shape() != store.get(id).shape() => {
                    return Err(TensorError::shape("adam", g.shape(), store.get(id).shape()))
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (k, &id) in self.params.iter().enumerate() {
            let g = grads.get(id).expect("checked above").data();
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Exponential moving average of every parameter in a store.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    shadow: Vec<Tensor>,
}

impl EmaState {
    pub fn new(live: &ParamStore, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(TensorError::Contract(format!("EMA decay {decay} outside (0,1)")));
        }
        Ok(EmaState {
            decay,
            shadow: live.iter().map(|(_, _, t)| t.clone()).collect(),
        })
    }

    pub fn from_shadow(decay: f64, shadow: Vec<Tensor>) -> Self {
        EmaState { decay, shadow }
    }

    pub fn shadow(&self) -> &[Tensor] {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update(&mut self, live: &ParamStore) -> Result<()> {
        self.update_with_decay(live, self.decay)
    }

    pub fn update_with_decay(&mut self, live: &ParamStore, decay: f64) -> Result<()> {
        if live.len() != self.shadow.len() {
            return Err(TensorError::Contract(format!(
                "EMA tracks {} tensors, live store has {}",
                self.shadow.len(),
                live.len()
            )));
        }
        for ((_, name, t), s) in live.iter().zip(&self.shadow) {
            if t.shape() != s.shape() {
                return Err(TensorError::Contract(format!(
                    "EMA shadow of `{name}` has shape {:?}, live is {:?}",
                    s.shape(),
                    t.shape()
                )));
            }
        }
        for ((_, _, t), s) in live.iter().zip(self.shadow.iter_mut()) {
            for (sv, lv) in s.data_mut().iter_mut().zip(t.data()) {
                *sv = decay * *sv + (1.0 - decay) * lv;
            }
        }
        Ok(())
    }

    /// Rounds the shadow to the nearest `f32` values.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.shadow {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Copies the shadow values into a store with the same layout.
    pub fn write_to(&self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.shadow.len() {
            return Err(TensorError::Contract("EMA layout differs from store".into()));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, s) in ids.into_iter().zip(&self.shadow) {
            let dst = store.get_mut(id);
            if dst.shape() != s.shape() {
                return Err(TensorError::shape("ema write", dst.shape(), s.shape()));
            }
            dst.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }
}

//! Value types shared across the pipeline: token strings, audio feature
//! sequences, keypoint sequences and embeddings.

use signflow_autograd::Tensor;

use crate::error::{contract, Result};

/// A non-empty token string over a fixed vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextTokens {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl TextTokens {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(contract("token list is empty"));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= vocab_size) {
            return Err(contract(format!("token {bad} outside vocabulary of {vocab_size}")));
        }
        Ok(TextTokens { ids, vocab_size })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Frame-major `[frames, dim]` audio features.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureSeq {
    pub frames: Tensor,
    pub frame_rate: f64,
}

impl AudioFeatureSeq {
    pub fn new(frames: Tensor, frame_rate: f64) -> Result<Self> {
        let (n, _) = frames.dims2()?;
        if n == 0 {
            return Err(contract("audio sequence has no frames"));
        }
        if !frames.all_finite() {
            return Err(contract("audio features contain non-finite values"));
        }
        Ok(AudioFeatureSeq { frames, frame_rate })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Keypoint sequence stored frame-major, joint-minor: `data[(t*J + j)*C + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignSequence {
    frames: usize,
    joints: usize,
    coords: usize,
    pub frame_rate: f32,
    data: Vec<f64>,
}

impl SignSequence {
    pub fn new(frames: usize, joints: usize, coords: usize, frame_rate: f32, data: Vec<f64>) -> Result<Self> {
        if frames == 0 {
            return Err(contract("sign sequence needs at least one frame"));
        }
        if joints == 0 || coords == 0 {
            return Err(contract(format!("degenerate pose layout {joints}x{coords}")));
        }
        if data.len() != frames * joints * coords {
            return Err(contract(format!(
                "{} values cannot fill {frames}x{joints}x{coords}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(contract("sign sequence contains non-finite coordinates"));
        }
        Ok(SignSequence {
            frames,
            joints,
            coords,
            frame_rate,
            data,
        })
    }

    /// Builds a sequence from a `[frames, joints*coords]` tensor.
    pub fn from_tensor(t: &Tensor, joints: usize, coords: usize, frame_rate: f32) -> Result<Self> {
        let (n, w) = t.dims2()?;
        if w != joints * coords {
            return Err(contract(format!("frame width {w} is not {joints}x{coords}")));
        }
        Self::new(n, joints, coords, frame_rate, t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.frame_width()], self.data.clone()).expect("layout checked")
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    pub fn frame_width(&self) -> usize {
        self.joints * self.coords
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.frame_width();
        &self.data[t * w..(t + 1) * w]
    }

    pub fn same_layout(&self, other: &SignSequence) -> bool {
        self.joints == other.joints && self.coords == other.coords
    }

    pub(crate) fn check_same_shape(&self, other: &SignSequence, op: &str) -> Result<()> {
        if self.frames != other.frames || !self.same_layout(other) {
            return Err(contract(format!(
                "{op}: shapes {}x{}x{} and {}x{}x{} differ",
                self.frames, self.joints, self.coords, other.frames, other.joints, other.coords
            )));
        }
        Ok(())
    }

    /// Copy with the values replaced; layout unchanged.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.frames, self.joints, self.coords, self.frame_rate, data)
    }
}

/// A fixed-width embedding, either raw (conditioning form) or unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    pub fn raw(values: Vec<f64>) -> Self {
        Embedding {
            values,
            normalized: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Joint-space view with unit L2 norm.
    pub fn normalized(&self) -> Result<Self> {
        let norm = self.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(contract("cannot normalize a zero or non-finite embedding"));
        }
        Ok(Embedding {
            values: self.values.iter().map(|v| v / norm).collect(),
            normalized: true,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn token_validation() {
        assert!(TextTokens::new(vec![], 5).is_err());
        assert!(TextTokens::new(vec![0, 5], 5).is_err());
        assert_eq!(TextTokens::new(vec![4, 0], 5).unwrap().len(), 2);
    }

    #[test]
    fn sequence_layout_checks() {
        assert!(SignSequence::new(0, 2, 2, 25.0, vec![]).is_err());
        assert!(SignSequence::new(1, 2, 2, 25.0, vec![0.0; 3]).is_err());
        assert!(SignSequence::new(1, 1, 2, 25.0, vec![0.0, f64::NAN]).is_err());
        let s = SignSequence::new(2, 2, 2, 25.0, (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(s.frame(1), &[4.0, 5.0, 6.0, 7.0]);
        let back = SignSequence::from_tensor(&s.to_tensor(), 2, 2, 25.0).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn normalized_embedding_has_unit_norm() {
        let e = Embedding::raw(vec![3.0, -4.0, 12.0]).normalized().unwrap();
        let n: f64 = e.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert!(e.is_normalized());
        assert!(Embedding::raw(vec![0.0; 4]).normalized().is_err());
    }
}

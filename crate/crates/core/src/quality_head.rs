//! Two-layer MLP regressing a per-frame quality score from the visual tokens.

use candle_core::Tensor;

use crate::encoders::{EmbeddingSequence, Segment};
use crate::error::{Error, Result};
use crate::nn::{GradMask, Linear, ParamBuilder, ParamGroup};

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QualityScore {
    /// Mean of the clamped per-frame scores.
    pub value: f64,
    /// Raw per-frame regressions.
    pub per_frame: Vec<f64>,
}

impl QualityScore {
    pub fn from_frames(per_frame: Vec<f64>) -> Result<Self> {
        if per_frame.is_empty() {
            return Err(Error::Input("no frame scores to aggregate".into()));
        }
        if per_frame.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite frame score".into()));
        }
        let value = per_frame.iter().map(|s| s.clamp(SCORE_MIN, SCORE_MAX)).sum::<f64>() / per_frame.len() as f64;
        Ok(Self { value, per_frame })
    }

    /// Unclamped mean, the quantity the losses see.
    pub fn raw(&self) -> f64 {
        self.per_frame.iter().sum::<f64>() / self.per_frame.len() as f64
    }
}

/// Human-readable quality band on the 1–5 scale.
pub fn quality_band(score: f64) -> &'static str {
    match score {
        s if s < 1.5 => "bad",
        s if s < 2.5 => "poor",
        s if s < 3.5 => "fair",
        s if s < 4.5 => "good",
        _ => "excellent",
    }
}

#[derive(Debug, Clone)]
pub struct QualityHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl QualityHead {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        let g = ParamGroup::QualityHead;
        Ok(Self {
            fc1: Linear::new(pb, "head.fc1", g, dim, hidden)?,
            fc2: Linear::new(pb, "head.fc2", g, hidden, 1)?,
        })
    }

    /// `u` (N, T_h, D), `v` (N, T_l, D) → (N,) frame scores. Tokens are
    /// concatenated, mean-pooled, then passed through the MLP.
    pub fn forward(&self, u: &Tensor, v: &Tensor, mask: GradMask) -> Result<Tensor> {
        let x = Tensor::cat(&[u, v], 1)?.mean(1)?;
        let h = self.fc1.forward(&x, mask)?.relu()?;
        Ok(self.fc2.forward(&h, mask)?.squeeze(1)?)
    }

    pub fn score_frame(&self, u: &EmbeddingSequence, v: &EmbeddingSequence) -> Result<f64> {
        if u.segment != Segment::High || v.segment != Segment::Low {
            return Err(Error::Input("score_frame expects (HIGH, LOW) embeddings".into()));
        }
        if u.dim() != v.dim() || u.dim() != self.fc1.in_dim() {
            return Err(Error::Input(format!(
                "embedding widths {} and {} do not match the head input {}",
                u.dim(),
                v.dim(),
                self.fc1.in_dim()
            )));
        }
        let s = self.forward(&u.tokens.unsqueeze(0)?, &v.tokens.unsqueeze(0)?, GradMask::NONE)?;
        Ok(s.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[0])
    }

    pub fn score_video(&self, pairs: &[(EmbeddingSequence, EmbeddingSequence)]) -> Result<QualityScore> {
        let per_frame = pairs
            .iter()
            .map(|(u, v)| self.score_frame(u, v))
            .collect::<Result<Vec<_>>>()?;
        QualityScore::from_frames(per_frame)
    }
}

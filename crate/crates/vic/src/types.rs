//! Domain types shared across modules: impression vectors, feature
//! sequences, and the model dimension presets.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VicError};
use crate::nnet::Tensor2D;

/// Number of voice-impression dimensions.
pub const VI_DIMS: usize = 11;

/// Index of the Slow-Fast dimension (scale K), the one wired to frame count.
pub const SLOW_FAST: usize = 10;

/// Scale ids and names, A through K.
pub const SCALES: [(&str, &str); VI_DIMS] = [
    ("A", "Low-High"),
    ("B", "Masculine-Feminine"),
    ("C", "Clear-Hoarse"),
    ("D", "Calm-Restless"),
    ("E", "Powerful-Weak"),
    ("F", "Youthful-Aged"),
    ("G", "Thick-Thin"),
    ("H", "Firm-Relaxed"),
    ("I", "Dark-Bright"),
    ("J", "Cold-Warm"),
    ("K", "Slow-Fast"),
];

/// Looks up a scale index from its one-letter id.
pub fn scale_index(id: &str) -> Option<usize> {
    SCALES.iter().position(|(s, _)| *s == id)
}

/// An 11-dimensional voice-impression vector on the 1-7 perceptual scales.
///
/// Annotation values live in `[1, 7]`; modulation offsets in `[-3, +3]`
/// can push intermediate targets outside that range before clipping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImpressionVector(pub [f64; VI_DIMS]);

impl ImpressionVector {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != VI_DIMS {
            return Err(VicError::Shape(format!(
                "impression vector needs {VI_DIMS} entries, got {}",
                v.len()
            )));
        }
        let mut a = [0.0; VI_DIMS];
        a.copy_from_slice(v);
        Ok(Self(a))
    }

    /// All entries set to the same value.
    pub fn splat(v: f64) -> Self {
        Self([v; VI_DIMS])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Maps the 1-7 scale onto roughly [-1, 1]: `(v - 4) / 3`.
    pub fn normalized(&self) -> [f64; VI_DIMS] {
        let mut out = [0.0; VI_DIMS];
        for (o, v) in out.iter_mut().zip(self.0.iter()) {
            *o = (v - 4.0) / 3.0;
        }
        out
    }

    /// Clips every entry into `[lo, hi]`.
    pub fn clipped(&self, lo: f64, hi: f64) -> Self {
        let mut a = self.0;
        for v in a.iter_mut() {
            *v = v.clamp(lo, hi);
        }
        Self(a)
    }

    /// Per-dimension mean squared error against another vector.
    pub fn mse(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / VI_DIMS as f64
    }
}

/// A sequence of synthetic acoustic frames, the stand-in for audio.
///
/// Frames are rows of a `T x feat` matrix with every entry in `(-1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeq {
    frames: Tensor2D,
}

impl FeatureSeq {
    pub fn new(frames: Tensor2D) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(VicError::Usage("feature sequence must be non-empty".into()));
        }
        Ok(Self { frames })
    }

    /// Frame count `T`.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    /// Per-frame feature dimension.
    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn frames(&self) -> &Tensor2D {
        &self.frames
    }

    /// Mean over frames, the only statistic the encoder may consume.
    pub fn mean_pooled(&self) -> Vec<f64> {
        let t = self.len() as f64;
        let mut out = vec![0.0; self.dim()];
        for r in 0..self.len() {
            for (o, v) in out.iter_mut().zip(self.frame(r).iter()) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= t;
        }
        out
    }
}

/// Network dimensions. The desk preset keeps runs in the minutes range;
/// `paper_scale` restores the full-size embedding widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    /// Acoustic feature dimension (fixed by the synthetic world).
    pub feat: usize,
    /// Intermediate speaker vector `x`.
    pub x: usize,
    /// Speaker embedding `g` (style-token value dimension).
    pub g: usize,
    /// Per-frame content embedding.
    pub content: usize,
    /// Encoder hidden width.
    pub enc_hidden: usize,
    /// Decoder hidden width.
    pub dec_hidden: usize,
    /// Number of style tokens.
    pub style_tokens: usize,
    /// Control-module projection width for each of the two paths.
    pub cm_proj: usize,
    /// Noise-vector dimension for the reference-free variant.
    pub noise: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            feat: 32,
            x: 16,
            g: 16,
            content: 4,
            enc_hidden: 32,
            dec_hidden: 64,
            style_tokens: 8,
            cm_proj: 8,
            noise: 8,
        }
    }
}

impl Dims {
    /// Full-size preset: 256-dim `x`/`g`, 32-dim projections and noise.
    pub fn paper_scale() -> Self {
        Self {
            feat: 32,
            x: 256,
            g: 256,
            content: 4,
            enc_hidden: 256,
            dec_hidden: 256,
            style_tokens: 8,
            cm_proj: 32,
            noise: 32,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_maps_midpoint_to_zero() {
        let v = ImpressionVector::splat(4.0);
        assert!(v.normalized().iter().all(|&x| x == 0.0));
        let v = ImpressionVector::splat(7.0);
        assert!(v.normalized().iter().all(|&x| x == 1.0));
        let v = ImpressionVector::splat(1.0);
        assert!(v.normalized().iter().all(|&x| x == -1.0));
    }

    #[test]
    fn clipping_bounds_entries() {
        let mut a = [4.0; VI_DIMS];
        a[0] = 9.5;
        a[1] = -2.0;
        let c = ImpressionVector(a).clipped(1.0, 7.0);
        assert_eq!(c.0[0], 7.0);
        assert_eq!(c.0[1], 1.0);
        assert_eq!(c.0[2], 4.0);
    }

    #[test]
    fn mse_is_per_dimension_mean() {
        let a = ImpressionVector::splat(1.0);
        let b = ImpressionVector::splat(0.0);
        assert_eq!(a.mse(&b), 1.0);
    }

    #[test]
    fn mean_pool_averages_frames() {
        let t = Tensor2D::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let f = FeatureSeq::new(t).unwrap();
        assert_eq!(f.mean_pooled(), vec![0.5, 0.5]);
    }

    #[test]
    fn scale_lookup() {
        assert_eq!(scale_index("A"), Some(0));
        assert_eq!(scale_index("K"), Some(SLOW_FAST));
        assert_eq!(scale_index("Z"), None);
    }
}

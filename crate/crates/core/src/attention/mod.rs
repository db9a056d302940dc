//! Caption injection paths: shared cross-attention, ROI self-attention, the
//! attention-mask baseline, the embedding-injection baseline and box
//! guidance.

pub mod cross;
pub mod gated;
pub mod kernel;
pub mod roi_self;

pub use cross::{masked_instance_attention, CrossAttention, CrossCache, InstanceAttentionMap};
pub use gated::{BoxGuidance, EmbeddingInjection};
pub use roi_self::RoiSelfAttention;

use crate::roi::RoiBox;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaptionSource {
    Global,
    Instance(usize),
}

/// `L × d` token embeddings of one caption.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionEmbedding<T> {
    pub tokens: Tensor<T>,
    pub source: CaptionSource,
}

impl<T: Scalar> CaptionEmbedding<T> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Number of geometric frequencies per coordinate.
pub const FOURIER_FREQS: usize = 8;

/// `sin/cos(2^k·π·v)` for k in 0..FOURIER_FREQS, per value.
pub fn fourier_features(values: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len() * 2 * FOURIER_FREQS);
    for &v in values {
        for k in 0..FOURIER_FREQS {
            let a = std::f64::consts::PI * (1u32 << k) as f64 * v;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

pub const BOX_FEATURES: usize = 4 * 2 * FOURIER_FREQS;
pub const POS_FEATURES: usize = 2 * 2 * FOURIER_FREQS;

/// Box coordinate frame for guidance tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordFrame {
    /// Normalized image coordinates.
    Global,
    /// Each box in its own frame, where it always spans `[0,1]²`.
    Local,
}

/// Feature-major (`BOX_FEATURES × n`) Fourier features of the boxes.
pub fn box_fourier<T: Scalar>(boxes: &[RoiBox], frame: CoordFrame) -> Vec<T> {
    let n = boxes.len();
    let mut out = vec![T::zero(); BOX_FEATURES * n];
    for (i, bx) in boxes.iter().enumerate() {
        let coords = match frame {
            CoordFrame::Global => bx.as_array(),
            CoordFrame::Local => [0.0, 0.0, 1.0, 1.0],
        };
        for (f, v) in fourier_features(&coords).into_iter().enumerate() {
            out[f * n + i] = T::c(v);
        }
    }
    out
}

/// Feature-major (`POS_FEATURES × h·w`) Fourier features of pixel centers.
pub fn pixel_fourier<T: Scalar>(h: usize, w: usize) -> Vec<T> {
    let n = h * w;
    let mut out = vec![T::zero(); POS_FEATURES * n];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let c = [(x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64];
            for (f, v) in fourier_features(&c).into_iter().enumerate() {
                out[f * n + p] = T::c(v);
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Scalar-loop attention used to check the gemm-based kernels.

    /// `x: dim × n` feature-major, weights row-major `out × in`.
    pub fn proj(w: &[f64], out: usize, inp: usize, x: &[f64], n: usize) -> Vec<f64> {
        let mut y = vec![0.0; out * n];
        for o in 0..out {
            for t in 0..n {
                let mut acc = 0.0;
                for i in 0..inp {
                    acc += w[o * inp + i] * x[i * n + t];
                }
                y[o * n + t] = acc;
            }
        }
        y
    }

    pub fn attend(q: &[f64], k: &[f64], v: &[f64], a: usize, nq: usize, nk: usize) -> Vec<f64> {
        let mut o = vec![0.0; a * nq];
        for i in 0..nq {
            let mut s: Vec<f64> = (0..nk)
                .map(|j| (0..a).map(|d| q[d * nq + i] * k[d * nk + j]).sum::<f64>() / (a as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for v in s.iter_mut() {
                *v = (*v - m).exp() / z;
            }
            for d in 0..a {
                o[d * nq + i] = (0..nk).map(|j| s[j] * v[d * nk + j]).sum();
            }
        }
        o
    }

    pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }
}

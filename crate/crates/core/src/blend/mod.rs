//! Learnable blending of the global and per-instance attention outputs, and
//! the regularizer that pushes instance slots to own their footprints.

use crate::error::{dim_err, Result};
use crate::roi::OccupancyMask;
use crate::tensor::ops::Mask;
use crate::tensor::{Scalar, Tensor};

/// Weight of `L_reg` in the training objective.
pub const DEFAULT_ALPHA: f64 = 0.01;

/// `b × (n+1) × 1 × h × w` per-pixel slot weights; slot 0 is the global
/// attention output.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights<T> {
    pub weights: Tensor<T>,
}

/// `b × 1 × h × w` union of instance footprints.
#[derive(Clone, Debug, PartialEq)]
pub struct ForegroundMask {
    pub mask: Mask,
}

impl ForegroundMask {
    pub fn from_occupancy<T: Scalar>(occ: &OccupancyMask<T>) -> Self {
        let s = occ.weights.shape();
        let (b, n, hw) = (s[0], s[1], s[3] * s[4]);
        let mut data = vec![false; b * hw];
        for bi in 0..b {
            for slot in 0..n {
                for p in 0..hw {
                    if occ.is_occupied(bi, slot, p) {
                        data[bi * hw + p] = true;
                    }
                }
            }
        }
        Self {
            mask: Mask {
                shape: vec![b, 1, s[3], s[4]],
                data,
            },
        }
    }

    pub fn count(&self) -> usize {
        self.mask.data.iter().filter(|&&m| m).count()
    }
}

/// Blends one sample. `slots[0]` is the global output and `slots[k]` the
/// k-th instance output, each `c × hw`; `valid[k-1][p]` says whether
/// instance `k` covers pixel `p`. Returns the fused map and the
/// `(n+1) × hw` weights.
pub fn blend_sample<T: Scalar>(
    slots: &[&[T]],
    valid: &[&[bool]],
    c: usize,
    hw: usize,
    weight: &[T],
    bias: T,
) -> (Vec<T>, Vec<T>) {
    let ns = slots.len();
    debug_assert_eq!(valid.len() + 1, ns);
    let is_valid = |k: usize, p: usize| k == 0 || valid[k - 1][p];
    let mut logits = vec![T::zero(); ns * hw];
    for k in 0..ns {
        let a = slots[k];
        let row = &mut logits[k * hw..(k + 1) * hw];
        for (p, l) in row.iter_mut().enumerate() {
            if !is_valid(k, p) {
                continue;
            }
            let mut acc = bias;
            for ch in 0..c {
                acc += weight[ch] * a[ch * hw + p];
            }
            *l = acc;
        }
    }
    let mut wts = vec![T::zero(); ns * hw];
    for p in 0..hw {
        let mut m = logits[p];
        for k in 1..ns {
            if is_valid(k, p) && logits[k * hw + p] > m {
                m = logits[k * hw + p];
            }
        }
        let mut z = T::zero();
        for k in 0..ns {
            if is_valid(k, p) {
                let e = (logits[k * hw + p] - m).exp();
                wts[k * hw + p] = e;
                z += e;
            }
        }
        for k in 0..ns {
            wts[k * hw + p] /= z;
        }
    }
    let mut fused = vec![T::zero(); c * hw];
    for ch in 0..c {
        for p in 0..hw {
            let mut acc = wts[p] * slots[0][ch * hw + p];
            for k in 1..ns {
                if is_valid(k, p) {
                    acc += wts[k * hw + p] * slots[k][ch * hw + p];
                }
            }
            fused[ch * hw + p] = acc;
        }
    }
    (fused, wts)
}

/// Gradients of one blended sample.
#[derive(Clone, Debug)]
pub struct BlendGrads<T> {
    /// Per slot, `c × hw`.
    pub slots: Vec<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: T,
}

/// Backward of [`blend_sample`]. `g_w0` is an optional extra gradient on
/// the global slot weights (from `L_reg`).
pub fn blend_sample_vjp<T: Scalar>(
    slots: &[&[T]],
    valid: &[&[bool]],
    c: usize,
    hw: usize,
    weight: &[T],
    wts: &[T],
    g_fused: &[T],
    g_w0: Option<&[T]>,
) -> BlendGrads<T> {
    let ns = slots.len();
    let is_valid = |k: usize, p: usize| k == 0 || valid[k - 1][p];
    let mut gs: Vec<Vec<T>> = (0..ns).map(|_| vec![T::zero(); c * hw]).collect();
    let mut gw = vec![T::zero(); ns * hw];
    for k in 0..ns {
        for ch in 0..c {
            for p in 0..hw {
                if is_valid(k, p) {
                    let g = g_fused[ch * hw + p];
                    gw[k * hw + p] += g * slots[k][ch * hw + p];
                    gs[k][ch * hw + p] = wts[k * hw + p] * g;
                }
            }
        }
    }
    if let Some(g0) = g_w0 {
        for p in 0..hw {
            gw[p] += g0[p];
        }
    }
    let mut g_weight = vec![T::zero(); c];
    let mut g_bias = T::zero();
    for p in 0..hw {
        let mut dot = T::zero();
        for k in 0..ns {
            dot += wts[k * hw + p] * gw[k * hw + p];
        }
        for k in 0..ns {
            if !is_valid(k, p) {
                continue;
            }
            let gl = wts[k * hw + p] * (gw[k * hw + p] - dot);
            g_bias += gl;
            for ch in 0..c {
                g_weight[ch] += gl * slots[k][ch * hw + p];
                gs[k][ch * hw + p] += gl * weight[ch];
            }
        }
    }
    BlendGrads {
        slots: gs,
        weight: g_weight,
        bias: g_bias,
    }
}

fn occupancy_rows<T: Scalar>(occ: &OccupancyMask<T>) -> Vec<bool> {
    occ.weights.data().iter().map(|&v| v > T::zero()).collect()
}

/// Batched blend. `global` is `b × c × h × w`, `instances` is
/// `b × n × c × h × w` and `weight` is the `1 × c` logit convolution.
pub fn learnable_blend<T: Scalar>(
    global: &Tensor<T>,
    instances: &Tensor<T>,
    occupancy: &OccupancyMask<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, BlendWeights<T>)> {
    let gs = global.shape();
    let is = instances.shape();
    if gs.len() != 4 || is.len() != 5 || is[0] != gs[0] || is[2..] != gs[1..] {
        return Err(dim_err("learnable_blend", gs, is));
    }
    let (b, n, c, h, w) = (is[0], is[1], is[2], is[3], is[4]);
    if weight.numel() != c || bias.numel() != 1 {
        return Err(dim_err("learnable_blend conv", weight.shape(), &[1, c]));
    }
    if occupancy.weights.shape() != [b, n, 1, h, w] {
        return Err(dim_err("learnable_blend occupancy", occupancy.weights.shape(), &[b, n, 1, h, w]));
    }
    let hw = h * w;
    let occ = occupancy_rows(occupancy);
    let mut fused = Tensor::zeros(&[b, c, h, w]);
    let mut wts = Tensor::zeros(&[b, n + 1, 1, h, w]);
    for bi in 0..b {
        let mut slots: Vec<&[T]> = vec![global.slab(bi)];
        let mut valid: Vec<&[bool]> = Vec::with_capacity(n);
        for k in 0..n {
            slots.push(&instances.data()[(bi * n + k) * c * hw..][..c * hw]);
            valid.push(&occ[(bi * n + k) * hw..][..hw]);
        }
        let (f, wv) = blend_sample(&slots, &valid, c, hw, weight.data(), bias.data()[0]);
        fused.slab_mut(bi).copy_from_slice(&f);
        wts.slab_mut(bi).copy_from_slice(&wv);
    }
    Ok((fused, BlendWeights { weights: wts }))
}

/// Gradients of [`learnable_blend`] for the global map, the instance maps
/// and the convolution.
pub struct LearnableBlendGrads<T> {
    pub global: Tensor<T>,
    pub instances: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[allow(clippy::too_many_arguments)]
pub fn learnable_blend_vjp<T: Scalar>(
    global: &Tensor<T>,
    instances: &Tensor<T>,
    occupancy: &OccupancyMask<T>,
    weight: &Tensor<T>,
    blend: &BlendWeights<T>,
    g_fused: &Tensor<T>,
    g_weights: Option<&Tensor<T>>,
) -> LearnableBlendGrads<T> {
    let is = instances.shape();
    let (b, n, c, h, w) = (is[0], is[1], is[2], is[3], is[4]);
    let hw = h * w;
    let occ = occupancy_rows(occupancy);
    let mut gg = Tensor::zeros(global.shape());
    let mut gi = Tensor::zeros(is);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[1]);
    for bi in 0..b {
        let mut slots: Vec<&[T]> = vec![global.slab(bi)];
        let mut valid: Vec<&[bool]> = Vec::with_capacity(n);
        for k in 0..n {
            slots.push(&instances.data()[(bi * n + k) * c * hw..][..c * hw]);
            valid.push(&occ[(bi * n + k) * hw..][..hw]);
        }
        let g0 = g_weights.map(|g| &g.slab(bi)[..hw]);
        let gr = blend_sample_vjp(&slots, &valid, c, hw, weight.data(), blend.weights.slab(bi), g_fused.slab(bi), g0);
        gg.slab_mut(bi).copy_from_slice(&gr.slots[0]);
        for k in 0..n {
            gi.data_mut()[(bi * n + k) * c * hw..][..c * hw].copy_from_slice(&gr.slots[k + 1]);
        }
        for (d, s) in gw.data_mut().iter_mut().zip(&gr.weight) {
            *d += *s;
        }
        gb.data_mut()[0] += gr.bias;
    }
    LearnableBlendGrads {
        global: gg,
        instances: gi,
        weight: gw,
        bias: gb,
    }
}

/// Mean global-slot weight over foreground pixels; 0 when the foreground
/// is empty.
pub fn reg_loss<T: Scalar>(w: &BlendWeights<T>, m: &ForegroundMask) -> T {
    let s = w.weights.shape();
    let (b, ns, hw) = (s[0], s[1], s[3] * s[4]);
    let count = m.count();
    if count == 0 {
        return T::zero();
    }
    let mut acc = T::zero();
    for bi in 0..b {
        let w0 = &w.weights.data()[bi * ns * hw..][..hw];
        for (p, &v) in w0.iter().enumerate() {
            if m.mask.data[bi * hw + p] {
                acc += v.abs();
            }
        }
    }
    acc / T::c(count as f64)
}

/// Gradient of `scale · reg_loss` with respect to the weights (nonzero only
/// on slot 0).
pub fn reg_loss_vjp<T: Scalar>(w: &BlendWeights<T>, m: &ForegroundMask, scale: T) -> Tensor<T> {
    let s = w.weights.shape();
    let (b, ns, hw) = (s[0], s[1], s[3] * s[4]);
    let mut g = Tensor::zeros(s);
    let count = m.count();
    if count == 0 {
        return g;
    }
    let unit = scale / T::c(count as f64);
    for bi in 0..b {
        for p in 0..hw {
            if m.mask.data[bi * hw + p] {
                // Blend weights are nonnegative, so |w| has slope 1.
                g.data_mut()[bi * ns * hw + p] = unit;
            }
        }
    }
    g
}

/// `l_ldm + α·l_reg`.
pub fn total_loss(l_ldm: f64, l_reg: f64, alpha: f64) -> f64 {
    l_ldm + alpha * l_reg
}

#[cfg(test)]
mod tests;

use rand::Rng;

use super::kernel::{attend, attend_vjp, project, project_vjp, transpose};
use super::CaptionEmbedding;
use crate::error::{dim_err, Result};
use crate::param::{join, Param, Parameterized};
use crate::roi::{quantized_mask, OccupancyMask, RoiBoxBatch};
use crate::tensor::{Scalar, Tensor};

/// Single-head cross-attention from spatial queries to caption tokens. One
/// instance serves both the global caption and every instance caption.
#[derive(Clone, Debug)]
pub struct CrossAttention<T> {
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    channels: usize,
    caption_dim: usize,
    attn_dim: usize,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct CrossCache<T> {
    x: Vec<T>,
    caption_t: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
    n: usize,
    l: usize,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, caption_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        Self {
            wq: Param::fan_in(&[attn_dim, channels], channels, rng),
            wk: Param::fan_in(&[attn_dim, caption_dim], caption_dim, rng),
            wv: Param::fan_in(&[attn_dim, caption_dim], caption_dim, rng),
            wo: Param::fan_in(&[channels, attn_dim], attn_dim, rng),
            channels,
            caption_dim,
            attn_dim,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// `x` is `channels × n` feature-major; returns `channels × n`.
    pub fn forward(&self, x: &[T], n: usize, caption: &CaptionEmbedding<T>) -> Result<(Vec<T>, CrossCache<T>)> {
        if x.len() != self.channels * n {
            return Err(dim_err("cross_attention queries", &[x.len()], &[self.channels, n]));
        }
        if caption.width() != self.caption_dim {
            return Err(dim_err("cross_attention caption", caption.tokens.shape(), &[caption.len(), self.caption_dim]));
        }
        let l = caption.len();
        let a = self.attn_dim;
        let caption_t = transpose(caption.tokens.data(), l, self.caption_dim);
        let q = project(&self.wq.value, x, n);
        let k = project(&self.wk.value, &caption_t, l);
        let v = project(&self.wv.value, &caption_t, l);
        let (o, p) = attend(&q, &k, &v, a, n, l);
        let y = project(&self.wo.value, &o, n);
        Ok((
            y,
            CrossCache {
                x: x.to_vec(),
                caption_t,
                q,
                k,
                v,
                p,
                o,
                n,
                l,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient with respect to
    /// the queries (`channels × n`) and the caption tokens (`L × d`).
    pub fn backward(&mut self, cache: &CrossCache<T>, g: &[T]) -> (Vec<T>, Vec<T>) {
        let (n, l, a) = (cache.n, cache.l, self.attn_dim);
        let go = project_vjp(&self.wo.value, &cache.o, n, g, &mut self.wo.grad);
        let (gq, gk, gv) = attend_vjp(&cache.q, &cache.k, &cache.v, &cache.p, &go, a, n, l);
        let gx = project_vjp(&self.wq.value, &cache.x, n, &gq, &mut self.wq.grad);
        let mut gct = project_vjp(&self.wk.value, &cache.caption_t, l, &gk, &mut self.wk.grad);
        let gct_v = project_vjp(&self.wv.value, &cache.caption_t, l, &gv, &mut self.wv.grad);
        super::kernel::add_into(&mut gct, &gct_v);
        (gx, transpose(&gct, self.caption_dim, l))
    }
}

impl<T: Scalar> Parameterized<T> for CrossAttention<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
    }
}

/// Per-instance attention outputs on the full canvas (`b × n × c × h × w`)
/// with the per-pixel validity of each slot.
#[derive(Clone, Debug)]
pub struct InstanceAttentionMap<T> {
    pub data: Tensor<T>,
    pub occupancy: OccupancyMask<T>,
}

/// Attention-mask injection: every instance caption attends from all `h·w`
/// positions and the output is zeroed outside its integer-rounded box.
///
/// `feature` is `b × c × h × w`; `captions[b][slot]` must exist for every
/// valid slot.
pub fn masked_instance_attention<T: Scalar>(
    cross: &CrossAttention<T>,
    feature: &Tensor<T>,
    captions: &[Vec<CaptionEmbedding<T>>],
    boxes: &RoiBoxBatch,
) -> Result<InstanceAttentionMap<T>> {
    let s = feature.shape();
    if s.len() != 4 || s[0] != boxes.batch() {
        return Err(dim_err("masked_instance_attention", s, &[boxes.batch()]));
    }
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let n = boxes.capacity();
    let hw = h * w;
    let mask = quantized_mask(boxes, h, w);
    let mut data = Tensor::zeros(&[b, n, c, h, w]);
    let mut occ = Tensor::zeros(&[b, n, 1, h, w]);
    for bi in 0..b {
        for slot in 0..n {
            if !boxes.is_valid(bi, slot) {
                continue;
            }
            let (y, _) = cross.forward(feature.slab(bi), hw, &captions[bi][slot])?;
            let k = bi * n + slot;
            let m = &mask.data[k * hw..(k + 1) * hw];
            let dst = &mut data.data_mut()[k * c * hw..(k + 1) * c * hw];
            for ch in 0..c {
                for p in 0..hw {
                    if m[p] {
                        dst[ch * hw + p] = y[ch * hw + p];
                    }
                }
            }
            for (o, &keep) in occ.data_mut()[k * hw..(k + 1) * hw].iter_mut().zip(m) {
                if keep {
                    *o = T::one();
                }
            }
        }
    }
    Ok(InstanceAttentionMap {
        data,
        occupancy: OccupancyMask { weights: occ },
    })
}

#[cfg(test)]
mod tests {
    use super::super::oracle;
    use super::super::CaptionSource;
    use super::*;
    use crate::roi::RoiBox;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn caption(tokens: Tensor<f64>) -> CaptionEmbedding<f64> {
        CaptionEmbedding {
            tokens,
            source: CaptionSource::Global,
        }
    }

    #[test]
    fn single_token_gives_value_projection_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ca = CrossAttention::<f64>::new(4, 3, 5, &mut rng);
        let tok = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let (y, _) = ca.forward(x.data(), 6, &caption(tok.clone())).unwrap();
        let v = oracle::proj(ca.wv.value.data(), 5, 3, tok.data(), 1);
        let want = oracle::proj(ca.wo.value.data(), 4, 5, &v, 1);
        for ch in 0..4 {
            for t in 0..6 {
                assert!((y[ch * 6 + t] - want[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicated_token_is_same_as_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ca = CrossAttention::<f64>::new(4, 3, 5, &mut rng);
        let tok = Tensor::<f64>::randn(&[1, 3], 1.0, &mut rng);
        let mut two = tok.data().to_vec();
        two.extend_from_slice(tok.data());
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let (y1, _) = ca.forward(x.data(), 6, &caption(tok)).unwrap();
        let (y2, _) = ca.forward(x.data(), 6, &caption(Tensor::from_vec(&[2, 3], two).unwrap())).unwrap();
        for (a, b) in y1.iter().zip(&y2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ca = CrossAttention::<f64>::new(4, 3, 5, &mut rng);
        let tok = Tensor::<f64>::randn(&[3, 3], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 4], 1.0, &mut rng);
        let (y, _) = ca.forward(x.data(), 4, &caption(tok.clone())).unwrap();
        let ct = oracle::transpose(tok.data(), 3, 3);
        let q = oracle::proj(ca.wq.value.data(), 5, 4, x.data(), 4);
        let k = oracle::proj(ca.wk.value.data(), 5, 3, &ct, 3);
        let v = oracle::proj(ca.wv.value.data(), 5, 3, &ct, 3);
        let o = oracle::attend(&q, &k, &v, 5, 4, 3);
        let want = oracle::proj(ca.wo.value.data(), 4, 5, &o, 4);
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn width_mismatch_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ca = CrossAttention::<f64>::new(4, 3, 5, &mut rng);
        let x = vec![0.0; 8];
        assert!(ca.forward(&x, 3, &caption(Tensor::zeros(&[1, 3]))).is_err());
        assert!(ca.forward(&x, 2, &caption(Tensor::zeros(&[1, 2]))).is_err());
    }

    #[test]
    fn masked_full_box_equals_plain_attention_and_tiles_partition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ca = CrossAttention::<f64>::new(3, 2, 4, &mut rng);
        let x = Tensor::<f64>::randn(&[1, 3, 4, 6], 1.0, &mut rng);
        let caps: Vec<_> = (0..2).map(|_| caption(Tensor::randn(&[2, 2], 1.0, &mut rng))).collect();
        let full = RoiBoxBatch::single(&[RoiBox::full()]);
        let out = masked_instance_attention(&ca, &x, &[vec![caps[0].clone()]], &full).unwrap();
        let (plain, _) = ca.forward(x.slab(0), 24, &caps[0]).unwrap();
        assert_eq!(out.data.data(), plain.as_slice());

        let halves = RoiBoxBatch::single(&[
            RoiBox::new(0.0, 0.0, 0.5, 1.0).unwrap(),
            RoiBox::new(0.5, 0.0, 1.0, 1.0).unwrap(),
        ]);
        let out = masked_instance_attention(&ca, &x, &[caps.clone()], &halves).unwrap();
        let (y0, _) = ca.forward(x.slab(0), 24, &caps[0]).unwrap();
        let (y1, _) = ca.forward(x.slab(0), 24, &caps[1]).unwrap();
        for ch in 0..3 {
            for p in 0..24 {
                let sum = out.data.data()[ch * 24 + p] + out.data.data()[72 + ch * 24 + p];
                let want = if p % 6 < 3 { y0[ch * 24 + p] } else { y1[ch * 24 + p] };
                assert_eq!(sum, want);
            }
        }
    }
}

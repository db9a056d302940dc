//! Gated attention blocks conditioned on box coordinates. Both start as
//! exact identities because their tanh gate is initialized to zero.

use rand::Rng;

use super::kernel::{add_into, attend, attend_vjp, project, project_vjp};
use super::{box_fourier, pixel_fourier, CaptionEmbedding, CoordFrame, BOX_FEATURES, POS_FEATURES};
use crate::param::{join, Param, Parameterized};
use crate::roi::RoiBox;
use crate::tensor::ops::{silu_grad_scalar, silu_scalar};
use crate::tensor::Scalar;

/// Box guidance: spatial tokens (with a Fourier pixel-position encoding)
/// attend to one learned embedding per box, caption-free, and the result is
/// added through `tanh(gate)`.
#[derive(Clone, Debug)]
pub struct BoxGuidance<T> {
    pub box_proj: Param<T>,
    pub box_bias: Param<T>,
    pub pos_proj: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub gate: Param<T>,
    attn_dim: usize,
}

#[derive(Clone, Debug)]
pub struct GuidanceCache<T> {
    boxes_f: Vec<T>,
    pix_f: Vec<T>,
    e: Vec<T>,
    xq: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o: Vec<T>,
    z: Vec<T>,
    n_tok: usize,
    n_box: usize,
}

impl<T: Scalar> BoxGuidance<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, attn_dim: usize, rng: &mut R) -> Self {
        Self {
            box_proj: Param::fan_in(&[channels, BOX_FEATURES], BOX_FEATURES, rng),
            box_bias: Param::zeros(&[channels]),
            pos_proj: Param::fan_in(&[channels, POS_FEATURES], POS_FEATURES, rng),
            wq: Param::fan_in(&[attn_dim, channels], channels, rng),
            wk: Param::fan_in(&[attn_dim, channels], channels, rng),
            wv: Param::fan_in(&[attn_dim, channels], channels, rng),
            wo: Param::fan_in(&[channels, attn_dim], attn_dim, rng),
            gate: Param::zeros(&[1]),
            attn_dim,
        }
    }

    /// Learned box embedding tokens, `channels × n`.
    pub fn box_embedding(&self, boxes: &[RoiBox], frame: CoordFrame) -> Vec<T> {
        let n = boxes.len();
        let f = box_fourier::<T>(boxes, frame);
        let mut e = project(&self.box_proj.value, &f, n);
        let c = self.box_proj.value.shape()[0];
        for ch in 0..c {
            for i in 0..n {
                e[ch * n + i] += self.box_bias.value.data()[ch];
            }
        }
        e
    }

    /// `x` is the fused map, `channels × h·w`. Returns `None` for the cache
    /// when there are no boxes (the block is then the identity).
    pub fn forward(&self, x: &[T], h: usize, w: usize, boxes: &[RoiBox], frame: CoordFrame) -> (Vec<T>, Option<GuidanceCache<T>>) {
        let n_box = boxes.len();
        if n_box == 0 {
            return (x.to_vec(), None);
        }
        let n_tok = h * w;
        let boxes_f = box_fourier::<T>(boxes, frame);
        let e = self.box_embedding(boxes, frame);
        let pix_f = pixel_fourier::<T>(h, w);
        let mut xq = project(&self.pos_proj.value, &pix_f, n_tok);
        add_into(&mut xq, x);
        let q = project(&self.wq.value, &xq, n_tok);
        let k = project(&self.wk.value, &e, n_box);
        let v = project(&self.wv.value, &e, n_box);
        let (o, p) = attend(&q, &k, &v, self.attn_dim, n_tok, n_box);
        let z = project(&self.wo.value, &o, n_tok);
        let g = self.gate.value.data()[0].tanh();
        let y = x.iter().zip(&z).map(|(&a, &b)| a + g * b).collect();
        (
            y,
            Some(GuidanceCache {
                boxes_f,
                pix_f,
                e,
                xq,
                q,
                k,
                v,
                p,
                o,
                z,
                n_tok,
                n_box,
            }),
        )
    }

    pub fn backward(&mut self, cache: Option<&GuidanceCache<T>>, gy: &[T]) -> Vec<T> {
        let Some(c) = cache else {
            return gy.to_vec();
        };
        let t = self.gate.value.data()[0].tanh();
        let mut dot = T::zero();
        for (&a, &b) in gy.iter().zip(&c.z) {
            dot += a * b;
        }
        self.gate.grad.data_mut()[0] += dot * (T::one() - t * t);
        let gz: Vec<T> = gy.iter().map(|&v| v * t).collect();
        let go = project_vjp(&self.wo.value, &c.o, c.n_tok, &gz, &mut self.wo.grad);
        let (gq, gk, gv) = attend_vjp(&c.q, &c.k, &c.v, &c.p, &go, self.attn_dim, c.n_tok, c.n_box);
        let gxq = project_vjp(&self.wq.value, &c.xq, c.n_tok, &gq, &mut self.wq.grad);
        project_vjp(&self.pos_proj.value, &c.pix_f, c.n_tok, &gxq, &mut self.pos_proj.grad);
        let mut ge = project_vjp(&self.wk.value, &c.e, c.n_box, &gk, &mut self.wk.grad);
        add_into(&mut ge, &project_vjp(&self.wv.value, &c.e, c.n_box, &gv, &mut self.wv.grad));
        project_vjp(&self.box_proj.value, &c.boxes_f, c.n_box, &ge, &mut self.box_proj.grad);
        for (ch, row) in ge.chunks(c.n_box).enumerate() {
            self.box_bias.grad.data_mut()[ch] += row.iter().copied().sum::<T>();
        }
        let mut gx = gy.to_vec();
        add_into(&mut gx, &gxq);
        gx
    }
}

impl<T: Scalar> Parameterized<T> for BoxGuidance<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "box_proj"), &mut self.box_proj);
        f(&join(prefix, "box_bias"), &mut self.box_bias);
        f(&join(prefix, "pos_proj"), &mut self.pos_proj);
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "gate"), &mut self.gate);
    }
}

/// Embedding-injection baseline: grounding tokens built from the pooled
/// caption and the Fourier box features join the spatial tokens in one
/// self-attention; the spatial outputs are added through `tanh(gate)`.
#[derive(Clone, Debug)]
pub struct EmbeddingInjection<T> {
    pub mlp1: Param<T>,
    pub b1: Param<T>,
    pub mlp2: Param<T>,
    pub b2: Param<T>,
    pub wq: Param<T>,
    pub wk: Param<T>,
    pub wv: Param<T>,
    pub wo: Param<T>,
    pub gate: Param<T>,
    caption_dim: usize,
    attn_dim: usize,
}

#[derive(Clone, Debug)]
pub struct InjectionCache<T> {
    ground_in: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
    tokens: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    p: Vec<T>,
    o_sp: Vec<T>,
    z: Vec<T>,
    n_sp: usize,
    n_inst: usize,
    caption_lens: Vec<usize>,
}

impl<T: Scalar> EmbeddingInjection<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, caption_dim: usize, attn_dim: usize, rng: &mut R) -> Self {
        let gin = caption_dim + BOX_FEATURES;
        Self {
            mlp1: Param::fan_in(&[channels, gin], gin, rng),
            b1: Param::zeros(&[channels]),
            mlp2: Param::fan_in(&[channels, channels], channels, rng),
            b2: Param::zeros(&[channels]),
            wq: Param::fan_in(&[attn_dim, channels], channels, rng),
            wk: Param::fan_in(&[attn_dim, channels], channels, rng),
            wv: Param::fan_in(&[attn_dim, channels], channels, rng),
            wo: Param::fan_in(&[channels, attn_dim], attn_dim, rng),
            gate: Param::zeros(&[1]),
            caption_dim,
            attn_dim,
        }
    }

    /// `x` is `channels × n_sp`; one caption per box.
    pub fn forward(&self, x: &[T], n_sp: usize, captions: &[CaptionEmbedding<T>], boxes: &[RoiBox]) -> (Vec<T>, InjectionCache<T>) {
        assert_eq!(captions.len(), boxes.len(), "one caption per box");
        let c = self.mlp2.value.shape()[0];
        let n_inst = boxes.len();
        let d = self.caption_dim;
        let gin = d + BOX_FEATURES;
        // Grounding input, feature-major `gin × n_inst`.
        let mut ground_in = vec![T::zero(); gin * n_inst];
        let bf = box_fourier::<T>(boxes, CoordFrame::Global);
        for (i, cap) in captions.iter().enumerate() {
            let l = T::c(cap.len() as f64);
            for f in 0..d {
                let mut s = T::zero();
                for t in 0..cap.len() {
                    s += cap.tokens.data()[t * d + f];
                }
                ground_in[f * n_inst + i] = s / l;
            }
            for f in 0..BOX_FEATURES {
                ground_in[(d + f) * n_inst + i] = bf[f * n_inst + i];
            }
        }
        let mut pre = project(&self.mlp1.value, &ground_in, n_inst);
        for ch in 0..c {
            for i in 0..n_inst {
                pre[ch * n_inst + i] += self.b1.value.data()[ch];
            }
        }
        let act: Vec<T> = pre.iter().map(|&v| silu_scalar(v)).collect();
        let mut ground = project(&self.mlp2.value, &act, n_inst);
        for ch in 0..c {
            for i in 0..n_inst {
                ground[ch * n_inst + i] += self.b2.value.data()[ch];
            }
        }
        let nt = n_sp + n_inst;
        let mut tokens = vec![T::zero(); c * nt];
        for ch in 0..c {
            tokens[ch * nt..ch * nt + n_sp].copy_from_slice(&x[ch * n_sp..(ch + 1) * n_sp]);
            tokens[ch * nt + n_sp..(ch + 1) * nt].copy_from_slice(&ground[ch * n_inst..(ch + 1) * n_inst]);
        }
        let q = project(&self.wq.value, &tokens, nt);
        let k = project(&self.wk.value, &tokens, nt);
        let v = project(&self.wv.value, &tokens, nt);
        // Only spatial queries are kept, so attend from the spatial columns.
        let a = self.attn_dim;
        let mut q_sp = vec![T::zero(); a * n_sp];
        for r in 0..a {
            q_sp[r * n_sp..(r + 1) * n_sp].copy_from_slice(&q[r * nt..r * nt + n_sp]);
        }
        let (o_sp, p) = attend(&q_sp, &k, &v, a, n_sp, nt);
        let z = project(&self.wo.value, &o_sp, n_sp);
        let g = self.gate.value.data()[0].tanh();
        let y = x.iter().zip(&z).map(|(&xv, &zv)| xv + g * zv).collect();
        (
            y,
            InjectionCache {
                ground_in,
                pre,
                act,
                tokens,
                q: q_sp,
                k,
                v,
                p,
                o_sp,
                z,
                n_sp,
                n_inst,
                caption_lens: captions.iter().map(|c| c.len()).collect(),
            },
        )
    }

    /// Returns the gradient for `x` and, per caption, for its tokens.
    pub fn backward(&mut self, cache: &InjectionCache<T>, gy: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
        let c = self.mlp2.value.shape()[0];
        let (n_sp, n_inst) = (cache.n_sp, cache.n_inst);
        let nt = n_sp + n_inst;
        let a = self.attn_dim;
        let d = self.caption_dim;
        let t = self.gate.value.data()[0].tanh();
        let mut dot = T::zero();
        for (&gv, &zv) in gy.iter().zip(&cache.z) {
            dot += gv * zv;
        }
        self.gate.grad.data_mut()[0] += dot * (T::one() - t * t);
        let gz: Vec<T> = gy.iter().map(|&v| v * t).collect();
        let go = project_vjp(&self.wo.value, &cache.o_sp, n_sp, &gz, &mut self.wo.grad);
        let (gq_sp, gk, gv) = attend_vjp(&cache.q, &cache.k, &cache.v, &cache.p, &go, a, n_sp, nt);
        let mut gq = vec![T::zero(); a * nt];
        for r in 0..a {
            gq[r * nt..r * nt + n_sp].copy_from_slice(&gq_sp[r * n_sp..(r + 1) * n_sp]);
        }
        let mut gtok = project_vjp(&self.wq.value, &cache.tokens, nt, &gq, &mut self.wq.grad);
        add_into(&mut gtok, &project_vjp(&self.wk.value, &cache.tokens, nt, &gk, &mut self.wk.grad));
        add_into(&mut gtok, &project_vjp(&self.wv.value, &cache.tokens, nt, &gv, &mut self.wv.grad));
        let mut gx = gy.to_vec();
        let mut gground = vec![T::zero(); c * n_inst];
        for ch in 0..c {
            add_into(&mut gx[ch * n_sp..(ch + 1) * n_sp], &gtok[ch * nt..ch * nt + n_sp]);
            gground[ch * n_inst..(ch + 1) * n_inst].copy_from_slice(&gtok[ch * nt + n_sp..(ch + 1) * nt]);
        }
        let mut caption_grads: Vec<Vec<T>> = cache.caption_lens.iter().map(|&l| vec![T::zero(); l * d]).collect();
        if n_inst > 0 {
            for (ch, row) in gground.chunks(n_inst).enumerate() {
                self.b2.grad.data_mut()[ch] += row.iter().copied().sum::<T>();
            }
            let mut gact = project_vjp(&self.mlp2.value, &cache.act, n_inst, &gground, &mut self.mlp2.grad);
            for (g, &p) in gact.iter_mut().zip(&cache.pre) {
                *g *= silu_grad_scalar(p);
            }
            for (ch, row) in gact.chunks(n_inst).enumerate() {
                self.b1.grad.data_mut()[ch] += row.iter().copied().sum::<T>();
            }
            let gin = project_vjp(&self.mlp1.value, &cache.ground_in, n_inst, &gact, &mut self.mlp1.grad);
            for (i, cg) in caption_grads.iter_mut().enumerate() {
                let l = cache.caption_lens[i];
                for f in 0..d {
                    let share = gin[f * n_inst + i] / T::c(l as f64);
                    for tk in 0..l {
                        cg[tk * d + f] += share;
                    }
                }
            }
        }
        (gx, caption_grads)
    }
}

impl<T: Scalar> Parameterized<T> for EmbeddingInjection<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "mlp1"), &mut self.mlp1);
        f(&join(prefix, "b1"), &mut self.b1);
        f(&join(prefix, "mlp2"), &mut self.mlp2);
        f(&join(prefix, "b2"), &mut self.b2);
        f(&join(prefix, "wq"), &mut self.wq);
        f(&join(prefix, "wk"), &mut self.wk);
        f(&join(prefix, "wv"), &mut self.wv);
        f(&join(prefix, "wo"), &mut self.wo);
        f(&join(prefix, "gate"), &mut self.gate);
    }
}

#[cfg(test)]
mod tests {
    use super::super::{oracle, CaptionSource};
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_box(rng: &mut ChaCha8Rng) -> RoiBox {
        let x1 = rng.gen_range(0.0..0.7);
        let y1 = rng.gen_range(0.0..0.7);
        RoiBox::new(x1, y1, x1 + rng.gen_range(0.1..0.3), y1 + rng.gen_range(0.1..0.3)).unwrap()
    }

    #[test]
    fn guidance_identity_at_init_and_without_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bg = BoxGuidance::<f64>::new(4, 3, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 12], 1.0, &mut rng);
        let boxes = [rand_box(&mut rng), rand_box(&mut rng)];
        assert_eq!(bg.forward(x.data(), 3, 4, &boxes, CoordFrame::Global).0, x.data());
        bg.gate.value.data_mut()[0] = 0.7;
        assert_eq!(bg.forward(x.data(), 3, 4, &[], CoordFrame::Global).0, x.data());
        assert_ne!(bg.forward(x.data(), 3, 4, &boxes, CoordFrame::Global).0, x.data());
    }

    #[test]
    fn guidance_is_permutation_invariant_in_boxes() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut bg = BoxGuidance::<f64>::new(4, 3, &mut rng);
            bg.gate.value.data_mut()[0] = 0.9;
            let x = Tensor::<f64>::randn(&[4, 20], 1.0, &mut rng);
            let boxes: Vec<RoiBox> = (0..3).map(|_| rand_box(&mut rng)).collect();
            let rev: Vec<RoiBox> = boxes.iter().rev().cloned().collect();
            let (a, _) = bg.forward(x.data(), 4, 5, &boxes, CoordFrame::Global);
            let (b, _) = bg.forward(x.data(), 4, 5, &rev, CoordFrame::Global);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn injection_identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inj = EmbeddingInjection::<f64>::new(4, 3, 5, &mut rng);
        let x = Tensor::<f64>::randn(&[4, 6], 1.0, &mut rng);
        let cap = CaptionEmbedding {
            tokens: Tensor::randn(&[2, 3], 1.0, &mut rng),
            source: CaptionSource::Instance(0),
        };
        let (y, _) = inj.forward(x.data(), 6, &[cap], &[rand_box(&mut rng)]);
        assert_eq!(y, x.data());
    }

    #[test]
    fn injection_without_instances_is_plain_self_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inj = EmbeddingInjection::<f64>::new(3, 2, 4, &mut rng);
        inj.gate.value.data_mut()[0] = 0.5;
        let x = Tensor::<f64>::randn(&[3, 5], 1.0, &mut rng);
        let (y, _) = inj.forward(x.data(), 5, &[], &[]);
        let q = oracle::proj(inj.wq.value.data(), 4, 3, x.data(), 5);
        let k = oracle::proj(inj.wk.value.data(), 4, 3, x.data(), 5);
        let v = oracle::proj(inj.wv.value.data(), 4, 3, x.data(), 5);
        let o = oracle::attend(&q, &k, &v, 4, 5, 5);
        let z = oracle::proj(inj.wo.value.data(), 3, 4, &o, 5);
        let g = 0.5f64.tanh();
        for i in 0..15 {
            assert!((y[i] - (x.data()[i] + g * z[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn injection_single_token_single_instance_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut inj = EmbeddingInjection::<f64>::new(3, 2, 4, &mut rng);
        inj.gate.value.data_mut()[0] = -0.8;
        inj.b1.value = Tensor::randn(&[3], 1.0, &mut rng);
        inj.b2.value = Tensor::randn(&[3], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[3, 1], 1.0, &mut rng);
        let bx = rand_box(&mut rng);
        let cap = CaptionEmbedding {
            tokens: Tensor::randn(&[1, 2], 1.0, &mut rng),
            source: CaptionSource::Instance(0),
        };
        let (y, _) = inj.forward(x.data(), 1, &[cap.clone()], &[bx]);

        let mut gin = cap.tokens.data().to_vec();
        gin.extend(super::super::fourier_features(&bx.as_array()));
        let pre = oracle::proj(inj.mlp1.value.data(), 3, gin.len(), &gin, 1);
        let act: Vec<f64> = pre.iter().zip(inj.b1.value.data()).map(|(p, b)| silu_scalar(p + b)).collect();
        let ground: Vec<f64> = oracle::proj(inj.mlp2.value.data(), 3, 3, &act, 1)
            .iter()
            .zip(inj.b2.value.data())
            .map(|(a, b)| a + b)
            .collect();
        let mut tokens = vec![0.0; 6];
        for ch in 0..3 {
            tokens[ch * 2] = x.data()[ch];
            tokens[ch * 2 + 1] = ground[ch];
        }
        let q = oracle::proj(inj.wq.value.data(), 4, 3, &tokens, 2);
        let k = oracle::proj(inj.wk.value.data(), 4, 3, &tokens, 2);
        let v = oracle::proj(inj.wv.value.data(), 4, 3, &tokens, 2);
        let q0: Vec<f64> = (0..4).map(|r| q[r * 2]).collect();
        let o = oracle::attend(&q0, &k, &v, 4, 1, 2);
        let z = oracle::proj(inj.wo.value.data(), 3, 4, &o, 1);
        let g = (-0.8f64).tanh();
        for ch in 0..3 {
            assert!((y[ch] - (x.data()[ch] + g * z[ch])).abs() < 1e-6);
        }
    }
}

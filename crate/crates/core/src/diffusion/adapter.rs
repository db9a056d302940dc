//! The instance-control module placed at each cross-attention site.

use rand::Rng;

use crate::attention::cross::CrossCache;
use crate::attention::gated::GuidanceCache;
use crate::attention::roi_self::RoiSelfCache;
use crate::attention::{BoxGuidance, CaptionEmbedding, CaptionSource, CoordFrame, CrossAttention, RoiSelfAttention};
use crate::blend::{blend_sample, blend_sample_vjp};
use crate::param::{join, Param, Parameterized};
use crate::roi::{align_into, align_vjp_into, quantized_edges, unpool_into, unpool_vjp_into, RoiBox};
use crate::tensor::{Scalar, Tensor};

/// How instance captions reach the feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Injection {
    /// ROI-Align, attention on the `r × r` crop, ROI-Unpool.
    Roi,
    /// Full-map attention zeroed outside the integer-rounded box.
    Mask,
}

impl Injection {
    pub fn name(self) -> &'static str {
        match self {
            Injection::Roi => "roi",
            Injection::Mask => "mask",
        }
    }
}

/// Conditioning of one sample: global caption tokens, and per instance its
/// caption tokens and box.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditions {
    pub global: Vec<usize>,
    pub instances: Vec<(Vec<usize>, RoiBox)>,
}

impl Conditions {
    pub fn boxes(&self) -> Vec<RoiBox> {
        self.instances.iter().map(|(_, b)| *b).collect()
    }
}

/// Looks up caption tokens in an embedding table (`vocab × d`).
pub fn embed<T: Scalar>(table: &Tensor<T>, tokens: &[usize], source: CaptionSource) -> CaptionEmbedding<T> {
    let d = table.shape()[1];
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        data.extend_from_slice(&table.data()[t * d..(t + 1) * d]);
    }
    CaptionEmbedding {
        tokens: Tensor::from_vec(&[tokens.len(), d], data).expect("non-empty caption"),
        source,
    }
}

fn embed_vjp<T: Scalar>(grad_table: &mut Tensor<T>, tokens: &[usize], g: &[T]) {
    let d = grad_table.shape()[1];
    for (i, &t) in tokens.iter().enumerate() {
        for (dst, &v) in grad_table.data_mut()[t * d..(t + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
            *dst += v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adapter<T> {
    pub cross: CrossAttention<T>,
    pub roi_self: Option<RoiSelfAttention<T>>,
    pub blend_w: Param<T>,
    pub blend_b: Param<T>,
    pub guide: BoxGuidance<T>,
    pub r: usize,
    pub injection: Injection,
    pub frame: CoordFrame,
}

struct InstanceCache<T> {
    cross: CrossCache<T>,
    roi_self: Option<RoiSelfCache<T>>,
    valid: Vec<bool>,
}

pub struct AdapterCache<T> {
    global: CrossCache<T>,
    instances: Vec<InstanceCache<T>>,
    slots: Vec<Vec<T>>,
    weights: Vec<T>,
    guide: Option<GuidanceCache<T>>,
    foreground: Vec<bool>,
}

impl<T> AdapterCache<T> {
    /// Per-pixel global-slot blend weight.
    pub fn global_weight(&self) -> &[T] {
        &self.weights[..self.foreground.len()]
    }

    pub fn foreground(&self) -> &[bool] {
        &self.foreground
    }
}

impl<T: Scalar> Adapter<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        channels: usize,
        caption_dim: usize,
        attn_dim: usize,
        r: usize,
        self_attn: bool,
        injection: Injection,
        frame: CoordFrame,
        rng: &mut R,
    ) -> Self {
        let cross = CrossAttention::new(channels, caption_dim, attn_dim, rng);
        let roi_self = (self_attn && injection == Injection::Roi).then(|| RoiSelfAttention::new(channels, attn_dim, r, rng));
        Self {
            cross,
            roi_self,
            blend_w: Param::zeros(&[1, channels]),
            blend_b: Param::zeros(&[1]),
            guide: BoxGuidance::new(channels, attn_dim, rng),
            r,
            injection,
            frame,
        }
    }

    pub fn channels(&self) -> usize {
        self.cross.channels()
    }

    /// Operation trace of one forward pass, used to compare configurations.
    pub fn fingerprint(&self, prefix: &str) -> Vec<String> {
        let mut f = vec![format!("{prefix}.cross(global)")];
        match self.injection {
            Injection::Roi => {
                f.push(format!("{prefix}.roi_align(r={})", self.r));
                f.push(format!("{prefix}.cross(instance)"));
                if self.roi_self.is_some() {
                    f.push(format!("{prefix}.roi_self_attention"));
                }
                f.push(format!("{prefix}.roi_unpool(r={})", self.r));
            }
            Injection::Mask => {
                f.push(format!("{prefix}.cross(instance, full map)"));
                f.push(format!("{prefix}.quantized_mask"));
            }
        }
        f.push(format!("{prefix}.blend"));
        f.push(format!("{prefix}.box_guidance({:?})", self.frame));
        f
    }

    /// `x` is `c × h·w`; returns the adapter output (added residually by the
    /// caller).
    pub fn forward(&self, x: &[T], h: usize, w: usize, cond: &Conditions, table: &Tensor<T>) -> (Vec<T>, AdapterCache<T>) {
        let c = self.channels();
        let hw = h * w;
        let gcap = embed(table, &cond.global, CaptionSource::Global);
        let (ag, global) = self.cross.forward(x, hw, &gcap).expect("adapter widths");
        let mut slots = vec![ag];
        let mut instances = Vec::with_capacity(cond.instances.len());
        for (i, (tokens, bx)) in cond.instances.iter().enumerate() {
            let cap = embed(table, tokens, CaptionSource::Instance(i));
            let mut full = vec![T::zero(); c * hw];
            let mut valid = vec![false; hw];
            let cache = match self.injection {
                Injection::Roi => {
                    let rr = self.r * self.r;
                    let mut roi = vec![T::zero(); c * rr];
                    align_into(x, c, h, w, bx, self.r, &mut roi);
                    let (a, cc) = self.cross.forward(&roi, rr, &cap).expect("adapter widths");
                    let (refined, sc) = match &self.roi_self {
                        Some(sa) => {
                            let (y, sc) = sa.forward(&a);
                            (y, Some(sc))
                        }
                        None => (a, None),
                    };
                    for p in unpool_into(&refined, c, self.r, bx, h, w, &mut full) {
                        valid[p] = true;
                    }
                    InstanceCache {
                        cross: cc,
                        roi_self: sc,
                        valid,
                    }
                }
                Injection::Mask => {
                    let (a, cc) = self.cross.forward(x, hw, &cap).expect("adapter widths");
                    let ((x0, x1), (y0, y1)) = quantized_edges(bx, h, w);
                    for py in y0..y1 {
                        for px in x0..x1 {
                            valid[py * w + px] = true;
                        }
                    }
                    for ch in 0..c {
                        for p in 0..hw {
                            if valid[p] {
                                full[ch * hw + p] = a[ch * hw + p];
                            }
                        }
                    }
                    InstanceCache {
                        cross: cc,
                        roi_self: None,
                        valid,
                    }
                }
            };
            slots.push(full);
            instances.push(cache);
        }
        let slot_refs: Vec<&[T]> = slots.iter().map(|s| s.as_slice()).collect();
        let valid_refs: Vec<&[bool]> = instances.iter().map(|i| i.valid.as_slice()).collect();
        let (fused, weights) = blend_sample(&slot_refs, &valid_refs, c, hw, self.blend_w.value.data(), self.blend_b.value.data()[0]);
        let mut foreground = vec![false; hw];
        for inst in &instances {
            for (f, &v) in foreground.iter_mut().zip(&inst.valid) {
                *f |= v;
            }
        }
        let (out, guide) = self.guide.forward(&fused, h, w, &cond.boxes(), self.frame);
        (
            out,
            AdapterCache {
                global,
                instances,
                slots,
                weights,
                guide,
                foreground,
            },
        )
    }

    /// Accumulates parameter and embedding-table gradients; `g_w0` is the
    /// gradient on the global-slot weights from the regularizer.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &mut self,
        cache: &AdapterCache<T>,
        h: usize,
        w: usize,
        cond: &Conditions,
        g: &[T],
        g_w0: Option<&[T]>,
        grad_table: &mut Tensor<T>,
    ) -> Vec<T> {
        let c = self.channels();
        let hw = h * w;
        let g_fused = self.guide.backward(cache.guide.as_ref(), g);
        let slot_refs: Vec<&[T]> = cache.slots.iter().map(|s| s.as_slice()).collect();
        let valid_refs: Vec<&[bool]> = cache.instances.iter().map(|i| i.valid.as_slice()).collect();
        let bg = blend_sample_vjp(&slot_refs, &valid_refs, c, hw, self.blend_w.value.data(), &cache.weights, &g_fused, g_w0);
        for (d, &v) in self.blend_w.grad.data_mut().iter_mut().zip(&bg.weight) {
            *d += v;
        }
        self.blend_b.grad.data_mut()[0] += bg.bias;
        let (mut gx, gcap) = self.cross.backward(&cache.global, &bg.slots[0]);
        embed_vjp(grad_table, &cond.global, &gcap);
        for (i, ((tokens, bx), ic)) in cond.instances.iter().zip(&cache.instances).enumerate() {
            let g_slot = &bg.slots[i + 1];
            match self.injection {
                Injection::Roi => {
                    let rr = self.r * self.r;
                    let mut g_ref = vec![T::zero(); c * rr];
                    unpool_vjp_into(g_slot, c, self.r, bx, h, w, &mut g_ref);
                    let g_a = match (&mut self.roi_self, &ic.roi_self) {
                        (Some(sa), Some(sc)) => sa.backward(sc, &g_ref),
                        _ => g_ref,
                    };
                    let (g_roi, gcap) = self.cross.backward(&ic.cross, &g_a);
                    embed_vjp(grad_table, tokens, &gcap);
                    align_vjp_into(&g_roi, c, h, w, bx, self.r, &mut gx);
                }
                Injection::Mask => {
                    let mut g_a = g_slot.clone();
                    for ch in 0..c {
                        for p in 0..hw {
                            if !ic.valid[p] {
                                g_a[ch * hw + p] = T::zero();
                            }
                        }
                    }
                    let (gxi, gcap) = self.cross.backward(&ic.cross, &g_a);
                    embed_vjp(grad_table, tokens, &gcap);
                    for (d, &v) in gx.iter_mut().zip(&gxi) {
                        *d += v;
                    }
                }
            }
        }
        gx
    }
}

impl<T: Scalar> Parameterized<T> for Adapter<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.cross.visit_params(&join(prefix, "cross"), f);
        if let Some(sa) = &mut self.roi_self {
            sa.visit_params(&join(prefix, "roi_self"), f);
        }
        f(&join(prefix, "blend_w"), &mut self.blend_w);
        f(&join(prefix, "blend_b"), &mut self.blend_b);
        self.guide.visit_params(&join(prefix, "guide"), f);
    }
}

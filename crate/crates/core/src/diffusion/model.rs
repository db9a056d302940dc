//! Two-scale UNet denoiser with an instance-control adapter at each scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adapter::{Adapter, AdapterCache, Conditions, Injection};
use super::schedule::roi_size;
use crate::attention::CoordFrame;
use crate::error::{Error, Result};
use crate::param::{join, Param, Parameterized};
use crate::tensor::nn::{avg_pool2, avg_pool2_vjp, conv3x3, conv3x3_vjp, linear, linear_vjp, sinusoidal, upsample2, upsample2_vjp};
use crate::tensor::ops::{silu_grad_scalar, silu_scalar};
use crate::tensor::{Scalar, Tensor};

use super::scene::VOCAB;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels at full and half resolution.
    pub channels: [usize; 2],
    pub attn_dim: usize,
    pub caption_dim: usize,
    pub time_dim: usize,
    pub injection: Injection,
    pub self_attn: bool,
    pub coord: CoordFrame,
    pub single_scale: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: [16, 32],
            attn_dim: 16,
            caption_dim: 16,
            time_dim: 32,
            injection: Injection::Roi,
            self_attn: true,
            coord: CoordFrame::Global,
            single_scale: false,
        }
    }
}

impl ModelConfig {
    /// ROI side at each scale, from the feature map's shorter side.
    pub fn roi_sides(&self) -> Result<[usize; 2]> {
        let s = self.height.min(self.width);
        Ok([roi_size(s, self.single_scale)?, roi_size(s / 2, self.single_scale)?])
    }

    pub fn validate(&self) -> Result<()> {
        if self.height % 2 != 0 || self.width % 2 != 0 {
            return Err(Error::Config(format!("image {}×{} must have even sides", self.height, self.width)));
        }
        if self.channels.contains(&0) || self.attn_dim == 0 || self.caption_dim == 0 || self.time_dim < 2 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        self.roi_sides().map(|_| ())
    }
}

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Conv<T> {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::fan_in(&[cout, cin * 9], cin * 9, rng),
            b: Param::zeros(&[cout]),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv3x3(x, &self.w.value, &self.b.value).expect("conv widths")
    }

    fn backward(&mut self, x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
        let (gx, gw, gb) = conv3x3_vjp(x, &self.w.value, g);
        self.w.grad.axpy(T::one(), &gw).expect("same shape");
        self.b.grad.axpy(T::one(), &gb).expect("same shape");
        gx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Scalar> Dense<T> {
    fn new(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: Param::fan_in(&[out, inp], inp, rng),
            b: Param::zeros(&[out]),
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        linear(x, 1, &self.w.value, Some(&self.b.value))
    }

    fn backward(&mut self, x: &[T], g: &[T]) -> Vec<T> {
        linear_vjp(x, 1, &self.w.value, g, &mut self.w.grad, Some(&mut self.b.grad))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "w"), &mut self.w);
        f(&join(prefix, "b"), &mut self.b);
    }
}

fn silu_t<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(silu_scalar)
}

fn silu_back<T: Scalar>(pre: &Tensor<T>, g: Tensor<T>) -> Tensor<T> {
    let mut g = g;
    for (gv, &p) in g.data_mut().iter_mut().zip(pre.data()) {
        *gv *= silu_grad_scalar(p);
    }
    g
}

fn add_channel_bias<T: Scalar>(x: &mut Tensor<T>, bias: &[T]) {
    let per = x.numel() / bias.len();
    for (row, &b) in x.data_mut().chunks_mut(per).zip(bias) {
        for v in row {
            *v += b;
        }
    }
}

fn channel_sums<T: Scalar>(g: &Tensor<T>) -> Vec<T> {
    let c = g.shape()[0];
    g.data().chunks(g.numel() / c).map(|r| r.iter().copied().sum()).collect()
}

fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    out.axpy(T::one(), b).expect("same shape");
    out
}

/// Residual block `x + conv_b(silu(conv_a(silu(x))))`.
#[derive(Clone, Debug)]
pub struct ResBlock<T> {
    pub a: Conv<T>,
    pub b: Conv<T>,
}

struct ResCache<T> {
    x: Tensor<T>,
    sx: Tensor<T>,
    r: Tensor<T>,
    sr: Tensor<T>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: Conv::new(c, c, rng),
            b: Conv::new(c, c, rng),
        }
    }

    fn forward(&self, x: Tensor<T>) -> (Tensor<T>, ResCache<T>) {
        let sx = silu_t(&x);
        let r = self.a.forward(&sx);
        let sr = silu_t(&r);
        let y = add(&x, &self.b.forward(&sr));
        (y, ResCache { x, sx, r, sr })
    }

    fn backward(&mut self, c: &ResCache<T>, g: &Tensor<T>) -> Tensor<T> {
        let g_sr = self.b.backward(&c.sr, g);
        let g_r = silu_back(&c.r, g_sr);
        let g_sx = self.a.backward(&c.sx, &g_r);
        add(g, &silu_back(&c.x, g_sx))
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.a.visit(&join(prefix, "a"), f);
        self.b.visit(&join(prefix, "b"), f);
    }
}

/// The denoiser `ε_θ(z_t, t, conditions)`.
#[derive(Clone, Debug)]
pub struct ToyDenoiser<T> {
    pub config: ModelConfig,
    pub embed: Param<T>,
    pub time_in: Dense<T>,
    pub time_hi: Dense<T>,
    pub time_lo: Dense<T>,
    pub conv_in: Conv<T>,
    pub block_hi: ResBlock<T>,
    pub adapter_hi: Adapter<T>,
    pub down: Conv<T>,
    pub block_lo: ResBlock<T>,
    pub adapter_lo: Adapter<T>,
    pub up: Conv<T>,
    pub block_out: ResBlock<T>,
    pub conv_out: Conv<T>,
}

/// Activations of one forward pass.
pub struct ForwardCache<T> {
    z: Tensor<T>,
    t_in: Vec<T>,
    t_pre: Vec<T>,
    t_act: Vec<T>,
    res_hi: ResCache<T>,
    ad_hi: AdapterCache<T>,
    pooled: Tensor<T>,
    res_lo: ResCache<T>,
    ad_lo: AdapterCache<T>,
    h2b: Tensor<T>,
    res_out: ResCache<T>,
    h3: Tensor<T>,
    s3: Tensor<T>,
}

impl<T> ForwardCache<T> {
    /// Adapter caches at full and half resolution.
    pub fn adapters(&self) -> [&AdapterCache<T>; 2] {
        [&self.ad_hi, &self.ad_lo]
    }
}

impl<T: Scalar> ToyDenoiser<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c1, c2] = config.channels;
        let [r1, r2] = config.roi_sides()?;
        let td = config.time_dim;
        let (a, d) = (config.attn_dim, config.caption_dim);
        let embed = Param::new(Tensor::randn(&[VOCAB, d], 1.0, &mut rng));
        let time_in = Dense::new(td, td, &mut rng);
        let time_hi = Dense::new(td, c1, &mut rng);
        let time_lo = Dense::new(td, c2, &mut rng);
        let conv_in = Conv::new(3, c1, &mut rng);
        let block_hi = ResBlock::new(c1, &mut rng);
        let adapter_hi = Adapter::new(c1, d, a, r1, config.self_attn, config.injection, config.coord, &mut rng);
        let down = Conv::new(c1, c2, &mut rng);
        let block_lo = ResBlock::new(c2, &mut rng);
        let adapter_lo = Adapter::new(c2, d, a, r2, config.self_attn, config.injection, config.coord, &mut rng);
        let up = Conv::new(c2, c1, &mut rng);
        let block_out = ResBlock::new(c1, &mut rng);
        let conv_out = Conv::new(c1, 3, &mut rng);
        Ok(Self {
            config,
            embed,
            time_in,
            time_hi,
            time_lo,
            conv_in,
            block_hi,
            adapter_hi,
            down,
            block_lo,
            adapter_lo,
            up,
            block_out,
            conv_out,
        })
    }

    pub fn fingerprint(&self) -> Vec<String> {
        let mut f = vec!["conv_in".to_string(), "block_hi".to_string()];
        f.extend(self.adapter_hi.fingerprint("adapter_hi"));
        f.extend(["down".to_string(), "block_lo".to_string()]);
        f.extend(self.adapter_lo.fingerprint("adapter_lo"));
        f.extend(["up".to_string(), "block_out".to_string(), "conv_out".to_string()]);
        f
    }

    /// The same weights at another resolution. ROI sizes follow the
    /// shorter side, which must give the sizes the model was built with.
    pub fn at_size(&self, height: usize, width: usize) -> Result<Self> {
        let config = ModelConfig {
            height,
            width,
            ..self.config.clone()
        };
        config.validate()?;
        if config.roi_sides()? != self.config.roi_sides()? {
            return Err(Error::Config(format!(
                "{height}×{width} changes the ROI sizes {:?}",
                self.config.roi_sides()?
            )));
        }
        let mut m = self.clone();
        m.config = config;
        Ok(m)
    }

    /// Predicts the noise in `z` (`3 × h × w`) at timestep `t`.
    pub fn forward(&self, z: &Tensor<T>, t: usize, cond: &Conditions) -> (Tensor<T>, ForwardCache<T>) {
        let (h, w) = (self.config.height, self.config.width);
        let t_in: Vec<T> = sinusoidal(t as f64, self.config.time_dim);
        let t_pre = self.time_in.forward(&t_in);
        let t_act: Vec<T> = t_pre.iter().map(|&v| silu_scalar(v)).collect();
        let tb_hi = self.time_hi.forward(&t_act);
        let tb_lo = self.time_lo.forward(&t_act);

        let mut h0 = self.conv_in.forward(z);
        add_channel_bias(&mut h0, &tb_hi);
        let (h1, res_hi) = self.block_hi.forward(h0);
        let (a1, ad_hi) = self.adapter_hi.forward(h1.data(), h, w, cond, &self.embed.value);
        let mut h1b = h1;
        for (d, &v) in h1b.data_mut().iter_mut().zip(&a1) {
            *d += v;
        }
        let pooled = avg_pool2(&h1b);
        let mut d0 = self.down.forward(&pooled);
        add_channel_bias(&mut d0, &tb_lo);
        let (h2, res_lo) = self.block_lo.forward(d0);
        let (a2, ad_lo) = self.adapter_lo.forward(h2.data(), h / 2, w / 2, cond, &self.embed.value);
        let mut h2b = h2;
        for (d, &v) in h2b.data_mut().iter_mut().zip(&a2) {
            *d += v;
        }
        let m = add(&upsample2(&self.up.forward(&h2b)), &h1b);
        let (h3, res_out) = self.block_out.forward(m);
        let s3 = silu_t(&h3);
        let out = self.conv_out.forward(&s3);
        (
            out,
            ForwardCache {
                z: z.clone(),
                t_in,
                t_pre,
                t_act,
                res_hi,
                ad_hi,
                pooled,
                res_lo,
                ad_lo,
                h2b,
                res_out,
                h3,
                s3,
            },
        )
    }

    /// Accumulates gradients of a loss with output gradient `g`, plus the
    /// global-slot weight gradients of the two adapters.
    pub fn backward(&mut self, cache: &ForwardCache<T>, cond: &Conditions, g: &Tensor<T>, g_w0: [Option<&[T]>; 2]) {
        let (h, w) = (self.config.height, self.config.width);
        let g_s3 = self.conv_out.backward(&cache.s3, g);
        let g_h3 = silu_back(&cache.h3, g_s3);
        let g_m = self.block_out.backward(&cache.res_out, &g_h3);
        // m = upsample(up(h2b)) + h1b
        let g_uph = upsample2_vjp(&g_m);
        let g_h2b = self.up.backward(&cache.h2b, &g_uph);
        let g_a2 = self.adapter_lo.backward(&cache.ad_lo, h / 2, w / 2, cond, g_h2b.data(), g_w0[1], &mut self.embed.grad);
        let mut g_h2 = g_h2b;
        for (d, &v) in g_h2.data_mut().iter_mut().zip(&g_a2) {
            *d += v;
        }
        let g_d0 = self.block_lo.backward(&cache.res_lo, &g_h2);
        let g_tb_lo = channel_sums(&g_d0);
        let g_pooled = self.down.backward(&cache.pooled, &g_d0);
        let mut g_h1b = avg_pool2_vjp(&g_pooled, h, w);
        g_h1b.axpy(T::one(), &g_m).expect("same shape");
        let g_a1 = self.adapter_hi.backward(&cache.ad_hi, h, w, cond, g_h1b.data(), g_w0[0], &mut self.embed.grad);
        let mut g_h1 = g_h1b;
        for (d, &v) in g_h1.data_mut().iter_mut().zip(&g_a1) {
            *d += v;
        }
        let g_h0 = self.block_hi.backward(&cache.res_hi, &g_h1);
        let g_tb_hi = channel_sums(&g_h0);
        self.conv_in.backward(&cache.z, &g_h0);
        let mut g_act = self.time_hi.backward(&cache.t_act, &g_tb_hi);
        for (d, v) in g_act.iter_mut().zip(self.time_lo.backward(&cache.t_act, &g_tb_lo)) {
            *d += v;
        }
        for (d, &p) in g_act.iter_mut().zip(&cache.t_pre) {
            *d *= silu_grad_scalar(p);
        }
        self.time_in.backward(&cache.t_in, &g_act);
    }
}

impl<T: Scalar> Parameterized<T> for ToyDenoiser<T> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "embed"), &mut self.embed);
        self.time_in.visit(&join(prefix, "time_in"), f);
        self.time_hi.visit(&join(prefix, "time_hi"), f);
        self.time_lo.visit(&join(prefix, "time_lo"), f);
        self.conv_in.visit(&join(prefix, "conv_in"), f);
        self.block_hi.visit(&join(prefix, "block_hi"), f);
        self.adapter_hi.visit_params(&join(prefix, "adapter_hi"), f);
        self.down.visit(&join(prefix, "down"), f);
        self.block_lo.visit(&join(prefix, "block_lo"), f);
        self.adapter_lo.visit_params(&join(prefix, "adapter_lo"), f);
        self.up.visit(&join(prefix, "up"), f);
        self.block_out.visit(&join(prefix, "block_out"), f);
        self.conv_out.visit(&join(prefix, "conv_out"), f);
    }
}

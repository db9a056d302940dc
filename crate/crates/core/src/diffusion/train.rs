use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::adapter::Conditions;
use super::model::{ModelConfig, ToyDenoiser};
use super::scene::{Layout, SceneGen, ToyScene};
use super::schedule::{q_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::param::Parameterized;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub seed: u64,
    pub log_every: usize,
    pub timesteps: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub allow_overlap: bool,
    pub grad_clip: f64,
    /// Decay of the weight average kept for sampling; 0 keeps the raw
    /// weights.
    pub ema: f64,
    /// Caps the per-timestep weight of the noise loss at
    /// `min(SNR, γ) / SNR`; 0 gives the unweighted loss.
    pub snr_gamma: f64,
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            steps: 5000,
            batch: 4,
            lr: 1e-3,
            alpha: crate::blend::DEFAULT_ALPHA,
            seed: 0,
            log_every: 10,
            timesteps: 1000,
            min_instances: 0,
            max_instances: 6,
            allow_overlap: true,
            grad_clip: 1.0,
            ema: 0.999,
            snr_gamma: 5.0,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn scene_gen(&self) -> SceneGen {
        let mut g = SceneGen::new(self.model.height, self.model.width);
        g.min_instances = self.min_instances;
        g.max_instances = self.max_instances;
        g.allow_overlap = self.allow_overlap;
        g
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, 1e-4 * 1000.0 / self.timesteps as f64, 0.02 * 1000.0 / self.timesteps as f64)
    }
}

/// One row of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub l_ldm: f64,
    pub l_reg: f64,
}

pub const LOG_HEADER: &str = "step,loss,l_ldm,l_reg";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.l_ldm, self.l_reg)
    }
}

pub fn conditions(layout: &Layout) -> Conditions {
    Conditions {
        global: layout.global_caption(),
        instances: layout.instances.iter().map(|i| (i.caption(), i.bx)).collect(),
    }
}

/// Mean squared error and its gradient.
pub fn ldm_loss<T: Scalar>(pred: &Tensor<T>, eps: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = pred.numel() as f64;
    let mut loss = 0.0;
    let mut g = Tensor::zeros(pred.shape());
    for ((gd, &p), &e) in g.data_mut().iter_mut().zip(pred.data()).zip(eps.data()) {
        let d = (p - e).f64();
        loss += d * d;
        *gd = T::c(2.0 * d / n);
    }
    (loss / n, g)
}

/// Weight of the noise loss at timestep `t`.
pub fn snr_weight(schedule: &NoiseSchedule, t: usize, gamma: f64) -> f64 {
    if gamma <= 0.0 {
        return 1.0;
    }
    let ab = schedule.alpha_bars[t];
    let snr = ab / (1.0 - ab);
    snr.min(gamma) / snr
}

/// Mean over adapter sites of the mean global-slot weight on the
/// foreground; per-site gradient scales are returned alongside.
pub(crate) fn reg_terms<T: Scalar>(cache: &super::model::ForwardCache<T>) -> (f64, [Option<Vec<T>>; 2]) {
    let mut total = 0.0;
    let mut units: [Option<Vec<T>>; 2] = [None, None];
    for (k, ad) in cache.adapters().iter().enumerate() {
        let fg = ad.foreground();
        let count = fg.iter().filter(|&&f| f).count();
        if count == 0 {
            continue;
        }
        let w0 = ad.global_weight();
        let s: f64 = w0.iter().zip(fg).filter(|(_, &f)| f).map(|(v, _)| v.f64()).sum();
        total += s / count as f64;
        let unit = 1.0 / (2.0 * count as f64);
        units[k] = Some(fg.iter().map(|&f| if f { T::c(unit) } else { T::zero() }).collect());
    }
    (total / 2.0, units)
}

/// One training example: scene, timestep and noise, derived from the run
/// seed, the step and the position in the batch.
pub struct Example<T> {
    pub seed: u64,
    pub scene: ToyScene<T>,
    pub t: usize,
    pub eps: Tensor<T>,
}

pub fn example_seed(run_seed: u64, step: usize, slot: usize) -> u64 {
    let mut z = run_seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (slot as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_example<T: Scalar>(seed: u64, gen: &SceneGen, timesteps: usize) -> Example<T> {
    let scene = gen.scene(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let t = rng.gen_range(0..timesteps);
    let eps = Tensor::from_vec(
        scene.image.shape(),
        (0..scene.image.numel()).map(|_| T::c(rng.sample::<f64, _>(StandardNormal))).collect(),
    )
    .expect("same shape");
    Example { seed, scene, t, eps }
}

/// Loss terms of one example and the gradients they induce, accumulated
/// into `model`'s parameter gradients with weight `1/batch`.
pub fn example_step<T: Scalar>(
    model: &mut ToyDenoiser<T>,
    ex: &Example<T>,
    schedule: &NoiseSchedule,
    alpha: f64,
    snr_gamma: f64,
    batch: usize,
) -> Result<(f64, f64)> {
    let z = q_sample(&ex.scene.image, ex.t, &ex.eps, schedule)?;
    let cond = conditions(&ex.scene.layout);
    let (pred, cache) = model.forward(&z, ex.t, &cond);
    let (mse, mut g) = ldm_loss(&pred, &ex.eps);
    let weight = snr_weight(schedule, ex.t, snr_gamma);
    let l_ldm = weight * mse;
    let (l_reg, units) = reg_terms(&cache);
    let inv_b = T::c(weight / batch as f64);
    for v in g.data_mut() {
        *v *= inv_b;
    }
    let scale = T::c(alpha / batch as f64);
    let g_w0: Vec<Option<Vec<T>>> = units
        .into_iter()
        .map(|u| u.filter(|_| alpha > 0.0).map(|u| u.into_iter().map(|v| v * scale).collect()))
        .collect();
    model.backward(&cache, &cond, &g, [g_w0[0].as_deref(), g_w0[1].as_deref()]);
    Ok((l_ldm, l_reg))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step<T: Scalar, M: Parameterized<T>>(&mut self, model: &mut M) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut k = 0;
        model.visit_params("", &mut |_, p| {
            if ms.len() <= k {
                ms.push(vec![0.0; p.value.numel()]);
                vs.push(vec![0.0; p.value.numel()]);
            }
            let (m, v) = (&mut ms[k], &mut vs[k]);
            for (i, (val, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g.f64();
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let upd = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *val = T::c(val.f64() - upd);
            }
            k += 1;
        });
    }
}

fn ema_update<T: Scalar>(avg: &mut ToyDenoiser<T>, model: &mut ToyDenoiser<T>, decay: f64) {
    let mut values = Vec::new();
    model.visit_params("", &mut |_, p| values.push(p.value.data().to_vec()));
    let (d, e) = (T::c(decay), T::c(1.0 - decay));
    let mut k = 0;
    avg.visit_params("", &mut |_, p| {
        for (a, &v) in p.value.data_mut().iter_mut().zip(&values[k]) {
            *a = d * *a + e * v;
        }
        k += 1;
    });
}

fn collect_grads<T: Scalar>(model: &mut ToyDenoiser<T>) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    model.visit_params("", &mut |_, p| out.push(p.grad.data().to_vec()));
    out
}

fn grad_norm<T: Scalar>(model: &mut ToyDenoiser<T>) -> f64 {
    let mut s = 0.0;
    model.visit_params("", &mut |_, p| {
        for g in p.grad.data() {
            s += g.f64() * g.f64();
        }
    });
    s.sqrt()
}

pub struct TrainOutcome<T> {
    /// Averaged weights when `ema > 0`, else the last iterate.
    pub model: ToyDenoiser<T>,
    pub log: Vec<LogRow>,
}

fn dump_batch<T: Scalar>(dir: Option<&Path>, step: usize, examples: &[Example<T>], detail: &str) -> String {
    let mut text = format!("non-finite loss at step {step}: {detail}\n");
    for (i, ex) in examples.iter().enumerate() {
        text.push_str(&format!("example {i}: seed={} t={} layout={:?}\n", ex.seed, ex.t, ex.scene.layout));
    }
    if let Some(d) = dir {
        let path = d.join(format!("nonfinite_step{step}.txt"));
        if std::fs::write(&path, &text).is_ok() {
            return format!("{detail}; batch dumped to {}", path.display());
        }
    }
    text
}

/// Optimizes `L_LDM + α·L_reg` on a seeded synthetic stream. Rows are
/// passed to `on_log` as they are produced.
pub fn train<T: Scalar>(cfg: &TrainConfig, dump_dir: Option<&Path>, on_log: &mut dyn FnMut(&LogRow)) -> Result<TrainOutcome<T>> {
    if cfg.batch == 0 || cfg.steps == 0 {
        return Err(Error::Config("steps and batch must be positive".into()));
    }
    if cfg.alpha < 0.0 {
        return Err(Error::Config("alpha must be nonnegative".into()));
    }
    let mut model = ToyDenoiser::<T>::new(cfg.model.clone(), cfg.seed)?;
    let schedule = cfg.schedule()?;
    let gen = cfg.scene_gen();
    let mut adam = Adam::new(cfg.lr);
    let mut average = (cfg.ema > 0.0).then(|| model.clone());
    let mut log = Vec::new();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    for step in 1..=cfg.steps {
        let examples: Vec<Example<T>> = (0..cfg.batch)
            .map(|b| make_example(example_seed(cfg.seed, step, b), &gen, cfg.timesteps))
            .collect();
        let base = {
            let mut m = model.clone();
            m.zero_grads();
            m
        };
        let results: Vec<Result<(f64, f64, Vec<Vec<T>>)>> = pool.install(|| {
            examples
                .par_iter()
                .map(|ex| {
                    let mut m = base.clone();
                    let (a, b) = example_step(&mut m, ex, &schedule, cfg.alpha, cfg.snr_gamma, cfg.batch)?;
                    Ok((a, b, collect_grads(&mut m)))
                })
                .collect()
        });
        model.zero_grads();
        let (mut l_ldm, mut l_reg) = (0.0, 0.0);
        for r in results {
            let (a, b, grads) = r?;
            l_ldm += a / cfg.batch as f64;
            l_reg += b / cfg.batch as f64;
            let mut k = 0;
            model.visit_params("", &mut |_, p| {
                for (d, &s) in p.grad.data_mut().iter_mut().zip(&grads[k]) {
                    *d += s;
                }
                k += 1;
            });
        }
        let loss = crate::blend::total_loss(l_ldm, l_reg, cfg.alpha);
        let gn = grad_norm(&mut model);
        if !loss.is_finite() || !gn.is_finite() {
            let detail = dump_batch(dump_dir, step, &examples, &format!("loss={loss} grad_norm={gn}"));
            return Err(Error::NonFinite { step, detail });
        }
        if cfg.grad_clip > 0.0 && gn > cfg.grad_clip {
            let s = T::c(cfg.grad_clip / gn);
            model.visit_params("", &mut |_, p| {
                for g in p.grad.data_mut() {
                    *g *= s;
                }
            });
        }
        adam.step(&mut model);
        if let Some(avg) = average.as_mut() {
            let d = cfg.ema.min((1 + step) as f64 / (10 + step) as f64);
            ema_update(avg, &mut model, d);
        }
        if step % cfg.log_every.max(1) == 0 || step == 1 || step == cfg.steps {
            let row = LogRow { step, loss, l_ldm, l_reg };
            on_log(&row);
            log.push(row);
        }
    }
    Ok(TrainOutcome {
        model: average.unwrap_or(model),
        log,
    })
}

/// Writes a metrics log as CSV.
pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv())?;
    }
    Ok(())
}

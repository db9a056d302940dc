//! Finite-difference reports for every differentiable piece, at 64-bit.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{BoxGuidance, CaptionEmbedding, CaptionSource, CoordFrame, CrossAttention, EmbeddingInjection, RoiSelfAttention};
use crate::blend::{learnable_blend, learnable_blend_vjp, reg_loss, reg_loss_vjp, ForegroundMask};
use crate::diffusion::model::{ModelConfig, ToyDenoiser};
use crate::diffusion::scene::SceneGen;
use crate::diffusion::train::{conditions, example_step, ldm_loss, make_example, reg_terms, snr_weight};
use crate::diffusion::{q_sample, NoiseSchedule};
use crate::param::Parameterized;
use crate::roi::{roi_align, roi_unpool, RoiBox, RoiBoxBatch};
use crate::tensor::gradcheck::{check_scalar_fn, GradReport};
use crate::tensor::Tensor;

pub const RTOL: f64 = 1e-4;
/// Coordinates checked per case when a case has more.
const MAX_COORDS: usize = 300;

fn randn(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    Tensor::<f64>::randn(&[n], 1.0, rng).into_vec()
}

pub fn flat_params<M: Parameterized<f64>>(m: &mut M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params("", &mut |_, p| v.extend_from_slice(p.value.data()));
    v
}

pub fn flat_grads<M: Parameterized<f64>>(m: &mut M) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params("", &mut |_, p| v.extend_from_slice(p.grad.data()));
    v
}

pub fn set_params<M: Parameterized<f64>>(m: &mut M, flat: &[f64]) {
    let mut at = 0;
    m.visit_params("", &mut |_, p| {
        let n = p.value.numel();
        p.value.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    });
}

/// Replaces every parameter (zero-initialized gates included) with
/// `N(0, std²)` draws so no gradient path is trivially dead.
pub fn randomize<M: Parameterized<f64>>(m: &mut M, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_params("", &mut |_, p| {
        for v in p.value.data_mut() {
            *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    });
}

/// Gives parameters that are still all zero (output projections, gates,
/// biases) `N(0, std²)` values, keeping the scaled init elsewhere.
pub fn wake_zeros<M: Parameterized<f64>>(m: &mut M, std: f64, rng: &mut ChaCha8Rng) {
    m.visit_params("", &mut |_, p| {
        if p.value.data().iter().all(|&v| v == 0.0) {
            for v in p.value.data_mut() {
                *v = std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
        }
    });
}

fn coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= MAX_COORDS {
        (0..len).collect()
    } else {
        let mut c = sample(rng, len, MAX_COORDS).into_vec();
        c.sort_unstable();
        c
    }
}

fn split(flat: &[f64], lens: &[usize]) -> Vec<Vec<f64>> {
    let mut at = 0;
    lens.iter()
        .map(|&n| {
            let v = flat[at..at + n].to_vec();
            at += n;
            v
        })
        .collect()
}

/// Checks a module's input and parameter gradients of `⟨run(x), probe⟩`.
/// `backprop` runs forward and backward with the given probe, accumulating
/// parameter gradients and returning the input gradients.
pub fn check_module<M: Parameterized<f64> + Clone>(
    module: &M,
    inputs: &[Vec<f64>],
    run: &dyn Fn(&M, &[Vec<f64>]) -> Vec<f64>,
    backprop: &dyn Fn(&mut M, &[Vec<f64>], &[f64]) -> Vec<Vec<f64>>,
    seed: u64,
) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let out = run(module, inputs);
    let probe = randn(out.len(), &mut rng);
    let mut m = module.clone();
    m.zero_grads();
    let gin = backprop(&mut m, inputs, &probe);
    let mut analytic: Vec<f64> = gin.concat();
    analytic.extend(flat_grads(&mut m));
    let mut base = module.clone();
    let mut point: Vec<f64> = inputs.concat();
    point.extend(flat_params(&mut base));
    let mut lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
    let n_in: usize = lens.iter().sum();
    lens.push(point.len() - n_in);
    let cs = coords(point.len(), &mut rng);
    check_scalar_fn(
        &mut |x| {
            let mut parts = split(x, &lens);
            let params = parts.pop().unwrap_or_default();
            let mut m = module.clone();
            set_params(&mut m, &params);
            run(&m, &parts).iter().zip(&probe).map(|(a, b)| a * b).sum()
        },
        &point,
        &analytic,
        &cs,
        RTOL,
    )
}

fn random_box(rng: &mut ChaCha8Rng) -> RoiBox {
    let x1 = rng.gen_range(0.0..0.6);
    let y1 = rng.gen_range(0.0..0.6);
    RoiBox::new(x1, y1, x1 + rng.gen_range(0.2..0.4), y1 + rng.gen_range(0.2..0.4)).expect("valid box")
}

fn caption(tokens: &[f64], l: usize, d: usize, source: CaptionSource) -> CaptionEmbedding<f64> {
    CaptionEmbedding {
        tokens: Tensor::from_vec(&[l, d], tokens.to_vec()).expect("caption shape"),
        source,
    }
}

pub fn cross_attention(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, a, n, l) = (3, 4, 5, 6, 3);
    let mut m = CrossAttention::<f64>::new(c, d, a, &mut rng);
    randomize(&mut m, 0.6, &mut rng);
    let inputs = vec![randn(c * n, &mut rng), randn(l * d, &mut rng)];
    check_module(
        &m,
        &inputs,
        &|m, x| m.forward(&x[0], n, &caption(&x[1], l, d, CaptionSource::Global)).expect("widths").0,
        &|m, x, g| {
            let (_, cache) = m.forward(&x[0], n, &caption(&x[1], l, d, CaptionSource::Global)).expect("widths");
            let (gx, gc) = m.backward(&cache, g);
            vec![gx, gc]
        },
        seed,
    )
}

pub fn roi_self_attention(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, a, side) = (3, 4, 3);
    let mut m = RoiSelfAttention::<f64>::new(c, a, side, &mut rng);
    randomize(&mut m, 0.6, &mut rng);
    let inputs = vec![randn(c * side * side, &mut rng)];
    check_module(
        &m,
        &inputs,
        &|m, x| m.forward(&x[0]).0,
        &|m, x, g| {
            let (_, cache) = m.forward(&x[0]);
            vec![m.backward(&cache, g)]
        },
        seed,
    )
}

pub fn box_guidance(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, a, h, w) = (4, 4, 4, 4);
    let mut m = BoxGuidance::<f64>::new(c, a, &mut rng);
    randomize(&mut m, 0.5, &mut rng);
    let boxes = vec![random_box(&mut rng), random_box(&mut rng)];
    let frame = if seed % 2 == 0 { CoordFrame::Global } else { CoordFrame::Local };
    let inputs = vec![randn(c * h * w, &mut rng)];
    check_module(
        &m,
        &inputs,
        &|m, x| m.forward(&x[0], h, w, &boxes, frame).0,
        &|m, x, g| {
            let (_, cache) = m.forward(&x[0], h, w, &boxes, frame);
            vec![m.backward(cache.as_ref(), g)]
        },
        seed,
    )
}

pub fn embedding_injection(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, d, a, n, l) = (4, 3, 4, 6, 2);
    let mut m = EmbeddingInjection::<f64>::new(c, d, a, &mut rng);
    randomize(&mut m, 0.5, &mut rng);
    let boxes = vec![random_box(&mut rng), random_box(&mut rng)];
    let inputs = vec![randn(c * n, &mut rng), randn(l * d, &mut rng), randn(l * d, &mut rng)];
    let caps = |x: &[Vec<f64>]| -> Vec<CaptionEmbedding<f64>> {
        (0..2).map(|i| caption(&x[1 + i], l, d, CaptionSource::Instance(i))).collect()
    };
    check_module(
        &m,
        &inputs,
        &|m, x| m.forward(&x[0], n, &caps(x), &boxes).0,
        &|m, x, g| {
            let (_, cache) = m.forward(&x[0], n, &caps(x), &boxes);
            let (gx, gc) = m.backward(&cache, g);
            let mut out = vec![gx];
            out.extend(gc);
            out
        },
        seed,
    )
}

/// `⟨blend(global, instances), probe⟩ + α·L_reg` against global,
/// instance features, conv weight and bias.
pub fn blend(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (2, 2, 4, 5);
    let mut boxes = RoiBoxBatch::new(1, n);
    for k in 0..n {
        if rng.gen_bool(0.8) {
            boxes.set(0, k, random_box(&mut rng));
        }
    }
    let feat = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
    let roi = roi_align(&feat, &boxes, 3).expect("valid extents");
    let (inst, occ) = roi_unpool(&roi, &boxes, h, w).expect("valid extents");
    let global = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
    let weight = Tensor::<f64>::randn(&[1, c], 1.0, &mut rng);
    let bias = Tensor::<f64>::randn(&[1], 1.0, &mut rng);
    let probe = Tensor::randn(global.shape(), 1.0, &mut rng);
    let alpha = 0.7;
    let fg = ForegroundMask::from_occupancy(&occ);
    let (_, wts) = learnable_blend(&global, &inst, &occ, &weight, &bias).expect("shapes");
    let gw0 = reg_loss_vjp(&wts, &fg, alpha);
    let gr = learnable_blend_vjp(&global, &inst, &occ, &weight, &wts, &probe, Some(&gw0));
    let parts = [&global, &inst, &weight, &bias];
    let point: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    let analytic: Vec<f64> = [&gr.global, &gr.instances, &gr.weight, &gr.bias]
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let lens: Vec<usize> = parts.iter().map(|t| t.numel()).collect();
    let cs = coords(point.len(), &mut rng);
    check_scalar_fn(
        &mut |x| {
            let p = split(x, &lens);
            let t = |i: usize| Tensor::from_vec(parts[i].shape(), p[i].clone()).expect("shape");
            let (f, wts) = learnable_blend(&t(0), &t(1), &occ, &t(2), &t(3)).expect("shapes");
            f.dot(&probe) + alpha * reg_loss(&wts, &fg)
        },
        &point,
        &analytic,
        &cs,
        RTOL,
    )
}

/// Denoising MSE against its prediction argument.
pub fn ldm(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
    let (_, g) = ldm_loss(&pred, &eps);
    let cs: Vec<usize> = (0..pred.numel()).collect();
    check_scalar_fn(
        &mut |x| ldm_loss(&Tensor::from_vec(pred.shape(), x.to_vec()).expect("shape"), &eps).0,
        pred.data(),
        g.data(),
        &cs,
        RTOL,
    )
}

/// Small denoiser for end-to-end probes: 8×8 images, two scales.
pub fn probe_config() -> ModelConfig {
    ModelConfig {
        height: 8,
        width: 8,
        channels: [3, 4],
        attn_dim: 3,
        caption_dim: 3,
        time_dim: 4,
        ..ModelConfig::default()
    }
}

/// Training objective `L_LDM + α·L_reg` of the whole denoiser against a
/// random subset of its parameters.
pub fn model_end_to_end(seed: u64, config: ModelConfig) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyDenoiser::<f64>::new(config.clone(), seed).expect("valid config");
    wake_zeros(&mut model, 0.3, &mut rng);
    let mut gen = SceneGen::new(config.height, config.width);
    gen.min_instances = 1;
    gen.max_instances = 3;
    gen.min_side = 0.25;
    gen.max_side = 0.6;
    gen.allow_overlap = true;
    let schedule = NoiseSchedule::linear(100, 1e-3, 0.2).expect("schedule");
    let ex = make_example::<f64>(seed, &gen, schedule.len());
    let (alpha, gamma) = (0.5, 2.0);
    let weight = snr_weight(&schedule, ex.t, gamma);
    model.zero_grads();
    example_step(&mut model, &ex, &schedule, alpha, gamma, 1).expect("forward");
    let analytic = flat_grads(&mut model);
    let point = flat_params(&mut model);
    let cs: Vec<usize> = sample(&mut rng, point.len(), 40.min(point.len())).into_vec();
    let z = q_sample(&ex.scene.image, ex.t, &ex.eps, &schedule).expect("shape");
    let cond = conditions(&ex.scene.layout);
    check_scalar_fn(
        &mut |x| {
            let mut m = model.clone();
            set_params(&mut m, x);
            let (pred, cache) = m.forward(&z, ex.t, &cond);
            weight * ldm_loss(&pred, &ex.eps).0 + alpha * reg_terms(&cache).0
        },
        &point,
        &analytic,
        &cs,
        RTOL,
    )
}

/// Every named gradient check with its per-seed function.
pub fn all_checks() -> Vec<(&'static str, fn(u64) -> GradReport)> {
    vec![
        ("cross-attention", cross_attention),
        ("roi-self-attention", roi_self_attention),
        ("box-guidance", box_guidance),
        ("embedding-injection", embedding_injection),
        ("blend", blend),
        ("ldm-loss", ldm),
        ("model-roi", |s| model_end_to_end(s, probe_config())),
        ("model-mask", |s| {
            model_end_to_end(
                s,
                ModelConfig {
                    injection: crate::diffusion::Injection::Mask,
                    ..probe_config()
                },
            )
        }),
    ]
}

/// Runs `check` for seeds `0..seeds` and merges the reports.
pub fn over_seeds(check: fn(u64) -> GradReport, seeds: u64) -> GradReport {
    let mut total = GradReport {
        rtol_used: RTOL,
        ..Default::default()
    };
    for s in 0..seeds {
        total.merge(&check(s));
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes_on_a_few_seeds() {
        for (name, check) in all_checks() {
            let r = over_seeds(check, 3);
            assert!(r.passed(RTOL), "{name}: {r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let eps = Tensor::<f64>::randn(&[4], 1.0, &mut rng);
        let (_, g) = ldm_loss(&pred, &eps);
        let wrong: Vec<f64> = g.data().iter().map(|v| v * 1.01).collect();
        let r = check_scalar_fn(
            &mut |x| ldm_loss(&Tensor::from_vec(&[4], x.to_vec()).unwrap(), &eps).0,
            pred.data(),
            &wrong,
            &[0, 1, 2, 3],
            RTOL,
        );
        assert!(!r.passed(RTOL));
    }
}

//! Oracle suite behind `roictrl verify`: every named property returns a
//! pass/fail row.

pub mod grad;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blend::{learnable_blend, reg_loss, BlendWeights, ForegroundMask};
use crate::config::RunConfig;
use crate::diffusion::checkpoint;
use crate::diffusion::sample::ddim_from;
use crate::diffusion::scene::{render, SceneGen};
use crate::diffusion::{q_sample, roi_size, NoiseSchedule, ToyDenoiser};
use crate::eval::matching::{brute_force_total, hungarian_match, total};
use crate::eval::oracle::dense_oracle_matrices;
use crate::eval::{detect, iou};
use crate::param::Parameterized;
use crate::roi::{
    quantized_edges, roi_align, roi_align_vjp, roi_unpool, roi_unpool_vjp, roi_unpool_vjp_sign_flipped, RoiBox, RoiBoxBatch,
    RoiFeatureStack,
};
use crate::tensor::ops::Mask;
use crate::tensor::Tensor;

/// Deliberate defects for mutation testing of the suite itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Negates the unpool vjp.
    UnpoolSignFlip,
}

impl Fault {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unpool-sign-flip" => Some(Fault::UnpoolSignFlip),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Context {
    pub fault: Option<Fault>,
}

impl Context {
    fn unpool_vjp(&self, g: &Tensor<f64>, boxes: &RoiBoxBatch, r: usize) -> RoiFeatureStack<f64> {
        let out = match self.fault {
            Some(Fault::UnpoolSignFlip) => roi_unpool_vjp_sign_flipped(g, boxes, r),
            None => roi_unpool_vjp(g, boxes, r),
        };
        out.expect("valid extents")
    }
}

type Check = fn(&Context) -> Result<String, String>;

pub struct Property {
    pub module: &'static str,
    pub name: &'static str,
    check: Check,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub module: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

pub fn properties() -> Vec<Property> {
    let p = |module, name, check| Property { module, name, check };
    vec![
        p("roi", "align-oracle", align_oracle as Check),
        p("roi", "unpool-oracle", unpool_oracle),
        p("roi", "adjointness", adjointness),
        p("roi", "round-trip", round_trip),
        p("roi", "affine-reproduction", affine_reproduction),
        p("roi", "quantization", quantization),
        p("attention", "grad-cross-attention", |_| grad_property("cross-attention")),
        p("attention", "grad-roi-self-attention", |_| grad_property("roi-self-attention")),
        p("attention", "grad-box-guidance", |_| grad_property("box-guidance")),
        p("attention", "grad-embedding-injection", |_| grad_property("embedding-injection")),
        p("blend", "partition-of-unity", partition_of_unity),
        p("blend", "outside-footprint", outside_footprint),
        p("blend", "reg-endpoints", reg_endpoints),
        p("blend", "grad-blend", |_| grad_property("blend")),
        p("diffusion", "roi-size-schedule", roi_schedule),
        p("diffusion", "q-sample", q_sample_identity),
        p("diffusion", "ddim-oracle-noise", ddim_oracle),
        p("diffusion", "grad-ldm-loss", |_| grad_property("ldm-loss")),
        p("diffusion", "grad-model-roi", |_| grad_property("model-roi")),
        p("diffusion", "grad-model-mask", |_| grad_property("model-mask")),
        p("diffusion", "checkpoint-round-trip", checkpoint_round_trip),
        p("eval", "hungarian-brute-force", hungarian),
        p("eval", "detect-round-trip", detect_round_trip),
        p("config", "config-round-trip", config_round_trip),
    ]
}

/// A filter selects a whole module by name, or single properties by name
/// or `module/name` prefix.
pub fn selected(p: &Property, filter: Option<&str>) -> bool {
    match filter {
        None => true,
        Some(f) => p.module == f || p.name == f || format!("{}/{}", p.module, p.name).starts_with(f),
    }
}

pub fn run(filter: Option<&str>, ctx: &Context) -> Vec<Outcome> {
    properties()
        .into_iter()
        .filter(|p| selected(p, filter))
        .map(|p| {
            let start = Instant::now();
            let res = std::panic::catch_unwind(|| (p.check)(ctx)).unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Err(format!("panicked: {msg}"))
            });
            let (passed, detail) = match res {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            Outcome {
                module: p.module,
                name: p.name,
                passed,
                detail,
                elapsed: start.elapsed(),
            }
        })
        .collect()
}

pub fn table(outcomes: &[Outcome]) -> String {
    let mut s = format!("{:<10} {:<28} {:<5} {:>9}  detail\n", "module", "property", "ok", "ms");
    for o in outcomes {
        s.push_str(&format!(
            "{:<10} {:<28} {:<5} {:>9.1}  {}\n",
            o.module,
            o.name,
            if o.passed { "pass" } else { "FAIL" },
            o.elapsed.as_secs_f64() * 1e3,
            o.detail
        ));
    }
    s
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Random `(box, r, h, w, c)` with the box at least 0.02 wide.
fn random_case(rng: &mut ChaCha8Rng) -> (RoiBox, usize, usize, usize, usize) {
    let h = rng.gen_range(1..12);
    let w = rng.gen_range(1..12);
    let r = rng.gen_range(1..8);
    let c = rng.gen_range(1..3);
    let x1 = rng.gen_range(0.0..0.9);
    let y1 = rng.gen_range(0.0..0.9);
    let bx = RoiBox::new(x1, y1, rng.gen_range(x1 + 0.02..=1.0), rng.gen_range(y1 + 0.02..=1.0)).expect("valid box");
    (bx, r, h, w, c)
}

pub const ORACLE_CASES: usize = 64;

fn align_oracle(_: &Context) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..ORACLE_CASES {
        let (bx, r, h, w, c) = random_case(&mut rng);
        let boxes = RoiBoxBatch::single(&[bx]);
        let (s, _) = dense_oracle_matrices(&bx, r, h, w).map_err(|e| e.to_string())?;
        let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
        let y = RoiFeatureStack {
            data: Tensor::<f64>::randn(&[1, 1, c, r, r], 1.0, &mut rng),
        };
        let fwd = roi_align(&x, &boxes, r).map_err(|e| e.to_string())?;
        let back = roi_align_vjp(&y, &boxes, h, w).map_err(|e| e.to_string())?;
        for ch in 0..c {
            let xs = &x.data()[ch * h * w..][..h * w];
            let ys = &y.data.data()[ch * r * r..][..r * r];
            ensure(fwd.data.data()[ch * r * r..][..r * r] == s.apply(xs)[..], || format!("case {case}: forward differs"))?;
            ensure(back.data()[ch * h * w..][..h * w] == s.apply_transpose(ys)[..], || format!("case {case}: vjp differs"))?;
        }
    }
    Ok(format!("{ORACLE_CASES} cases bit-equal"))
}

fn unpool_oracle(ctx: &Context) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..ORACLE_CASES {
        let (bx, r, h, w, c) = random_case(&mut rng);
        let boxes = RoiBoxBatch::single(&[bx]);
        let (_, u) = dense_oracle_matrices(&bx, r, h, w).map_err(|e| e.to_string())?;
        let y = RoiFeatureStack {
            data: Tensor::<f64>::randn(&[1, 1, c, r, r], 1.0, &mut rng),
        };
        let g = Tensor::<f64>::randn(&[1, 1, c, h, w], 1.0, &mut rng);
        let (fwd, _) = roi_unpool(&y, &boxes, h, w).map_err(|e| e.to_string())?;
        let back = ctx.unpool_vjp(&g, &boxes, r);
        for ch in 0..c {
            let ys = &y.data.data()[ch * r * r..][..r * r];
            let gs = &g.data()[ch * h * w..][..h * w];
            ensure(fwd.data()[ch * h * w..][..h * w] == u.apply(ys)[..], || format!("case {case}: forward differs"))?;
            ensure(back.data.data()[ch * r * r..][..r * r] == u.apply_transpose(gs)[..], || format!("case {case}: vjp differs"))?;
        }
    }
    Ok(format!("{ORACLE_CASES} cases bit-equal"))
}

/// `⟨A x, y⟩ = ⟨x, A* y⟩` for align and unpool with their vjps.
fn adjointness(ctx: &Context) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for case in 0..ORACLE_CASES {
        let (bx, r, h, w, c) = random_case(&mut rng);
        let boxes = RoiBoxBatch::single(&[bx]);
        let x = Tensor::<f64>::randn(&[1, c, h, w], 1.0, &mut rng);
        let y = RoiFeatureStack {
            data: Tensor::<f64>::randn(&[1, 1, c, r, r], 1.0, &mut rng),
        };
        let g = Tensor::<f64>::randn(&[1, 1, c, h, w], 1.0, &mut rng);
        let ax = roi_align(&x, &boxes, r).map_err(|e| e.to_string())?;
        let aty = roi_align_vjp(&y, &boxes, h, w).map_err(|e| e.to_string())?;
        let (uy, _) = roi_unpool(&y, &boxes, h, w).map_err(|e| e.to_string())?;
        let utg = ctx.unpool_vjp(&g, &boxes, r);
        for (name, lhs, rhs) in [
            ("align", ax.data.dot(&y.data), x.dot(&aty)),
            ("unpool", uy.dot(&g), y.data.dot(&utg.data)),
        ] {
            let err = (lhs - rhs).abs() / (1.0 + lhs.abs().max(rhs.abs()));
            worst = worst.max(err);
            ensure(err < 1e-12, || format!("case {case}: {name} <Ax,y>={lhs} vs <x,A*y>={rhs}"))?;
        }
    }
    Ok(format!("worst relative gap {worst:.1e}"))
}

fn round_trip(_: &Context) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for side in 1..=16 {
        let x = Tensor::<f64>::randn(&[1, 2, side, side], 1.0, &mut rng);
        let boxes = RoiBoxBatch::single(&[RoiBox::full()]);
        let roi = roi_align(&x, &boxes, side).map_err(|e| e.to_string())?;
        let (back, _) = roi_unpool(&roi, &boxes, side, side).map_err(|e| e.to_string())?;
        ensure(back.data() == x.data(), || format!("side {side}: unpool(align(x)) != x"))?;
    }
    Ok("sides 1..=16 exact".into())
}

/// Largest deviation of `unpool(align(f))` from an affine field `f` on
/// footprint pixels whose centers lie within the hull of the ROI cell
/// centers.
pub fn affine_interior_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.gen_range(12..24), rng.gen_range(12..24));
    let r = rng.gen_range(2..8);
    let x1 = rng.gen_range(0.05..0.45);
    let y1 = rng.gen_range(0.05..0.45);
    let bx = RoiBox::new(x1, y1, rng.gen_range(x1 + 0.3..0.95), rng.gen_range(y1 + 0.3..0.95)).expect("valid box");
    let (a, b, c) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let f = |py: usize, px: usize| a + b * (px as f64 + 0.5) + c * (py as f64 + 0.5);
    let mut x = Tensor::<f64>::zeros(&[1, 1, h, w]);
    for py in 0..h {
        for px in 0..w {
            x.data_mut()[py * w + px] = f(py, px);
        }
    }
    let boxes = RoiBoxBatch::single(&[bx]);
    let roi = roi_align(&x, &boxes, r).expect("valid extents");
    let (back, occ) = roi_unpool(&roi, &boxes, h, w).expect("valid extents");
    let ((xl, xh), (yl, yh)) = bx.pixel_edges(h, w);
    let (cw, ch) = ((xh - xl) / r as f64, (yh - yl) / r as f64);
    let mut worst: f64 = 0.0;
    for py in 0..h {
        for px in 0..w {
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let inside = cx >= xl + cw / 2.0 && cx <= xh - cw / 2.0 && cy >= yl + ch / 2.0 && cy <= yh - ch / 2.0;
            if inside && occ.is_occupied(0, 0, py * w + px) {
                worst = worst.max((back.data()[py * w + px] - f(py, px)).abs());
            }
        }
    }
    worst
}

fn affine_reproduction(_: &Context) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..ORACLE_CASES as u64 {
        let e = affine_interior_error(seed);
        worst = worst.max(e);
        ensure(e <= 1e-5, || format!("seed {seed}: error {e:.3e}"))?;
    }
    Ok(format!("worst interior error {worst:.1e}"))
}

/// Box edges placed at `k + 0.4` pixels: nearest-integer quantization
/// moves an edge by 0.4 px; ROI occupancy follows the exact box.
pub fn quantization_gap(h: usize, w: usize, k: usize, span: usize) -> (f64, bool) {
    let bx = RoiBox::new(
        (k as f64 + 0.4) / w as f64,
        (k as f64 + 0.4) / h as f64,
        ((k + span) as f64 + 0.4) / w as f64,
        ((k + span) as f64 + 0.4) / h as f64,
    )
    .expect("valid box");
    let ((qx1, qx2), (qy1, qy2)) = quantized_edges(&bx, h, w);
    let ((xl, xh), (yl, yh)) = bx.pixel_edges(h, w);
    let gap = [(qx1 as f64 - xl).abs(), (qx2 as f64 - xh).abs(), (qy1 as f64 - yl).abs(), (qy2 as f64 - yh).abs()]
        .into_iter()
        .fold(0.0, f64::max);
    let boxes = RoiBoxBatch::single(&[bx]);
    let roi = RoiFeatureStack {
        data: Tensor::<f64>::ones(&[1, 1, 1, 3, 3]),
    };
    let (_, occ) = roi_unpool(&roi, &boxes, h, w).expect("valid extents");
    let exact = (0..h).all(|py| (0..w).all(|px| occ.is_occupied(0, 0, py * w + px) == bx.contains_pixel_center(py, px, h, w)));
    (gap, exact)
}

fn quantization(_: &Context) -> Result<String, String> {
    let mut cases = 0;
    for (h, w) in [(8, 8), (16, 16), (32, 24), (64, 64)] {
        for k in 0..3 {
            for span in 2..5 {
                let (gap, exact) = quantization_gap(h, w, k, span);
                ensure(gap >= 0.4 - 1e-9, || format!("{h}x{w} k={k}: mask gap {gap}"))?;
                ensure(exact, || format!("{h}x{w} k={k}: roi occupancy differs from the box"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} boxes: mask off by >= 0.4 px, roi exact"))
}

fn blend_case(seed: u64, n: usize) -> (Tensor<f64>, Tensor<f64>, crate::roi::OccupancyMask<f64>, Tensor<f64>, Tensor<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (3, 7, 6);
    let mut boxes = RoiBoxBatch::new(1, n);
    for k in 0..n {
        if rng.gen_bool(0.8) {
            let x1 = rng.gen_range(0.0..0.6);
            let y1 = rng.gen_range(0.0..0.6);
            boxes.set(0, k, RoiBox::new(x1, y1, x1 + rng.gen_range(0.1..0.4), y1 + rng.gen_range(0.1..0.4)).expect("valid box"));
        }
    }
    let feat = Tensor::randn(&[1, c, h, w], 1.0, &mut rng);
    let roi = roi_align(&feat, &boxes, 3).expect("valid extents");
    let (inst, occ) = roi_unpool(&roi, &boxes, h, w).expect("valid extents");
    (
        Tensor::randn(&[1, c, h, w], 1.0, &mut rng),
        inst,
        occ,
        Tensor::randn(&[1, c], 1.0, &mut rng),
        Tensor::randn(&[1], 1.0, &mut rng),
    )
}

fn partition_of_unity(_: &Context) -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let n = 1 + seed as usize % 4;
        let (g, i, occ, wt, b) = blend_case(seed, n);
        let (_, bw) = learnable_blend(&g, &i, &occ, &wt, &b).map_err(|e| e.to_string())?;
        let hw = 42;
        for p in 0..hw {
            let mut s = bw.weights.data()[p];
            for k in 0..n {
                let v = bw.weights.data()[(k + 1) * hw + p];
                if occ.is_occupied(0, k, p) {
                    s += v;
                } else {
                    ensure(v == 0.0, || format!("seed {seed}: unoccupied slot {k} has weight {v}"))?;
                }
            }
            worst = worst.max((s - 1.0).abs());
        }
    }
    ensure(worst <= 1e-6, || format!("weights sum off by {worst:.3e}"))?;
    Ok(format!("max |sum - 1| = {worst:.1e}"))
}

fn outside_footprint(_: &Context) -> Result<String, String> {
    for seed in 0..50 {
        let (g, i, occ, wt, b) = blend_case(100 + seed, 3);
        let (fused, _) = learnable_blend(&g, &i, &occ, &wt, &b).map_err(|e| e.to_string())?;
        let hw = 42;
        for p in 0..hw {
            if (0..3).any(|k| occ.is_occupied(0, k, p)) {
                continue;
            }
            for ch in 0..3 {
                let (a, e) = (fused.data()[ch * hw + p], g.data()[ch * hw + p]);
                ensure(a.to_bits() == e.to_bits(), || format!("seed {seed}: pixel {p} channel {ch}: {a} != {e}"))?;
            }
        }
    }
    Ok("50 cases bit-equal".into())
}

/// Weight fields where the global slot is 0 or 1 on the whole foreground.
pub fn reg_endpoint_values() -> (f64, f64) {
    let (h, w) = (4, 4);
    let mask = Mask::new(&[1, h, w], (0..h * w).map(|p| (5..11).contains(&p)).collect()).expect("mask shape");
    let fg = ForegroundMask { mask };
    let field = |global: f64| {
        let mut t = Tensor::<f64>::zeros(&[1, 2, 1, h, w]);
        for p in 0..h * w {
            t.data_mut()[p] = global;
            t.data_mut()[h * w + p] = 1.0 - global;
        }
        BlendWeights { weights: t }
    };
    (reg_loss(&field(0.0), &fg), reg_loss(&field(1.0), &fg))
}

fn reg_endpoints(_: &Context) -> Result<String, String> {
    let (lo, hi) = reg_endpoint_values();
    ensure(lo == 0.0 && hi == 1.0, || format!("endpoints {lo}, {hi}"))?;
    Ok("L_reg = 0 and 1 at the extremes".into())
}

fn grad_property(name: &str) -> Result<String, String> {
    let (_, check) = grad::all_checks().into_iter().find(|(n, _)| *n == name).ok_or("unknown check")?;
    let r = grad::over_seeds(check, 20);
    ensure(r.passed(grad::RTOL), || {
        format!("{} of {} entries off; worst excess {:.2e}", r.failures, r.checked, r.worst_excess)
    })?;
    Ok(format!("20 seeds, {} entries, max abs err {:.1e}", r.checked, r.max_abs_err))
}

fn roi_schedule(_: &Context) -> Result<String, String> {
    let got: Vec<usize> = [64, 32, 16, 8].iter().map(|&r| roi_size(r, false).expect("side >= 4")).collect();
    ensure(got == [25, 19, 13, 7], || format!("got {got:?}"))?;
    Ok("R = 64, 32, 16, 8 -> 25, 19, 13, 7".into())
}

fn q_sample_identity(_: &Context) -> Result<String, String> {
    let s = NoiseSchedule::ddpm_default();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x0 = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[3, 4, 4], 1.0, &mut rng);
    for t in [0, 1, 500, 999] {
        let z = q_sample(&x0, t, &eps, &s).map_err(|e| e.to_string())?;
        let ab: f64 = s.betas[..=t].iter().map(|b| 1.0 - b).product();
        for ((&zv, &x), &e) in z.data().iter().zip(x0.data()).zip(eps.data()) {
            let want = ab.sqrt() * x + (1.0 - ab).sqrt() * e;
            ensure((zv - want).abs() < 1e-12, || format!("t={t}: {zv} vs {want}"))?;
        }
    }
    Ok("matches sqrt(ab) x0 + sqrt(1-ab) eps".into())
}

fn ddim_oracle(_: &Context) -> Result<String, String> {
    let s = NoiseSchedule::ddpm_default();
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x0 = Tensor::<f64>::uniform(&[3, 5, 5], -1.0, 1.0, &mut rng);
    let eps = Tensor::<f64>::randn(&[3, 5, 5], 1.0, &mut rng);
    let z = q_sample(&x0, 999, &eps, &s).map_err(|e| e.to_string())?;
    for steps in [1, 10, 50] {
        let out = ddim_from(&mut |_, _| eps.clone(), z.clone(), &s, steps, false).map_err(|e| e.to_string())?;
        let err = out.max_abs_diff(&x0);
        ensure(err < 1e-6, || format!("{steps} steps: error {err:.2e}"))?;
    }
    Ok("true noise recovers x0 at 1, 10, 50 steps".into())
}

fn checkpoint_round_trip(_: &Context) -> Result<String, String> {
    let cfg = grad::probe_config();
    let mut a = ToyDenoiser::<f32>::new(cfg.clone(), 3).map_err(|e| e.to_string())?;
    let buf = checkpoint::encode(&mut a, "probe");
    let ck = checkpoint::decode::<f32>(&buf).map_err(|e| e.to_string())?;
    let mut b = ToyDenoiser::<f32>::new(cfg, 4).map_err(|e| e.to_string())?;
    checkpoint::load_into(&mut b, &ck).map_err(|e| e.to_string())?;
    let mut va = Vec::new();
    a.visit_params("", &mut |_, p| va.extend(p.value.data().iter().map(|v| v.to_bits())));
    let mut vb = Vec::new();
    b.visit_params("", &mut |_, p| vb.extend(p.value.data().iter().map(|v| v.to_bits())));
    ensure(va == vb, || "parameters differ after reload".into())?;
    ensure(checkpoint::encode(&mut b, "probe") == buf, || "re-encoding differs".into())?;
    Ok(format!("{} parameters bit-equal", va.len()))
}

pub const HUNGARIAN_CASES: usize = 1000;

fn hungarian(_: &Context) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..HUNGARIAN_CASES {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=6);
        let m: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) })
            .collect();
        let got = total(&m, cols, &hungarian_match(&m, rows, cols));
        let want = brute_force_total(&m, rows, cols);
        ensure((got - want).abs() < 1e-9, || format!("case {case} ({rows}x{cols}): {got} vs {want}"))?;
    }
    Ok(format!("{HUNGARIAN_CASES} matrices up to 6x6"))
}

fn detect_round_trip(_: &Context) -> Result<String, String> {
    let mut g = SceneGen::new(64, 64);
    g.allow_overlap = false;
    let mut found = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = g.layout(&mut rng);
        let scene = render::<f64>(&layout, 64, 64).map_err(|e| e.to_string())?;
        let dets = detect(&scene.image);
        for inst in &layout.instances {
            let hit = dets.iter().any(|d| iou(&d.bx, &inst.bx) >= 0.9 && d.color == inst.color && d.shape == inst.shape);
            ensure(hit, || format!("seed {seed}: {inst:?} not recovered"))?;
            found += 1;
        }
    }
    Ok(format!("{found} rendered instances recovered"))
}

fn config_round_trip(_: &Context) -> Result<String, String> {
    let mut cfg = RunConfig::default();
    for (k, v) in [("steps", "17"), ("alpha", "0.25"), ("injection", "mask"), ("self_attn", "false"), ("precision", "f64")] {
        cfg.set(k, v).map_err(|e| e.to_string())?;
    }
    let back = RunConfig::parse(&cfg.to_text()).map_err(|e| e.to_string())?;
    ensure(back == cfg, || "parsed echo differs".into())?;
    ensure(RunConfig::parse("bogus = 1").is_err(), || "unknown key accepted".into())?;
    Ok("echo parses back to the same config".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_properties_pass() {
        let ctx = Context::default();
        for m in ["roi", "blend", "eval", "config"] {
            for o in run(Some(m), &ctx) {
                assert!(o.passed, "{}/{}: {}", o.module, o.name, o.detail);
            }
        }
        for name in ["roi-size-schedule", "q-sample", "ddim-oracle-noise", "checkpoint-round-trip"] {
            let o = run(Some(name), &ctx);
            assert_eq!(o.len(), 1);
            assert!(o[0].passed, "{name}: {}", o[0].detail);
        }
    }

    #[test]
    fn filter_selects_module() {
        let names: Vec<_> = run(Some("roi"), &Context::default()).iter().map(|o| o.module).collect();
        assert!(!names.is_empty() && names.iter().all(|&m| m == "roi"));
    }

    #[test]
    fn sign_flip_breaks_adjointness() {
        let ctx = Context {
            fault: Some(Fault::UnpoolSignFlip),
        };
        let out = run(Some("roi/adjointness"), &ctx);
        assert!(!out[0].passed);
        assert!(out[0].detail.contains("unpool"));
    }
}

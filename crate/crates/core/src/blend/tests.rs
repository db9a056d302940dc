use super::*;
use crate::roi::{roi_align, roi_unpool, RoiBox, RoiBoxBatch};
use crate::tensor::gradcheck::check_scalar_fn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    global: Tensor<f64>,
    inst: Tensor<f64>,
    occ: OccupancyMask<f64>,
    weight: Tensor<f64>,
    bias: Tensor<f64>,
}

fn random_box(rng: &mut ChaCha8Rng) -> RoiBox {
    let x1 = rng.gen_range(0.0..0.6);
    let y1 = rng.gen_range(0.0..0.6);
    RoiBox::new(x1, y1, x1 + rng.gen_range(0.2..0.4), y1 + rng.gen_range(0.2..0.4)).unwrap()
}

fn case(seed: u64, b: usize, n: usize, c: usize, h: usize, w: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut boxes = RoiBoxBatch::new(b, n);
    for bi in 0..b {
        for k in 0..n {
            if rng.gen_bool(0.8) {
                boxes.set(bi, k, random_box(&mut rng));
            }
        }
    }
    let feat = Tensor::randn(&[b, c, h, w], 1.0, &mut rng);
    let roi = roi_align(&feat, &boxes, 3).unwrap();
    let (inst, occ) = roi_unpool(&roi, &boxes, h, w).unwrap();
    Case {
        global: Tensor::randn(&[b, c, h, w], 1.0, &mut rng),
        inst,
        occ,
        weight: Tensor::randn(&[1, c], 1.0, &mut rng),
        bias: Tensor::randn(&[1], 1.0, &mut rng),
    }
}

#[test]
fn no_instances_gives_global() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Tensor::<f64>::randn(&[1, 3, 4, 4], 1.0, &mut rng);
    let inst = Tensor::zeros(&[1, 1, 3, 4, 4]);
    let occ = OccupancyMask {
        weights: Tensor::zeros(&[1, 1, 1, 4, 4]),
    };
    let (f, w) = learnable_blend(&g, &inst, &occ, &Tensor::randn(&[1, 3], 1.0, &mut rng), &Tensor::scalar(0.3)).unwrap();
    assert_eq!(f, g);
    assert!(w.weights.data()[..16].iter().all(|&v| v == 1.0));
    assert!(w.weights.data()[16..].iter().all(|&v| v == 0.0));
}

#[test]
fn single_slot_sample_is_all_global() {
    let g = vec![1.5, -2.0, 0.25];
    let (f, w) = blend_sample::<f64>(&[&g], &[], 1, 3, &[0.7], 0.1);
    assert_eq!(f, g);
    assert_eq!(w, vec![1.0; 3]);
}

#[test]
fn full_box_with_zero_conv_averages() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let boxes = RoiBoxBatch::single(&[RoiBox::full()]);
    let feat = Tensor::<f64>::randn(&[1, 2, 4, 4], 1.0, &mut rng);
    let (inst, occ) = roi_unpool(&roi_align(&feat, &boxes, 4).unwrap(), &boxes, 4, 4).unwrap();
    let g = Tensor::randn(&[1, 2, 4, 4], 1.0, &mut rng);
    let (f, w) = learnable_blend(&g, &inst, &occ, &Tensor::zeros(&[1, 2]), &Tensor::zeros(&[1])).unwrap();
    assert!(w.weights.data().iter().all(|&v| v == 0.5));
    for i in 0..32 {
        assert!((f.data()[i] - (g.data()[i] + inst.data()[i]) / 2.0).abs() < 1e-15);
    }
}

#[test]
fn outside_footprint_is_bit_equal_to_global() {
    for seed in 0..20 {
        let c = case(seed, 2, 3, 3, 6, 7);
        let (f, _) = learnable_blend(&c.global, &c.inst, &c.occ, &c.weight, &c.bias).unwrap();
        let fg = ForegroundMask::from_occupancy(&c.occ);
        for bi in 0..2 {
            for ch in 0..3 {
                for p in 0..42 {
                    if !fg.mask.data[bi * 42 + p] {
                        let i = (bi * 3 + ch) * 42 + p;
                        assert_eq!(f.data()[i].to_bits(), c.global.data()[i].to_bits());
                    }
                }
            }
        }
    }
}

#[test]
fn reg_loss_examples() {
    let m = ForegroundMask {
        mask: Mask::new(&[1, 1, 2, 3], vec![true, true, true, true, false, false]).unwrap(),
    };
    let field = |w0: [f64; 6]| {
        let mut d = w0.to_vec();
        d.extend(w0.iter().map(|v| 1.0 - v));
        BlendWeights {
            weights: Tensor::from_vec(&[1, 2, 1, 2, 3], d).unwrap(),
        }
    };
    assert_eq!(reg_loss(&field([0.0, 0.0, 0.0, 0.0, 1.0, 1.0]), &m), 0.0);
    assert_eq!(reg_loss(&field([1.0, 1.0, 1.0, 1.0, 0.0, 0.3]), &m), 1.0);
    assert_eq!(reg_loss(&field([1.0, 0.5, 0.0, 0.5, 0.9, 0.9]), &m), 0.5);
    let empty = ForegroundMask {
        mask: Mask::all(&[1, 1, 2, 3], false),
    };
    assert_eq!(reg_loss(&field([1.0; 6]), &empty), 0.0);
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(1.0, 0.0, DEFAULT_ALPHA), 1.0);
    assert_eq!(total_loss(0.0, 1.0, DEFAULT_ALPHA), 0.01);
    assert!((total_loss(2.0, 0.5, 0.1) - 2.05).abs() < 1e-15);
}

/// `⟨fused, probe⟩ + α·reg` as a function of a flat vector of
/// (global, instances, weight, bias).
fn objective(c: &Case, probe: &Tensor<f64>, alpha: f64, flat: &[f64]) -> f64 {
    let (ng, ni, nw) = (c.global.numel(), c.inst.numel(), c.weight.numel());
    let g = Tensor::from_vec(c.global.shape(), flat[..ng].to_vec()).unwrap();
    let i = Tensor::from_vec(c.inst.shape(), flat[ng..ng + ni].to_vec()).unwrap();
    let w = Tensor::from_vec(c.weight.shape(), flat[ng + ni..ng + ni + nw].to_vec()).unwrap();
    let b = Tensor::from_vec(&[1], vec![flat[ng + ni + nw]]).unwrap();
    let (f, wts) = learnable_blend(&g, &i, &c.occ, &w, &b).unwrap();
    f.dot(probe) + alpha * reg_loss(&wts, &ForegroundMask::from_occupancy(&c.occ))
}

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        let c = case(100 + seed, 1, 2, 2, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let probe = Tensor::randn(c.global.shape(), 1.0, &mut rng);
        let alpha = 0.7;
        let (_, wts) = learnable_blend(&c.global, &c.inst, &c.occ, &c.weight, &c.bias).unwrap();
        let fg = ForegroundMask::from_occupancy(&c.occ);
        let gw0 = reg_loss_vjp(&wts, &fg, alpha);
        let gr = learnable_blend_vjp(&c.global, &c.inst, &c.occ, &c.weight, &wts, &probe, Some(&gw0));
        let mut point = c.global.data().to_vec();
        point.extend_from_slice(c.inst.data());
        point.extend_from_slice(c.weight.data());
        point.extend_from_slice(c.bias.data());
        let mut analytic = gr.global.data().to_vec();
        analytic.extend_from_slice(gr.instances.data());
        analytic.extend_from_slice(gr.weight.data());
        analytic.extend_from_slice(gr.bias.data());
        let coords: Vec<usize> = (0..point.len()).collect();
        let report = check_scalar_fn(&mut |x| objective(&c, &probe, alpha, x), &point, &analytic, &coords, 1e-4);
        assert!(report.passed(1e-4), "seed {seed}: {report:?}");
    }
}

#[test]
fn reg_step_lowers_global_weight_on_foreground() {
    for seed in 0..20 {
        let c = case(200 + seed, 1, 3, 3, 6, 6);
        let fg = ForegroundMask::from_occupancy(&c.occ);
        if fg.count() == 0 {
            continue;
        }
        let (_, wts) = learnable_blend(&c.global, &c.inst, &c.occ, &c.weight, &c.bias).unwrap();
        let before = reg_loss(&wts, &fg);
        let gw0 = reg_loss_vjp(&wts, &fg, 1.0);
        let zero = Tensor::zeros(c.global.shape());
        let gr = learnable_blend_vjp(&c.global, &c.inst, &c.occ, &c.weight, &wts, &zero, Some(&gw0));
        let mut w2 = c.weight.clone();
        w2.axpy(-1e-2, &gr.weight).unwrap();
        let (_, wts2) = learnable_blend(&c.global, &c.inst, &c.occ, &w2, &c.bias).unwrap();
        let after = reg_loss(&wts2, &fg);
        assert!(after < before, "seed {seed}: {before} -> {after}");
    }
}

proptest! {
    #[test]
    fn valid_slots_partition_unity(seed in 0u64..10_000) {
        let c = case(seed, 1, 3, 2, 5, 5);
        let (_, wts) = learnable_blend(&c.global, &c.inst, &c.occ, &c.weight, &c.bias).unwrap();
        for p in 0..25 {
            let mut s = wts.weights.data()[p];
            prop_assert!(s > 0.0);
            for k in 0..3 {
                let v = wts.weights.data()[(k + 1) * 25 + p];
                if c.occ.is_occupied(0, k, p) {
                    s += v;
                } else {
                    prop_assert_eq!(v, 0.0);
                }
            }
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

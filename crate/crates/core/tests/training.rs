use roictrl_core::attention::CoordFrame;
use roictrl_core::config::{Ablation, RunConfig};
use roictrl_core::diffusion::checkpoint;
use roictrl_core::diffusion::train::{example_seed, example_step, make_example, snr_weight, train, TrainConfig};
use roictrl_core::diffusion::NoiseSchedule;
use roictrl_core::diffusion::ToyDenoiser;
use roictrl_core::param::Parameterized;

fn small() -> TrainConfig {
    let mut c = TrainConfig::default();
    c.model.height = 16;
    c.model.width = 16;
    c.model.channels = [4, 8];
    c.model.attn_dim = 4;
    c.model.caption_dim = 4;
    c.model.time_dim = 8;
    c.steps = 12;
    c.batch = 2;
    c.log_every = 1;
    c
}

fn bits(m: &mut ToyDenoiser<f64>) -> Vec<u64> {
    let mut v = Vec::new();
    m.visit_params("", &mut |_, p| v.extend(p.value.data().iter().map(|x| x.to_bits())));
    v
}

#[test]
fn same_seed_same_trajectory() {
    let cfg = small();
    let mut a = train::<f64>(&cfg, None, &mut |_| {}).unwrap();
    let mut b = train::<f64>(&cfg, None, &mut |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(bits(&mut a.model), bits(&mut b.model));
    let threaded = TrainConfig { threads: 3, ..cfg.clone() };
    let mut c = train::<f64>(&threaded, None, &mut |_| {}).unwrap();
    assert_eq!(bits(&mut a.model), bits(&mut c.model));
    let other = TrainConfig { seed: 1, ..cfg };
    let d = train::<f64>(&other, None, &mut |_| {}).unwrap();
    assert_ne!(a.log[9].loss, d.log[9].loss);
}

#[test]
fn zero_alpha_logs_reg_but_ignores_it() {
    let cfg = TrainConfig { alpha: 0.0, ..small() };
    let out = train::<f64>(&cfg, None, &mut |_| {}).unwrap();
    assert!(out.log.iter().all(|r| r.loss == r.l_ldm));
    assert!(out.log.iter().any(|r| r.l_reg > 0.0));

    let mut m = ToyDenoiser::<f64>::new(cfg.model.clone(), 0).unwrap();
    let schedule = cfg.schedule().unwrap();
    let gen = cfg.scene_gen();
    let ex = (0..20)
        .map(|s| make_example::<f64>(example_seed(5, s, 0), &gen, cfg.timesteps))
        .find(|e| !e.scene.layout.instances.is_empty())
        .unwrap();
    let grads = |m: &mut ToyDenoiser<f64>, alpha: f64| {
        let mut m = m.clone();
        m.zero_grads();
        example_step(&mut m, &ex, &schedule, alpha, 0.0, 1).unwrap();
        let mut g = Vec::new();
        m.visit_params("", &mut |_, p| g.extend_from_slice(p.grad.data()));
        g
    };
    let g0 = grads(&mut m, 0.0);
    assert_eq!(g0, grads(&mut m, 0.0));
    assert_ne!(g0, grads(&mut m, 1.0));
}

#[test]
fn fixed_batch_loss_drops_over_200_steps() {
    let cfg = TrainConfig {
        steps: 200,
        ..TrainConfig::default()
    };
    let schedule = cfg.schedule().unwrap();
    let gen = cfg.scene_gen();
    let batch: Vec<_> = (0..8).map(|i| make_example::<f32>(example_seed(777, 0, i), &gen, cfg.timesteps)).collect();
    let loss = |m: &ToyDenoiser<f32>| {
        batch
            .iter()
            .map(|ex| example_step(&mut m.clone(), ex, &schedule, 0.0, cfg.snr_gamma, 1).unwrap().0)
            .sum::<f64>()
            / batch.len() as f64
    };
    let before = loss(&ToyDenoiser::new(cfg.model.clone(), cfg.seed).unwrap());
    let after = loss(&train::<f32>(&cfg, None, &mut |_| {}).unwrap().model);
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn snr_weight_caps_low_noise_steps() {
    let s = NoiseSchedule::ddpm_default();
    for t in [0, 10, 100, 500, 999] {
        assert_eq!(snr_weight(&s, t, 0.0), 1.0);
        let ab = s.alpha_bars[t];
        let snr = ab / (1.0 - ab);
        let w = snr_weight(&s, t, 5.0);
        if snr <= 5.0 {
            assert_eq!(w, 1.0);
        } else {
            assert!((w - 5.0 / snr).abs() < 1e-15);
        }
    }
    assert!(snr_weight(&s, 0, 5.0) < 1e-3);
}

#[test]
fn averaged_weights_lag_the_iterate() {
    let raw = train::<f64>(&TrainConfig { ema: 0.0, ..small() }, None, &mut |_| {}).unwrap();
    let avg = train::<f64>(&TrainConfig { ema: 0.9, ..small() }, None, &mut |_| {}).unwrap();
    assert_eq!(raw.log, avg.log);
    let init = ToyDenoiser::<f64>::new(small().model, 0).unwrap();
    let flat = |m: &mut ToyDenoiser<f64>| {
        let mut v = Vec::new();
        m.visit_params("", &mut |_, p| v.extend_from_slice(p.value.data()));
        v
    };
    let (mut r, mut a, mut i) = (raw.model, avg.model, init);
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
    let (fi, fr, fa) = (flat(&mut i), flat(&mut r), flat(&mut a));
    assert!(dist(&fa, &fi) < dist(&fr, &fi));
    assert!(dist(&fa, &fi) > 0.0);
}

fn fingerprint_and_count(a: Option<Ablation>) -> (Vec<String>, usize) {
    let mut cfg = RunConfig::default();
    if let Some(a) = a {
        cfg.apply_ablation(a);
    }
    let mut m = ToyDenoiser::<f32>::new(cfg.train.model, 0).unwrap();
    (m.fingerprint(), m.param_count())
}

#[test]
fn ablations_change_only_their_part_of_the_graph() {
    let (base, n) = fingerprint_and_count(None);
    let diff = |a: Ablation| {
        let (f, k) = fingerprint_and_count(Some(a));
        let removed: Vec<String> = base.iter().filter(|s| !f.contains(s)).cloned().collect();
        let added: Vec<String> = f.iter().filter(|s| !base.contains(s)).cloned().collect();
        (removed, added, k)
    };

    let (removed, added, k) = diff(Ablation::NoSelfAttn);
    assert_eq!(removed, ["adapter_hi.roi_self_attention", "adapter_lo.roi_self_attention"]);
    assert!(added.is_empty());
    assert!(k < n);

    assert_eq!(diff(Ablation::NoReg), (vec![], vec![], n));
    let mut cfg = RunConfig::default();
    cfg.apply_ablation(Ablation::NoReg);
    assert_eq!(cfg.train.alpha, 0.0);

    let (removed, added, k) = diff(Ablation::LocalCoord);
    assert_eq!(removed, [format!("adapter_hi.box_guidance({:?})", CoordFrame::Global), format!("adapter_lo.box_guidance({:?})", CoordFrame::Global)]);
    assert_eq!(added, [format!("adapter_hi.box_guidance({:?})", CoordFrame::Local), format!("adapter_lo.box_guidance({:?})", CoordFrame::Local)]);
    assert_eq!(k, n);

    let (removed, added, k) = diff(Ablation::SingleScale);
    assert_eq!(
        removed,
        ["adapter_hi.roi_align(r=25)", "adapter_hi.roi_unpool(r=25)", "adapter_lo.roi_align(r=19)", "adapter_lo.roi_unpool(r=19)"]
    );
    assert_eq!(added, ["adapter_hi.roi_align(r=7)", "adapter_hi.roi_unpool(r=7)", "adapter_lo.roi_align(r=7)", "adapter_lo.roi_unpool(r=7)"]);
    assert!(k < n);
}

#[test]
fn checkpoint_is_tagged_and_rejects_other_manifests() {
    let cfg = small();
    let mut m = ToyDenoiser::<f32>::new(cfg.model.clone(), 0).unwrap();
    let buf = checkpoint::encode(&mut m, "steps = 12\n");
    assert_eq!(&buf[..8], b"ROICTRL1");
    assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 4);
    let ck = checkpoint::decode::<f32>(&buf).unwrap();
    assert_eq!(ck.config, "steps = 12\n");
    assert_eq!(ck.tensors.len(), m.param_names().len());

    let mut other = cfg.model.clone();
    other.self_attn = false;
    let mut n = ToyDenoiser::<f32>::new(other, 0).unwrap();
    assert!(checkpoint::load_into(&mut n, &ck).is_err());
    assert!(checkpoint::decode::<f32>(&buf[..buf.len() - 1]).is_err());
    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(checkpoint::decode::<f32>(&bad).is_err());
}

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
height = 16
width = 16
channels_hi = 4
channels_lo = 4
attn_dim = 4
caption_dim = 4
time_dim = 4
steps = 3
batch = 2
log_every = 1
eval_scenes = 3
sample_steps = 3
";

fn roictrl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_roictrl")).args(args).output().expect("spawn roictrl")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn verify_roi_passes_and_sign_flip_names_adjointness() {
    let ok = roictrl(&["verify", "--filter", "roi"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stdout));
    let table = String::from_utf8_lossy(&ok.stdout);
    assert!(table.lines().skip(1).filter(|l| l.starts_with("roi")).count() >= 5);
    assert!(!table.contains("blend"));

    let bad = roictrl(&["verify", "--filter", "roi", "--inject-fault", "unpool-sign-flip"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("adjointness"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(roictrl(&["train", "--ablate", "bogus"]).status.code(), Some(2));
    assert_eq!(roictrl(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(roictrl(&["verify", "--filter", "nothing-matches"]).status.code(), Some(2));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "steps = 3\n\nwidht = 4\n").unwrap();
    let out = roictrl(&["train", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("widht"), "{err}");

    let out = roictrl(&["eval", "--checkpoint", s(&dir.path().join("missing.bin"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let out = roictrl(&["train", "--config", &cfg, "--seed", "4", "--out", s(&a)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.bin", "loss.csv", "config.txt"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let log = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,l_ldm,l_reg"));
    assert_eq!(log.lines().count(), 4);

    // Re-running from the echoed config reproduces the checkpoint.
    let b = dir.path().join("b");
    let out = roictrl(&["train", "--config", s(&a.join("config.txt")), "--out", s(&b)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(std::fs::read(a.join("checkpoint.bin")).unwrap(), std::fs::read(b.join("checkpoint.bin")).unwrap());

    let ck = a.join("checkpoint.bin");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        let out = roictrl(&["eval", "--checkpoint", s(&ck), "--out", s(e)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let m1 = std::fs::read(e1.join("metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(e2.join("metrics.csv")).unwrap());
    assert!(String::from_utf8_lossy(&m1).starts_with("track,n_instances,size_bucket,mIoU,acc_color,acc_shape,success_rate\n"));
    assert!(e1.join("samples/scene_000.ppm").is_file());

    let out = roictrl(&["eval", "--checkpoint", s(&ck), "--set", "steps=9", "--out", s(&e1)]);
    assert_eq!(out.status.code(), Some(2));
}

fn manifest(path: &Path) -> Vec<String> {
    let ck = roictrl_core::diffusion::checkpoint::read::<f32>(path).unwrap();
    ck.tensors.into_iter().map(|(n, _)| n).collect()
}

#[test]
fn no_self_attn_checkpoint_lacks_roi_self_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let full = dir.path().join("full");
    let ablated = dir.path().join("ablated");
    assert!(roictrl(&["train", "--config", &cfg, "--set", "steps=1", "--out", s(&full)]).status.success());
    assert!(roictrl(&["train", "--config", &cfg, "--set", "steps=1", "--ablate", "no-self-attn", "--out", s(&ablated)])
        .status
        .success());
    let with = manifest(&full.join("checkpoint.bin"));
    let without = manifest(&ablated.join("checkpoint.bin"));
    assert!(with.iter().any(|n| n.contains("roi_self")));
    assert!(!without.iter().any(|n| n.contains("roi_self")));
    let echo = std::fs::read_to_string(ablated.join("config.txt")).unwrap();
    assert!(echo.contains("self_attn = false"));
}

#[test]
fn demo_is_bit_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (d, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        let out = roictrl(&["demo", "--config", &cfg, "--seed", seed, "--out", s(d)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let files: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .filter(|n| n.to_string_lossy().ends_with(".ppm"))
        .collect();
    assert_eq!(files.len(), 5);
    let mut differs = false;
    for f in &files {
        let x = std::fs::read(a.join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.join(f)).unwrap());
        differs |= x != std::fs::read(c.join(f)).unwrap();
    }
    assert!(differs);
    let wide = std::fs::read(a.join("04_wide.ppm")).unwrap();
    // Layout and sample side by side: 2 × 32 wide plus the gutter.
    assert!(wide.starts_with(b"P6\n66 16\n255\n"));
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = roictrl(&[
        "bench", "--sizes", "8,16", "--instances", "2", "--roi", "3", "--channels", "4", "--out", s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "path,h,w,r,n,c,L,flops_analytic,ns_median,bytes_peak");
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("mask,8,8,3,2,4,4,"));
    let peak: usize = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(peak > 0);
}

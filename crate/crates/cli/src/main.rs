//! `roictrl`: verify, bench, train, eval and demo for the toy ROI-control
//! pipeline.

mod gallery;
mod ppm;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use roictrl_core::bench::{self, BenchConfig, BenchOptions, BenchRow};
use roictrl_core::config::{Ablation, Precision, RunConfig};
use roictrl_core::diffusion::checkpoint;
use roictrl_core::diffusion::sample::ddim_sample;
use roictrl_core::diffusion::scene::{render, token_name};
use roictrl_core::diffusion::train::{conditions, train, write_log};
use roictrl_core::diffusion::ToyDenoiser;
use roictrl_core::eval::metrics::{report_csv, InstanceScore};
use roictrl_core::experiment::evaluate;
use roictrl_core::param::Parameterized;
use roictrl_core::verify::{self, Context, Fault};
use roictrl_core::{Error, Scalar};

#[global_allocator]
static ALLOC: bench::alloc::TrackingAllocator = bench::alloc::TrackingAllocator;

#[derive(Parser)]
#[command(name = "roictrl", version, about = "ROI-based instance control on a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// no-self-attn, no-reg, local-coord or single-scale; repeatable.
    #[arg(long, value_name = "NAME")]
    ablate: Vec<String>,
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
    /// f32 or f64.
    #[arg(long)]
    precision: Option<String>,
    /// Single `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the oracle suite and print a pass/fail table.
    Verify {
        /// Module (roi, attention, blend, diffusion, eval, config) or property name.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Time the mask and ROI injection paths over feature-map sizes.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Process instances in parallel (rows are labeled `+par`).
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, value_delimiter = ',', default_values_t = [32, 64, 128, 256])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 25)]
        instances: usize,
        #[arg(long, default_value_t = 25)]
        roi: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        #[arg(long, default_value_t = 4)]
        tokens: usize,
        #[arg(long, default_value_t = 1024)]
        budget_mb: usize,
    },
    /// Train the denoiser; writes checkpoint.bin, loss.csv and config.txt.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the held-out synthetic benchmark.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of sample images to keep.
        #[arg(long, default_value_t = 8)]
        keep: usize,
    },
    /// Generate the fixed scene gallery.
    Demo {
        #[command(flatten)]
        common: Common,
        /// Trained weights; without them the gallery shows an untrained model.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
}

/// Failure classes mapped to exit codes 2 and 1.
enum Failure {
    Usage(String),
    Invariant(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite { .. } => Failure::Invariant(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Verify { filter, inject_fault } => cmd_verify(filter.as_deref(), inject_fault.as_deref()),
        Command::Bench {
            common,
            parallel,
            repeats,
            sizes,
            instances,
            roi,
            channels,
            tokens,
            budget_mb,
        } => {
            let grid: Vec<BenchConfig> = sizes
                .iter()
                .map(|&s| BenchConfig {
                    h: s,
                    w: s,
                    r: roi,
                    n: instances,
                    c: channels,
                    l: tokens,
                })
                .collect();
            let opts = BenchOptions {
                seed: common.seed.unwrap_or(0),
                repeats,
                parallel,
                budget_bytes: budget_mb << 20,
            };
            cmd_bench(&common, &grid, &opts)
        }
        Command::Train { common } => cmd_train(&common),
        Command::Eval { common, checkpoint, keep } => cmd_eval(&common, &checkpoint, keep),
        Command::Demo { common, checkpoint } => cmd_demo(&common, checkpoint.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invariant(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn effective_config(common: &Common, base: RunConfig) -> Result<RunConfig, Failure> {
    let mut cfg = base;
    if let Some(p) = &common.config {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("config {}: {e}", p.display())))?;
        cfg.merge_text(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for a in &common.ablate {
        cfg.apply_ablation(Ablation::parse(a)?);
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    if let Some(p) = &common.precision {
        cfg.precision = Precision::parse(p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates the output directory and writes the config echo into it, so a
/// bad path fails before any work.
fn prepare_out(common: &Common, default: &str, echo: &str) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(default));
    std::fs::create_dir_all(&dir).map_err(|e| Failure::Usage(format!("output {}: {e}", dir.display())))?;
    std::fs::write(dir.join("config.txt"), echo).map_err(|e| Failure::Usage(format!("output {}: {e}", dir.display())))?;
    Ok(dir)
}

fn cmd_verify(filter: Option<&str>, fault: Option<&str>) -> Outcome {
    let fault = match fault {
        None => None,
        Some(f) => Some(Fault::parse(f).ok_or_else(|| Failure::Usage(format!("unknown fault {f:?}")))?),
    };
    if let Some(f) = filter {
        if !verify::properties().iter().any(|p| verify::selected(p, Some(f))) {
            return Err(Failure::Usage(format!("filter {f:?} matches no property")));
        }
    }
    let outcomes = verify::run(filter, &Context { fault });
    print!("{}", verify::table(&outcomes));
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!("{} of {} properties passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("failed invariants: {}", failed.join(", "))))
    }
}

fn cmd_bench(common: &Common, grid: &[BenchConfig], opts: &BenchOptions) -> Outcome {
    let echo = format!(
        "# bench\nseed = {}\nrepeats = {}\nparallel = {}\ngrid = {:?}\n",
        opts.seed, opts.repeats, opts.parallel, grid
    );
    let dir = prepare_out(common, "bench", &echo)?;
    let rows = bench::run_bench(grid, opts)?;
    let csv = bench::bench_csv(&rows);
    std::fs::write(dir.join("bench.csv"), &csv)?;
    print!("{csv}");
    if !bench::alloc::installed() {
        eprintln!("note: allocation tracking inactive");
    }
    let skipped = rows.iter().filter(|r| matches!(r, BenchRow::Skipped { .. })).count();
    if skipped > 0 {
        eprintln!("{skipped} configuration(s) skipped, see comments in bench.csv");
    }
    Ok(())
}

fn cmd_train(common: &Common) -> Outcome {
    let mut cfg = effective_config(common, RunConfig::default())?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let dir = prepare_out(common, "train", &cfg.to_text())?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &dir),
        Precision::F64 => train_as::<f64>(&cfg, &dir),
    }
}

fn train_as<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Outcome {
    let start = std::time::Instant::now();
    let every = (cfg.train.steps / 20).max(1);
    let mut out = train::<T>(&cfg.train, Some(dir), &mut |r| {
        if r.step % every == 0 || r.step == 1 {
            eprintln!(
                "step {:>6}  loss {:.5}  l_ldm {:.5}  l_reg {:.4}  {:.0}s",
                r.step,
                r.loss,
                r.l_ldm,
                r.l_reg,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    write_log(&dir.join("loss.csv"), &out.log)?;
    checkpoint::save(&dir.join("checkpoint.bin"), &mut out.model, &cfg.to_text())?;
    println!(
        "trained {} parameters for {} steps in {:.1}s -> {}",
        out.model.param_count(),
        cfg.train.steps,
        start.elapsed().as_secs_f64(),
        dir.display()
    );
    Ok(())
}

/// Reads a checkpoint and the run config stored with it.
fn load_model<T: Scalar>(path: &Path) -> Result<(ToyDenoiser<T>, RunConfig), Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = checkpoint::read::<T>(path)?;
    let cfg = RunConfig::parse(&ck.config).map_err(|e| Failure::Usage(format!("checkpoint config: {e}")))?;
    let mut model = ToyDenoiser::<T>::new(cfg.train.model.clone(), cfg.train.seed)?;
    checkpoint::load_into(&mut model, &ck)?;
    Ok((model, cfg))
}

fn checkpoint_precision(path: &Path) -> Result<Precision, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    let ck = checkpoint::read::<f32>(path)?;
    Ok(RunConfig::parse(&ck.config).map_err(|e| Failure::Usage(format!("checkpoint config: {e}")))?.precision)
}

fn cmd_eval(common: &Common, ck: &Path, keep: usize) -> Outcome {
    match checkpoint_precision(ck)? {
        Precision::F32 => eval_as::<f32>(common, ck, keep),
        Precision::F64 => eval_as::<f64>(common, ck, keep),
    }
}

fn track_name(cfg: &RunConfig) -> String {
    let m = &cfg.train.model;
    let mut t = m.injection.name().to_string();
    if !m.self_attn && m.injection == roictrl_core::diffusion::Injection::Roi {
        t.push_str("-no-self-attn");
    }
    if cfg.train.alpha == 0.0 {
        t.push_str("-no-reg");
    }
    t
}

fn eval_as<T: Scalar>(common: &Common, ck: &Path, keep: usize) -> Outcome {
    let (model, stored) = load_model::<T>(ck)?;
    let mut cfg = effective_config(&Common { ablate: vec![], ..common.clone() }, stored.clone())?;
    if !common.ablate.is_empty() {
        return Err(Failure::Usage("--ablate applies to train; eval uses the checkpoint's model".into()));
    }
    if cfg.train != stored.train {
        return Err(Failure::Usage("eval may only change eval_* and sample_steps keys".into()));
    }
    if let Some(s) = common.seed {
        cfg.eval_seed = s;
    }
    let dir = prepare_out(common, "eval", &cfg.to_text())?;
    let start = std::time::Instant::now();
    let out = evaluate(&model, &cfg)?;
    let track = track_name(&cfg);
    std::fs::write(dir.join("metrics.csv"), report_csv(&track, &out.scores))?;
    std::fs::write(dir.join("instances.csv"), instances_csv(&out.scores))?;
    let samples = dir.join("samples");
    std::fs::create_dir_all(&samples)?;
    for (i, img) in out.images.iter().take(keep).enumerate() {
        ppm::write(&samples.join(format!("scene_{i:03}.ppm")), img)?;
    }
    let s = out.summary;
    println!(
        "{track}: {} instances  mIoU {:.4}  color {:.4}  shape {:.4}  success {:.4}  ({:.0}s)",
        s.count,
        s.miou,
        s.acc_color,
        s.acc_shape,
        s.success_rate,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn instances_csv(scores: &[InstanceScore]) -> String {
    let opt = |v: Option<bool>| v.map_or("na".to_string(), |b| b.to_string());
    let mut s = String::from("index,n_instances,small,iou,matched,color_ok,shape_ok\n");
    for (i, r) in scores.iter().enumerate() {
        s.push_str(&format!(
            "{i},{},{},{:.6},{},{},{}\n",
            r.n_instances,
            r.small,
            r.iou,
            r.matched,
            opt(r.color_ok),
            opt(r.shape_ok)
        ));
    }
    s
}

fn cmd_demo(common: &Common, ck: Option<&Path>) -> Outcome {
    let precision = match ck {
        Some(p) => checkpoint_precision(p)?,
        None => effective_config(common, RunConfig::default())?.precision,
    };
    match precision {
        Precision::F32 => demo_as::<f32>(common, ck),
        Precision::F64 => demo_as::<f64>(common, ck),
    }
}

fn demo_as<T: Scalar>(common: &Common, ck: Option<&Path>) -> Outcome {
    let (model, cfg) = match ck {
        Some(p) => {
            let (m, stored) = load_model::<T>(p)?;
            (m, effective_config(&Common { ablate: vec![], ..common.clone() }, stored)?)
        }
        None => {
            let cfg = effective_config(common, RunConfig::default())?;
            eprintln!("note: no checkpoint given, sampling an untrained model");
            (ToyDenoiser::<T>::new(cfg.train.model.clone(), cfg.train.seed)?, cfg)
        }
    };
    let seed = common.seed.unwrap_or(0);
    let mut echo = cfg.to_text();
    echo.push_str(&format!("# demo noise seed\n# seed = {seed}\n"));
    let dir = prepare_out(common, "demo", &echo)?;
    let schedule = cfg.train.schedule()?;
    let (h, w) = (cfg.train.model.height, cfg.train.model.width);
    let mut listing = String::new();
    for (i, (name, fh, fw, layout)) in gallery::scenes().into_iter().enumerate() {
        let m = model.at_size(h * fh, w * fw)?;
        let truth = render::<T>(&layout, h * fh, w * fw)?;
        let img = ddim_sample(&m, &conditions(&layout), &schedule, cfg.sample_steps, seed.wrapping_add(i as u64))?;
        ppm::write(&dir.join(format!("{i:02}_{name}.ppm")), &ppm::strip(&[&truth.image, &img]))?;
        let captions: Vec<String> = layout
            .instances
            .iter()
            .map(|inst| {
                let words: Vec<&str> = inst.caption().iter().map(|&t| token_name(t)).collect();
                let b = inst.bx;
                format!("{} [{:.2},{:.2},{:.2},{:.2}]", words.join(" "), b.x1, b.y1, b.x2, b.y2)
            })
            .collect();
        listing.push_str(&format!("{i:02}_{name} {}x{}: {}\n", h * fh, w * fw, captions.join("; ")));
    }
    std::fs::write(dir.join("gallery.txt"), &listing)?;
    print!("{listing}");
    println!("layout | sample pairs written to {}", dir.display());
    Ok(())
}

//! Cost of instance injection: attention-mask path versus ROI path.

pub mod alloc;

use std::fmt::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::attention::{CaptionEmbedding, CaptionSource, CrossAttention};
use crate::error::{Error, Result};
use crate::roi::{align_into, footprint_area, quantized_edges, unpool_into, RoiBox};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "path,h,w,r,n,c,L,flops_analytic,ns_median,bytes_peak";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Path {
    Mask,
    Roi,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Mask => "mask",
            Path::Roi => "roi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub h: usize,
    pub w: usize,
    pub r: usize,
    pub n: usize,
    pub c: usize,
    pub l: usize,
}

/// Analytic FLOP counts of one injection step. Single-head attention with
/// width `c`; a query costs `4c²` for its input/output projections and
/// `4Lc` for scores and the weighted sum. Caption key/value projections
/// (`4Lc²` per caption) are identical for both paths and reported apart.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Flops {
    pub global: f64,
    pub caption: f64,
    pub instance_attention: f64,
    pub scatter: f64,
}

impl Flops {
    pub fn total(&self) -> f64 {
        self.global + self.caption + self.instance_attention + self.scatter
    }
}

pub fn attention_flops(queries: usize, c: usize, l: usize) -> f64 {
    queries as f64 * (4.0 * (c * c) as f64 + 4.0 * (l * c) as f64)
}

/// Mask path: each instance attends from all `h·w` positions and is masked
/// (one multiply per channel and pixel). ROI path: each instance attends
/// from `r²` positions; align costs 8 flops per channel and cell (4 taps),
/// unpool 8 per channel and footprint pixel. `footprint` is the summed
/// footprint area of the instances, in pixels.
pub fn flop_model(path: Path, cfg: &BenchConfig, footprint: usize) -> Flops {
    let BenchConfig { h, w, r, n, c, l } = *cfg;
    let global = attention_flops(h * w, c, l);
    let caption = (n + 1) as f64 * 4.0 * (l * c * c) as f64;
    let (instance_attention, scatter) = match path {
        Path::Mask => (n as f64 * attention_flops(h * w, c, l), (n * c * h * w) as f64),
        Path::Roi => (
            n as f64 * attention_flops(r * r, c, l),
            8.0 * (c * n * r * r) as f64 + 8.0 * (c * footprint) as f64,
        ),
    };
    Flops {
        global,
        caption,
        instance_attention,
        scatter,
    }
}

/// One measured row.
#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub path: Path,
    pub parallel: bool,
    pub config: BenchConfig,
    pub flops: Flops,
    pub ns_median: u128,
    pub bytes_peak: usize,
}

impl CostReport {
    pub fn csv(&self) -> String {
        let c = &self.config;
        let path = if self.parallel {
            format!("{}+par", self.path.name())
        } else {
            self.path.name().to_string()
        };
        format!(
            "{path},{},{},{},{},{},{},{},{},{}",
            c.h,
            c.w,
            c.r,
            c.n,
            c.c,
            c.l,
            self.flops.total(),
            self.ns_median,
            self.bytes_peak
        )
    }
}

/// Random boxes with sides between 1/8 and 1/3 of the image.
pub fn bench_boxes(n: usize, seed: u64) -> Vec<RoiBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let bw = rng.gen_range(0.125..0.34);
            let bh = rng.gen_range(0.125..0.34);
            let x = rng.gen_range(0.0..1.0 - bw);
            let y = rng.gen_range(0.0..1.0 - bh);
            RoiBox::new(x, y, x + bw, y + bh).expect("valid box")
        })
        .collect()
}

struct Inputs {
    cross: CrossAttention<f32>,
    feature: Vec<f32>,
    global: CaptionEmbedding<f32>,
    captions: Vec<CaptionEmbedding<f32>>,
    boxes: Vec<RoiBox>,
}

fn inputs(cfg: &BenchConfig, seed: u64) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cap = |rng: &mut ChaCha8Rng, source| CaptionEmbedding {
        tokens: Tensor::randn(&[cfg.l, cfg.c], 1.0, rng),
        source,
    };
    Inputs {
        cross: CrossAttention::new(cfg.c, cfg.c, cfg.c, &mut rng),
        feature: Tensor::<f32>::randn(&[cfg.c, cfg.h, cfg.w], 1.0, &mut rng).into_vec(),
        global: cap(&mut rng, CaptionSource::Global),
        captions: (0..cfg.n).map(|i| cap(&mut rng, CaptionSource::Instance(i))).collect(),
        boxes: bench_boxes(cfg.n, seed ^ 0xB0C5),
    }
}

fn mask_instance(inp: &Inputs, cfg: &BenchConfig, i: usize) -> Vec<f32> {
    let hw = cfg.h * cfg.w;
    let (mut y, _) = inp.cross.forward(&inp.feature, hw, &inp.captions[i]).expect("widths");
    let ((x0, x1), (y0, y1)) = quantized_edges(&inp.boxes[i], cfg.h, cfg.w);
    for ch in 0..cfg.c {
        for py in 0..cfg.h {
            for px in 0..cfg.w {
                if !(py >= y0 && py < y1 && px >= x0 && px < x1) {
                    y[ch * hw + py * cfg.w + px] = 0.0;
                }
            }
        }
    }
    y
}

fn roi_instance(inp: &Inputs, cfg: &BenchConfig, i: usize) -> Vec<f32> {
    let rr = cfg.r * cfg.r;
    let mut roi = vec![0.0; cfg.c * rr];
    align_into(&inp.feature, cfg.c, cfg.h, cfg.w, &inp.boxes[i], cfg.r, &mut roi);
    let (a, _) = inp.cross.forward(&roi, rr, &inp.captions[i]).expect("widths");
    let mut out = vec![0.0; cfg.c * cfg.h * cfg.w];
    unpool_into(&a, cfg.c, cfg.r, &inp.boxes[i], cfg.h, cfg.w, &mut out);
    out
}

/// One injection step: global attention plus every instance, summed.
fn run_path(inp: &Inputs, cfg: &BenchConfig, path: Path, parallel: bool) -> f32 {
    let hw = cfg.h * cfg.w;
    let (g, _) = inp.cross.forward(&inp.feature, hw, &inp.global).expect("widths");
    let one = |i: usize| match path {
        Path::Mask => mask_instance(inp, cfg, i),
        Path::Roi => roi_instance(inp, cfg, i),
    };
    let outs: Vec<Vec<f32>> = if parallel {
        (0..cfg.n).into_par_iter().map(one).collect()
    } else {
        (0..cfg.n).map(one).collect()
    };
    let mut acc = g;
    for o in &outs {
        for (a, &v) in acc.iter_mut().zip(o) {
            *a += v;
        }
    }
    acc.iter().sum()
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub seed: u64,
    pub repeats: usize,
    pub parallel: bool,
    /// Configurations whose largest transient buffer would exceed this
    /// many bytes are skipped.
    pub budget_bytes: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 5,
            parallel: false,
            budget_bytes: 1 << 30,
        }
    }
}

/// Rough upper bound on transient bytes of the mask path.
pub fn estimated_bytes(cfg: &BenchConfig) -> usize {
    4 * cfg.h * cfg.w * (4 * cfg.c + 2 * cfg.l) * (cfg.n + 2)
}

pub enum BenchRow {
    Measured(CostReport),
    Skipped { config: BenchConfig, reason: String },
}

/// Times both paths on every configuration (median of `repeats` runs after
/// one warm-up).
pub fn run_bench(grid: &[BenchConfig], opts: &BenchOptions) -> Result<Vec<BenchRow>> {
    if opts.repeats < 5 {
        return Err(Error::Param("at least 5 timed repeats are required".into()));
    }
    let mut rows = Vec::new();
    for cfg in grid {
        if cfg.h == 0 || cfg.w == 0 || cfg.r == 0 || cfg.c == 0 || cfg.l == 0 {
            return Err(Error::Param(format!("non-positive extent in {cfg:?}")));
        }
        let need = estimated_bytes(cfg);
        if need > opts.budget_bytes {
            rows.push(BenchRow::Skipped {
                config: *cfg,
                reason: format!("needs ~{need} bytes, budget {}", opts.budget_bytes),
            });
            continue;
        }
        let inp = inputs(cfg, opts.seed);
        let footprint: usize = inp.boxes.iter().map(|b| footprint_area(b, cfg.h, cfg.w)).sum();
        for path in [Path::Mask, Path::Roi] {
            std::hint::black_box(run_path(&inp, cfg, path, opts.parallel));
            let mut times = Vec::with_capacity(opts.repeats);
            let mut peak = 0;
            for _ in 0..opts.repeats {
                let start = Instant::now();
                let (v, bytes) = alloc::measure(|| run_path(&inp, cfg, path, opts.parallel));
                times.push(start.elapsed().as_nanos());
                std::hint::black_box(v);
                peak = peak.max(bytes);
            }
            times.sort_unstable();
            rows.push(BenchRow::Measured(CostReport {
                path,
                parallel: opts.parallel,
                config: *cfg,
                flops: flop_model(path, cfg, footprint),
                ns_median: times[times.len() / 2],
                bytes_peak: peak,
            }));
        }
    }
    Ok(rows)
}

/// CSV with the formulas in leading comment lines.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::new();
    s.push_str("# attention flops per query = 4c^2 + 4Lc; global = h*w queries\n");
    s.push_str("# mask: n*h*w queries + n*c*h*w masking; roi: n*r^2 queries + 8c(n*r^2 + footprint)\n");
    s.push_str("# caption projections 4Lc^2 per caption, both paths\n");
    let _ = writeln!(s, "{CSV_HEADER}");
    for r in rows {
        match r {
            BenchRow::Measured(c) => {
                let _ = writeln!(s, "{}", c.csv());
            }
            BenchRow::Skipped { config, reason } => {
                let _ = writeln!(s, "# skipped {config:?}: {reason}");
            }
        }
    }
    s
}

/// Default grid: square maps from 32 to 256 with 25 instances and r = 25.
pub fn default_grid() -> Vec<BenchConfig> {
    [32, 64, 128, 256]
        .iter()
        .map(|&s| BenchConfig {
            h: s,
            w: s,
            r: 25,
            n: 25,
            c: 64,
            l: 4,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(h: usize, r: usize, n: usize) -> BenchConfig {
        BenchConfig { h, w: h, r, n, c: 64, l: 4 }
    }

    #[test]
    fn no_instances_cost_only_global() {
        for p in [Path::Mask, Path::Roi] {
            let f = flop_model(p, &cfg(64, 25, 0), 0);
            assert_eq!(f.instance_attention + f.scatter, 0.0);
            assert_eq!(f.global, attention_flops(64 * 64, 64, 4));
        }
    }

    #[test]
    fn equal_query_counts_give_equal_attention() {
        let c = cfg(16, 16, 3);
        assert_eq!(flop_model(Path::Mask, &c, 768).instance_attention, flop_model(Path::Roi, &c, 768).instance_attention);
    }

    #[test]
    fn table_ratio() {
        let c = cfg(128, 25, 25);
        let ratio = flop_model(Path::Roi, &c, 0).instance_attention / flop_model(Path::Mask, &c, 0).instance_attention;
        assert_eq!(ratio, 625.0 / 16384.0);
    }

    #[test]
    fn roi_attention_constant_in_resolution_and_linear_in_n() {
        let base = flop_model(Path::Roi, &cfg(32, 25, 25), 0).instance_attention;
        for h in [64, 128, 256] {
            assert_eq!(flop_model(Path::Roi, &cfg(h, 25, 25), 0).instance_attention, base);
        }
        for p in [Path::Mask, Path::Roi] {
            let a = flop_model(p, &cfg(64, 25, 5), 0).instance_attention;
            let b = flop_model(p, &cfg(64, 25, 10), 0).instance_attention;
            assert_eq!(b, 2.0 * a);
        }
    }

    #[test]
    fn small_bench_runs_and_is_deterministic_in_flops() {
        let grid = vec![BenchConfig { h: 16, w: 16, r: 4, n: 2, c: 8, l: 2 }];
        let a = run_bench(&grid, &BenchOptions::default()).unwrap();
        let b = run_bench(&grid, &BenchOptions::default()).unwrap();
        let flops = |rows: &[BenchRow]| -> Vec<f64> {
            rows.iter()
                .filter_map(|r| match r {
                    BenchRow::Measured(c) => Some(c.flops.total()),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(flops(&a).len(), 2);
        assert_eq!(flops(&a), flops(&b));
        let csv = bench_csv(&a);
        assert!(csv.lines().any(|l| l == CSV_HEADER));
        let small = BenchOptions {
            budget_bytes: 10,
            ..Default::default()
        };
        assert!(matches!(run_bench(&grid, &small).unwrap()[0], BenchRow::Skipped { .. }));
    }
}

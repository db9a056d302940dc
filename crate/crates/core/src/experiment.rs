//! Train/evaluate pipeline shared by the command line and the acceptance
//! suite.

use crate::config::RunConfig;
use crate::diffusion::sample::ddim_sample;
use crate::diffusion::scene::{SceneGen, ToyScene};
use crate::diffusion::train::conditions;
use crate::diffusion::{NoiseSchedule, ToyDenoiser};
use crate::error::Result;
use crate::eval::metrics::{bench_metrics, InstanceScore, Summary};
use crate::tensor::{Scalar, Tensor};

/// Held-out scenes: non-overlapping layouts seeded from `eval_seed`.
pub fn eval_scenes<T: Scalar>(cfg: &RunConfig) -> Vec<ToyScene<T>> {
    let m = &cfg.train.model;
    let mut g = SceneGen::new(m.height, m.width);
    g.min_instances = cfg.eval_min_instances;
    g.max_instances = cfg.eval_max_instances;
    g.allow_overlap = false;
    (0..cfg.eval_scenes as u64).map(|i| g.scene(cfg.eval_seed + i)).collect()
}

/// One DDIM sample per scene; scene `i` uses noise seed `seed + i`.
pub fn generate<T: Scalar>(
    model: &ToyDenoiser<T>,
    scenes: &[ToyScene<T>],
    schedule: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Vec<Tensor<T>>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| ddim_sample(model, &conditions(&s.layout), schedule, steps, seed.wrapping_add(i as u64)))
        .collect()
}

pub struct EvalOutcome<T> {
    pub summary: Summary,
    pub scores: Vec<InstanceScore>,
    pub images: Vec<Tensor<T>>,
}

pub fn evaluate<T: Scalar>(model: &ToyDenoiser<T>, cfg: &RunConfig) -> Result<EvalOutcome<T>> {
    let scenes = eval_scenes(cfg);
    let images = generate(model, &scenes, &cfg.train.schedule()?, cfg.sample_steps, cfg.eval_seed)?;
    let (summary, scores) = bench_metrics(&scenes, &images);
    Ok(EvalOutcome { summary, scores, images })
}

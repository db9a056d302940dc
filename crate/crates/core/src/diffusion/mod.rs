//! Desk-scale pixel-space diffusion: schedule, synthetic scenes, the toy
//! denoiser with instance-control adapters, training and DDIM sampling.

pub mod adapter;
pub mod checkpoint;
pub mod model;
pub mod sample;
pub mod scene;
pub mod schedule;
pub mod train;

pub use adapter::{Conditions, Injection};
pub use model::{ModelConfig, ToyDenoiser};
pub use scene::{synth_scene, Layout, SceneGen, ToyScene};
pub use sample::{ddim_sample, ddim_sample_with};
pub use schedule::{q_sample, roi_size, NoiseSchedule};

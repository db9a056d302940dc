//! Flat `key = value` run configuration.

use std::fmt::Write;

use crate::attention::CoordFrame;
use crate::diffusion::train::TrainConfig;
use crate::diffusion::Injection;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("precision must be f32 or f64, got {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    NoSelfAttn,
    NoReg,
    LocalCoord,
    SingleScale,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoSelfAttn, Ablation::NoReg, Ablation::LocalCoord, Ablation::SingleScale];

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoSelfAttn => "no-self-attn",
            Ablation::NoReg => "no-reg",
            Ablation::LocalCoord => "local-coord",
            Ablation::SingleScale => "single-scale",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub precision: Precision,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub eval_min_instances: usize,
    pub eval_max_instances: usize,
    pub sample_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            precision: Precision::F32,
            eval_scenes: 200,
            eval_seed: 1 << 40,
            eval_min_instances: 1,
            eval_max_instances: 6,
            sample_steps: 50,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "1" | "on" => Some(true),
        "false" | "no" | "0" | "off" => Some(false),
        _ => None,
    }
}

impl RunConfig {
    pub fn apply_ablation(&mut self, a: Ablation) {
        let m = &mut self.train.model;
        match a {
            Ablation::NoSelfAttn => m.self_attn = false,
            Ablation::NoReg => self.train.alpha = 0.0,
            Ablation::LocalCoord => m.coord = CoordFrame::Local,
            Ablation::SingleScale => m.single_scale = true,
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("invalid value {value:?} for key {key:?}"));
        macro_rules! num {
            () => {
                value.parse().map_err(|_| bad())?
            };
        }
        let t = &mut self.train;
        let m = &mut t.model;
        match key {
            "height" => m.height = num!(),
            "width" => m.width = num!(),
            "channels_hi" => m.channels[0] = num!(),
            "channels_lo" => m.channels[1] = num!(),
            "attn_dim" => m.attn_dim = num!(),
            "caption_dim" => m.caption_dim = num!(),
            "time_dim" => m.time_dim = num!(),
            "injection" => {
                m.injection = match value {
                    "roi" => Injection::Roi,
                    "mask" => Injection::Mask,
                    _ => return Err(bad()),
                }
            }
            "self_attn" => m.self_attn = parse_bool(value).ok_or_else(bad)?,
            "coord" => {
                m.coord = match value {
                    "global" => CoordFrame::Global,
                    "local" => CoordFrame::Local,
                    _ => return Err(bad()),
                }
            }
            "single_scale" => m.single_scale = parse_bool(value).ok_or_else(bad)?,
            "steps" => t.steps = num!(),
            "batch" => t.batch = num!(),
            "lr" => t.lr = num!(),
            "alpha" => t.alpha = num!(),
            "seed" => t.seed = num!(),
            "log_every" => t.log_every = num!(),
            "timesteps" => t.timesteps = num!(),
            "min_instances" => t.min_instances = num!(),
            "max_instances" => t.max_instances = num!(),
            "allow_overlap" => t.allow_overlap = parse_bool(value).ok_or_else(bad)?,
            "grad_clip" => t.grad_clip = num!(),
            "ema" => t.ema = num!(),
            "snr_gamma" => t.snr_gamma = num!(),
            "threads" => t.threads = num!(),
            "precision" => self.precision = Precision::parse(value)?,
            "eval_scenes" => self.eval_scenes = num!(),
            "eval_seed" => self.eval_seed = num!(),
            "eval_min_instances" => self.eval_min_instances = num!(),
            "eval_max_instances" => self.eval_max_instances = num!(),
            "sample_steps" => self.sample_steps = num!(),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        self.validate()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.merge_text(text)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        t.model.validate()?;
        if t.steps == 0 || t.batch == 0 || t.timesteps == 0 {
            return Err(Error::Config("steps, batch and timesteps must be positive".into()));
        }
        if !(t.lr > 0.0) || !(t.alpha >= 0.0) {
            return Err(Error::Config("lr must be positive and alpha nonnegative".into()));
        }
        if !(0.0..1.0).contains(&t.ema) {
            return Err(Error::Config("ema must be in [0, 1)".into()));
        }
        if t.min_instances > t.max_instances || self.eval_min_instances > self.eval_max_instances {
            return Err(Error::Config("min_instances exceeds max_instances".into()));
        }
        if self.sample_steps == 0 || self.sample_steps > t.timesteps {
            return Err(Error::Config("sample_steps must be in [1, timesteps]".into()));
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let mut s = String::new();
        let coord = match m.coord {
            CoordFrame::Global => "global",
            CoordFrame::Local => "local",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("channels_hi", m.channels[0].to_string()),
            ("channels_lo", m.channels[1].to_string()),
            ("attn_dim", m.attn_dim.to_string()),
            ("caption_dim", m.caption_dim.to_string()),
            ("time_dim", m.time_dim.to_string()),
            ("injection", m.injection.name().to_string()),
            ("self_attn", m.self_attn.to_string()),
            ("coord", coord.to_string()),
            ("single_scale", m.single_scale.to_string()),
            ("steps", t.steps.to_string()),
            ("batch", t.batch.to_string()),
            ("lr", format!("{:?}", t.lr)),
            ("alpha", format!("{:?}", t.alpha)),
            ("seed", t.seed.to_string()),
            ("log_every", t.log_every.to_string()),
            ("timesteps", t.timesteps.to_string()),
            ("min_instances", t.min_instances.to_string()),
            ("max_instances", t.max_instances.to_string()),
            ("allow_overlap", t.allow_overlap.to_string()),
            ("grad_clip", format!("{:?}", t.grad_clip)),
            ("ema", format!("{:?}", t.ema)),
            ("snr_gamma", format!("{:?}", t.snr_gamma)),
            ("threads", t.threads.to_string()),
            ("precision", self.precision.name().to_string()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_min_instances", self.eval_min_instances.to_string()),
            ("eval_max_instances", self.eval_max_instances.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

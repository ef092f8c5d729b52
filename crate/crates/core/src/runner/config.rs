//! Flat `key = value` run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{SupervisionForm, ThresholdConfig, ThresholdMode};
use crate::error::{Error, Result};
use crate::generation::{GenerationConfig, Process, QueryFill};
use crate::schedule::ScheduleKind;
use crate::unet::{Fusion, Injection, Interaction, MultiplicationDomain, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    LinearDecay,
    Constant,
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_decay" => Ok(Self::LinearDecay),
            "constant" => Ok(Self::Constant),
            other => Err(Error::Config(format!("unknown lr schedule `{other}`"))),
        }
    }
}

/// Everything a run needs. Every field can be set from text by its name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    // data
    /// Manifest path; empty means an in-memory synthetic dataset.
    pub data: String,
    pub canvas: usize,
    pub num_classes: usize,
    pub images_per_class: usize,
    pub num_folds: usize,
    pub fold: usize,

    // network
    pub widths: Vec<usize>,
    pub blocks_per_level: usize,
    pub num_heads: usize,
    pub ctx_dim: usize,
    pub ffn_mult: usize,
    pub interaction: Interaction,
    pub injection: Injection,
    pub multiplication_domain: MultiplicationDomain,
    pub fusion: Fusion,
    pub fusion_layers: Option<Vec<bool>>,
    pub patch: usize,

    // generation
    pub supervision_form: SupervisionForm,
    pub process: Process,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    pub train_steps: usize,
    pub ensemble: usize,
    pub query_fill: QueryFill,
    pub threshold_mode: ThresholdMode,
    pub tau: f64,

    // shots
    pub n_shot_min: usize,
    pub n_shot_max: usize,
    pub n_shot_infer: usize,
    pub infer_kv_sampling: bool,

    // optimisation
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub grad_accum: usize,
    pub iterations: usize,
    /// When positive, train on this many fixed episodes instead of fresh draws.
    pub train_episodes: usize,
    /// Evaluate on the training episodes every this many iterations (0 = never).
    pub eval_every: usize,
    /// Stop once the training-episode mIoU reaches this value (0 = never).
    pub early_stop_miou: f64,
    pub checkpoint_every: usize,

    // evaluation
    pub eval_episodes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let unet = UNetConfig::toy(64);
        let gen = GenerationConfig::default();
        let thr = ThresholdConfig::default();
        Self {
            seed: 0,
            data: String::new(),
            canvas: 64,
            num_classes: 8,
            images_per_class: 8,
            num_folds: 4,
            fold: 0,
            widths: unet.widths,
            blocks_per_level: unet.blocks_per_level,
            num_heads: unet.num_heads,
            ctx_dim: unet.ctx_dim,
            ffn_mult: unet.ffn_mult,
            interaction: unet.interaction,
            injection: unet.injection,
            multiplication_domain: unet.multiplication_domain,
            fusion: unet.fusion,
            fusion_layers: None,
            patch: unet.patch,
            supervision_form: SupervisionForm::WhiteOnBlack,
            process: gen.process,
            steps: gen.steps,
            beta_start: gen.beta_start,
            beta_end: gen.beta_end,
            schedule: gen.schedule,
            train_steps: gen.train_steps,
            ensemble: gen.ensemble,
            query_fill: gen.query_fill,
            threshold_mode: thr.mode,
            tau: thr.tau,
            n_shot_min: 1,
            n_shot_max: 1,
            n_shot_infer: 1,
            infer_kv_sampling: false,
            lr: 1e-3,
            weight_decay: 0.01,
            lr_schedule: LrSchedule::LinearDecay,
            grad_accum: 4,
            iterations: 2000,
            train_episodes: 0,
            eval_every: 0,
            early_stop_miou: 0.0,
            checkpoint_every: 0,
            eval_episodes: 100,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

impl RunConfig {
    /// The large-scale optimiser settings: lr 1e-5 with linear decay over
    /// 10k iterations, 4-step accumulation, 512-pixel canvases.
    pub fn large_scale_preset() -> Self {
        Self { lr: 1e-5, iterations: 10_000, grad_accum: 4, canvas: 512, ..Self::default() }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "data" => self.data = v.to_string(),
            "canvas" => self.canvas = parse(key, v)?,
            "num_classes" => self.num_classes = parse(key, v)?,
            "images_per_class" => self.images_per_class = parse(key, v)?,
            "num_folds" => self.num_folds = parse(key, v)?,
            "fold" => self.fold = parse(key, v)?,
            "widths" => self.widths = parse_list(key, v)?,
            "blocks_per_level" => self.blocks_per_level = parse(key, v)?,
            "num_heads" => self.num_heads = parse(key, v)?,
            "ctx_dim" => self.ctx_dim = parse(key, v)?,
            "ffn_mult" => self.ffn_mult = parse(key, v)?,
            "interaction" => self.interaction = v.parse()?,
            "injection" => self.injection = v.parse()?,
            "multiplication_domain" => self.multiplication_domain = v.parse()?,
            "fusion" => self.fusion = v.parse()?,
            "fusion_layers" => {
                self.fusion_layers = if v == "all" {
                    None
                } else {
                    Some(v.split(',').map(|b| parse_bool(key, b.trim())).collect::<Result<_>>()?)
                }
            }
            "patch" => self.patch = parse(key, v)?,
            "supervision_form" => self.supervision_form = v.parse()?,
            "process" => self.process = v.parse()?,
            "steps" => self.steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "schedule" => self.schedule = v.parse()?,
            "train_steps" => self.train_steps = parse(key, v)?,
            "ensemble" => self.ensemble = parse(key, v)?,
            "query_fill" => self.query_fill = v.parse()?,
            "threshold_mode" => self.threshold_mode = v.parse()?,
            "tau" => self.tau = parse(key, v)?,
            "n_shot_min" => self.n_shot_min = parse(key, v)?,
            "n_shot_max" => self.n_shot_max = parse(key, v)?,
            "n_shot_infer" => self.n_shot_infer = parse(key, v)?,
            "infer_kv_sampling" => self.infer_kv_sampling = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "lr_schedule" => self.lr_schedule = v.parse()?,
            "grad_accum" => self.grad_accum = parse(key, v)?,
            "iterations" => self.iterations = parse(key, v)?,
            "train_episodes" => self.train_episodes = parse(key, v)?,
            "eval_every" => self.eval_every = parse(key, v)?,
            "early_stop_miou" => self.early_stop_miou = parse(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    /// Reads `key = value` lines; blank lines and `#` comments are ignored.
    pub fn parse_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.parse_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    pub fn unet(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: 48,
            widths: self.widths.clone(),
            blocks_per_level: self.blocks_per_level,
            num_heads: self.num_heads,
            ctx_dim: self.ctx_dim,
            ffn_mult: self.ffn_mult,
            interaction: self.interaction,
            injection: self.injection,
            multiplication_domain: self.multiplication_domain,
            fusion: self.fusion,
            fusion_layers: self.fusion_layers.clone(),
            patch: self.patch,
            canvas: self.canvas,
        }
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            process: self.process,
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            schedule: self.schedule,
            train_steps: self.train_steps,
            ensemble: self.ensemble,
            query_fill: self.query_fill,
        }
    }

    pub fn threshold(&self) -> Result<ThresholdConfig> {
        ThresholdConfig::new(self.threshold_mode, self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.grad_accum < 1 {
            return bad("grad_accum must be at least 1");
        }
        if self.n_shot_min < 1 || self.n_shot_min > self.n_shot_max {
            return bad("n_shot range must satisfy 1 <= n_shot_min <= n_shot_max");
        }
        if self.n_shot_infer < 1 {
            return bad("n_shot_infer must be at least 1");
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive and weight_decay non-negative");
        }
        if self.canvas % 4 != 0 || (self.canvas / 4) % (1 << (self.widths.len().max(1) - 1)) != 0 {
            return bad("canvas must be divisible by 4 times the total downsampling");
        }
        self.unet().validate()?;
        self.generation().validate()?;
        self.threshold()?;
        Ok(())
    }

    /// Learning rate for 0-based iteration `i`.
    pub fn lr_at(&self, i: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::LinearDecay => self.lr * (1.0 - i as f64 / self.iterations as f64),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

//! The three mask-generation processes: one-step image-to-mask (OI2M),
//! multi-step noise-to-mask (MN2M) and multi-step image-to-mask (MI2M).
//!
//! All three train the network to predict the clean mask latent; they differ
//! in what occupies the second half of the query input and in how inference
//! iterates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{
    mask_to_rgb, prediction_scores, threshold, BinaryMask, Codec, ImageTensor, LatentTensor, ScoreMap,
    SupervisionForm, ThresholdConfig,
};
use crate::data::Episode;
use crate::error::{Error, Result};
use crate::schedule::{
    add_noise, eps_from_prediction, make_schedule, mix_image_as_noise, NoiseSample, NoiseSchedule, ScheduleKind,
};
use crate::unet::{prepare_support, BranchInput, ForwardOptions, PreparedSupport, Role, UNet, UNetConfig};

/// The low-variance schedule endpoints used by Stable Diffusion.
pub const BETA_1: (f64, f64) = (0.00085, 0.012);
/// The high-variance endpoints.
pub const BETA_2: (f64, f64) = (0.0272, 0.384);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Process {
    #[default]
    Oi2m,
    Mn2m,
    Mi2m,
}

impl Process {
    pub const ALL: [Process; 3] = [Self::Oi2m, Self::Mn2m, Self::Mi2m];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Oi2m => "oi2m",
            Self::Mn2m => "mn2m",
            Self::Mi2m => "mi2m",
        }
    }
}

impl std::str::FromStr for Process {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown generation process `{s}`")))
    }
}

/// What fills the query's second latent slot in one-step mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryFill {
    #[default]
    Zero,
    Image,
}

impl std::str::FromStr for QueryFill {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "image" => Ok(Self::Image),
            other => Err(Error::Config(format!("unknown query fill `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub process: Process,
    /// Inference steps for the multi-step processes (one-step always uses 1).
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: ScheduleKind,
    /// Length `T` of the training noise schedule.
    pub train_steps: usize,
    /// Number of noise draws whose score maps are averaged (MN2M only).
    pub ensemble: usize,
    pub query_fill: QueryFill,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            process: Process::Oi2m,
            steps: 50,
            beta_start: BETA_1.0,
            beta_end: BETA_1.1,
            schedule: ScheduleKind::ScaledLinear,
            train_steps: 1000,
            ensemble: 1,
            query_fill: QueryFill::Zero,
        }
    }
}

impl GenerationConfig {
    pub fn inference_steps(&self) -> usize {
        match self.process {
            Process::Oi2m => 1,
            _ => self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble must be at least 1".into()));
        }
        if self.ensemble > 1 && self.process != Process::Mn2m {
            return Err(Error::Config(format!(
                "ensemble {} is only meaningful for mn2m, not {}",
                self.ensemble,
                self.process.as_str()
            )));
        }
        if self.process != Process::Oi2m && !(1..=self.train_steps).contains(&self.steps) {
            return Err(Error::Config(format!(
                "steps {} must lie in 1..={}",
                self.steps, self.train_steps
            )));
        }
        make_schedule(self.train_steps, self.beta_start, self.beta_end, self.schedule).map(|_| ())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.train_steps, self.beta_start, self.beta_end, self.schedule)
    }
}

/// An episode with its latents and prepared supports.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedEpisode {
    pub z_q: LatentTensor,
    /// Encoded supervision image of the query mask.
    pub z_mq: LatentTensor,
    pub supports: Vec<PreparedSupport>,
    pub query_image: ImageTensor,
    pub query_mask: BinaryMask,
    pub class_id: usize,
}

pub fn encode_episode(
    codec: &Codec,
    ep: &Episode,
    unet: &UNetConfig,
    form: SupervisionForm,
) -> Result<EncodedEpisode> {
    let supports = ep
        .supports
        .iter()
        .map(|(img, mask)| prepare_support(codec, img, mask, unet))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedEpisode {
        z_q: codec.encode(&ep.query_image)?,
        z_mq: codec.encode(&mask_to_rgb(&ep.query_mask, &ep.query_image, form)?)?,
        supports,
        query_image: ep.query_image.clone(),
        query_mask: ep.query_mask.clone(),
        class_id: ep.class_id,
    })
}

/// Encodes a query with no known mask, for prediction only.
pub fn encode_query(
    codec: &Codec,
    query: &ImageTensor,
    supports: &[(ImageTensor, BinaryMask)],
    unet: &UNetConfig,
    class_id: usize,
) -> Result<EncodedEpisode> {
    let z_q = codec.encode(query)?;
    Ok(EncodedEpisode {
        z_mq: LatentTensor::zeros(z_q.h, z_q.w, z_q.c),
        z_q,
        supports: supports
            .iter()
            .map(|(img, mask)| prepare_support(codec, img, mask, unet))
            .collect::<Result<Vec<_>>>()?,
        query_image: query.clone(),
        query_mask: BinaryMask::filled(query.h, query.w, false),
        class_id,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub query: BranchInput,
    pub supports: Vec<PreparedSupport>,
    pub target: LatentTensor,
    pub timestep: Option<usize>,
}

fn query_input(z_q: &LatentTensor, second: &LatentTensor) -> Result<BranchInput> {
    BranchInput::new(z_q.concat_channels(second)?, Role::Query, z_q.c)
}

fn one_step_input(ep: &EncodedEpisode, fill: QueryFill) -> Result<BranchInput> {
    match fill {
        QueryFill::Zero => query_input(&ep.z_q, &LatentTensor::zeros(ep.z_q.h, ep.z_q.w, ep.z_q.c)),
        QueryFill::Image => query_input(&ep.z_q, &ep.z_q),
    }
}

/// Builds the network input and target for one training step.
pub fn build_train_sample<R: Rng + ?Sized>(
    ep: &EncodedEpisode,
    gen: &GenerationConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<TrainSample> {
    let (query, timestep) = match gen.process {
        Process::Oi2m => (one_step_input(ep, gen.query_fill)?, None),
        Process::Mn2m => {
            let t = rng.random_range(0..sched.len());
            let eps = NoiseSample::like(&ep.z_mq, rng.random());
            (query_input(&ep.z_q, &add_noise(&ep.z_mq, &eps, t, sched)?)?, Some(t))
        }
        Process::Mi2m => {
            let t = rng.random_range(0..sched.len());
            (query_input(&ep.z_q, &mix_image_as_noise(&ep.z_mq, &ep.z_q, t, sched)?)?, Some(t))
        }
    };
    Ok(TrainSample { query, supports: ep.supports.clone(), target: ep.z_mq.clone(), timestep })
}

/// Mean squared error over all latent elements.
pub fn loss(prediction: &LatentTensor, target: &LatentTensor) -> Result<f64> {
    prediction.check_same_shape(target)?;
    let n = prediction.data.len() as f64;
    Ok(prediction.data.iter().zip(&target.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Deterministic DDIM update from step `t` to `t_prev` (`-1` = finished),
/// given the network's clean-latent estimate `z_hat`.
pub fn ddim_step(
    z_t: &LatentTensor,
    z_hat: &LatentTensor,
    t: usize,
    t_prev: i64,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    if t_prev < -1 || t_prev >= t as i64 {
        return Err(Error::TimestepOrder { t, t_prev });
    }
    z_t.check_same_shape(z_hat)?;
    if t_prev == -1 {
        return Ok(z_hat.clone());
    }
    let eps = eps_from_prediction(z_t, z_hat, t, sched)?;
    let ab = sched.alpha_bar_or_one(t_prev)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z_hat.data.iter().zip(&eps.data).map(|(z, e)| a * z + b * e).collect();
    Ok(LatentTensor::from_vec(z_t.h, z_t.w, z_t.c, data))
}

/// Anything that maps a query input plus supports to a clean mask latent.
pub trait LatentPredictor {
    fn predict(
        &self,
        query: &BranchInput,
        supports: &[PreparedSupport],
        opts: &ForwardOptions,
    ) -> Result<LatentTensor>;
}

impl LatentPredictor for UNet {
    fn predict(
        &self,
        query: &BranchInput,
        supports: &[PreparedSupport],
        opts: &ForwardOptions,
    ) -> Result<LatentTensor> {
        self.dual_forward(query, supports, opts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub form: SupervisionForm,
    pub threshold: ThresholdConfig,
    pub kv_sampling: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub mask: BinaryMask,
    pub scores: ScoreMap,
    /// Final latent of the last ensemble member.
    pub latent: LatentTensor,
    pub calls: usize,
}

/// Runs the configured pipeline and post-processes the result into a mask.
pub fn infer<P: LatentPredictor + ?Sized>(
    model: &P,
    ep: &EncodedEpisode,
    gen: &GenerationConfig,
    codec: &Codec,
    opts: &InferOptions,
    seed: u64,
) -> Result<Inference> {
    gen.validate()?;
    let sched = gen.schedule()?;
    let kv = opts.kv_sampling.then_some(seed);
    let mut calls = 0;
    let mut run = |member: u64| -> Result<LatentTensor> {
        match gen.process {
            Process::Oi2m => {
                calls += 1;
                let q = one_step_input(ep, gen.query_fill)?;
                model.predict(&q, &ep.supports, &ForwardOptions { timestep: None, kv_sampling: kv })
            }
            Process::Mn2m | Process::Mi2m => {
                let mut z = if gen.process == Process::Mn2m {
                    NoiseSample::like(&ep.z_q, seed.wrapping_add(member)).eps
                } else {
                    ep.z_q.clone()
                };
                let ts = sched.inference_timesteps(gen.steps)?;
                for (k, &t) in ts.iter().enumerate() {
                    calls += 1;
                    let q = query_input(&ep.z_q, &z)?;
                    let z_hat =
                        model.predict(&q, &ep.supports, &ForwardOptions { timestep: Some(t), kv_sampling: kv })?;
                    let t_prev = ts.get(k + 1).map_or(-1, |&p| p as i64);
                    z = ddim_step(&z, &z_hat, t, t_prev, &sched)?;
                }
                Ok(z)
            }
        }
    };
    let mut sum: Option<ScoreMap> = None;
    let mut latent = None;
    for member in 0..gen.ensemble as u64 {
        let z = run(member)?;
        let scores = prediction_scores(&codec.decode(&z)?, opts.form, Some(&ep.query_image))?;
        sum = Some(match sum {
            None => scores,
            Some(mut acc) => {
                acc.data.iter_mut().zip(&scores.data).for_each(|(a, b)| *a += b);
                acc
            }
        });
        latent = Some(z);
    }
    let mut scores = sum.expect("ensemble is at least 1");
    if gen.ensemble > 1 {
        let k = gen.ensemble as f64;
        scores.data.iter_mut().for_each(|v| *v /= k);
    }
    Ok(Inference {
        mask: threshold(&scores, &opts.threshold),
        scores,
        latent: latent.expect("ensemble is at least 1"),
        calls,
    })
}

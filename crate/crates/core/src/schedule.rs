//! Noise schedules and the forward-diffusion algebra on latents.
//!
//! Timesteps are 0-indexed: `t = 0` is the least noisy step. All schedule
//! arithmetic is carried out in `f64`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::LatentTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear in `sqrt(beta)`, the Stable Diffusion convention.
    #[default]
    ScaledLinear,
    Linear,
    Constant,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaled_linear" => Ok(Self::ScaledLinear),
            "linear" => Ok(Self::Linear),
            "constant" => Ok(Self::Constant),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars
            .get(t)
            .copied()
            .ok_or(Error::TimestepOutOfRange { t, len: self.len() })
    }

    /// `alpha_bar` with the convention that step `-1` is noiseless.
    pub fn alpha_bar_or_one(&self, t: i64) -> Result<f64> {
        if t < 0 {
            Ok(1.0)
        } else {
            self.alpha_bar(t as usize)
        }
    }

    /// Evenly spaced descending timesteps for an `steps`-step sampler.
    ///
    /// The first entry is always `T - 1`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::InvalidRange(format!(
                "inference steps {steps} must lie in 1..={total}"
            )));
        }
        Ok((0..steps).rev().map(|k| (k + 1) * total / steps - 1).collect())
    }
}

pub fn make_schedule(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    kind: ScheduleKind,
) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::InvalidRange("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidRange(format!(
            "require 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let lerp = |a: f64, b: f64, i: usize| {
        if steps == 1 {
            a
        } else {
            a + (b - a) * (i as f64) / ((steps - 1) as f64)
        }
    };
    let mut betas: Vec<f64> = match kind {
        ScheduleKind::Constant => vec![beta_start; steps],
        ScheduleKind::Linear => (0..steps).map(|i| lerp(beta_start, beta_end, i)).collect(),
        ScheduleKind::ScaledLinear => {
            let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
            (0..steps).map(|i| lerp(a, b, i).powi(2)).collect()
        }
    };
    // Pin the endpoints; squaring a square root can drift by an ulp.
    if kind != ScheduleKind::Constant {
        betas[0] = beta_start;
        if steps > 1 {
            betas[steps - 1] = beta_end;
        }
    }
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for b in &betas {
        prod *= 1.0 - b;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule { kind, betas, alpha_bars })
}

/// Seeded standard-normal noise shaped like a latent.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSample {
    pub eps: LatentTensor,
    pub seed: u64,
}

impl NoiseSample {
    pub fn draw(h: usize, w: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..h * w * c).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { eps: LatentTensor::from_vec(h, w, c, data), seed }
    }

    pub fn like(z: &LatentTensor, seed: u64) -> Self {
        Self::draw(z.h, z.w, z.c, seed)
    }
}

fn blend(a: &LatentTensor, wa: f64, b: &LatentTensor, wb: f64) -> Result<LatentTensor> {
    a.check_same_shape(b)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| wa * x + wb * y).collect();
    Ok(LatentTensor::from_vec(a.h, a.w, a.c, data))
}

/// `sqrt(ab_t)·z + sqrt(1-ab_t)·eps`
pub fn add_noise(
    z: &LatentTensor,
    eps: &NoiseSample,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    blend(z, ab.sqrt(), &eps.eps, (1.0 - ab).sqrt())
}

/// Forward process with the query image latent standing in for the noise.
pub fn mix_image_as_noise(
    z_mq: &LatentTensor,
    z_q: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    blend(z_mq, ab.sqrt(), z_q, (1.0 - ab).sqrt())
}

/// Recovers the noise implied by a clean-latent prediction.
pub fn eps_from_prediction(
    z_t: &LatentTensor,
    z_hat: &LatentTensor,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<LatentTensor> {
    let ab = sched.alpha_bar(t)?;
    eps_from_alpha_bar(z_t, z_hat, ab).ok_or(Error::DegenerateTimestep(t))?
}

pub(crate) fn eps_from_alpha_bar(
    z_t: &LatentTensor,
    z_hat: &LatentTensor,
    ab: f64,
) -> Option<Result<LatentTensor>> {
    if ab >= 1.0 {
        return None;
    }
    let s = (1.0 - ab).sqrt();
    Some(blend(z_t, 1.0 / s, z_hat, -ab.sqrt() / s))
}

//! Noise schedules and the deterministic DDIM update.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(ScheduleKind::LinearBeta),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScheduleKind::LinearBeta => f.write_str("linear-beta"),
            ScheduleKind::Cosine => f.write_str("cosine"),
        }
    }
}

const MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Signal/noise coefficients `z_t = lambda_t z_0 + sigma_t eps` for
/// `t = 0..steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
}

/// `alpha_bar(u)` of the cosine schedule at fractional time `u` in `[0, 1]`.
pub fn cosine_alpha_bar(u: f64) -> f64 {
    let f = |u: f64| ((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(u) / f(0.0)
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs at least 2 steps, got {steps}")));
        }
        let betas: Vec<f64> = match kind {
            // DDPM betas, rescaled so that short schedules still reach pure noise.
            ScheduleKind::LinearBeta => {
                let scale = 1000.0 / steps as f64;
                let (lo, hi) = (1e-4 * scale, 0.02 * scale);
                (0..steps)
                    .map(|i| (lo + (hi - lo) * i as f64 / (steps - 1) as f64).min(MAX_BETA))
                    .collect()
            }
            ScheduleKind::Cosine => (0..steps)
                .map(|i| {
                    let a0 = cosine_alpha_bar(i as f64 / steps as f64);
                    let a1 = cosine_alpha_bar((i + 1) as f64 / steps as f64);
                    (1.0 - a1 / a0).min(MAX_BETA)
                })
                .collect(),
        };
        let mut alpha_bar = 1.0;
        let mut lambda = Vec::with_capacity(steps);
        let mut sigma = Vec::with_capacity(steps);
        for b in betas {
            alpha_bar *= 1.0 - b;
            lambda.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(NoiseSchedule { kind, lambda, sigma })
    }

    pub fn steps(&self) -> usize {
        self.lambda.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::InvalidArgument(format!("timestep {t} outside schedule of {} steps", self.steps())));
        }
        Ok(())
    }

    /// `lambda_t z0 + sigma_t eps`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check_t(t)?;
        if z0.shape() != eps.shape() {
            return Err(Error::Shape(format!("z0 {:?} vs noise {:?}", z0.shape(), eps.shape())));
        }
        Ok(((z0 * self.lambda[t])? + (eps * self.sigma[t])?)?)
    }

    /// Batched variant with one timestep per leading index.
    pub fn add_noise_batch(&self, z0: &Tensor, eps: &Tensor, ts: &[usize]) -> Result<Tensor> {
        if z0.shape() != eps.shape() {
            return Err(Error::Shape(format!("z0 {:?} vs noise {:?}", z0.shape(), eps.shape())));
        }
        let b = z0.dim(0)?;
        if ts.len() != b {
            return Err(Error::Shape(format!("{} timesteps for batch of {b}", ts.len())));
        }
        for &t in ts {
            self.check_t(t)?;
        }
        let mut bshape = vec![1usize; z0.rank()];
        bshape[0] = b;
        let lam = Tensor::from_vec(ts.iter().map(|&t| self.lambda[t]).collect::<Vec<_>>(), bshape.clone(), z0.device())?;
        let sig = Tensor::from_vec(ts.iter().map(|&t| self.sigma[t]).collect::<Vec<_>>(), bshape, z0.device())?;
        Ok((z0.broadcast_mul(&lam)? + eps.broadcast_mul(&sig)?)?)
    }
}

/// Evenly spaced sub-schedule used at inference.
///
/// Level `k` in `1..=n_steps` maps to training timestep
/// `floor(k * T / n_steps) - 1`; level 0 is the clean endpoint
/// (`lambda = 1`, `sigma = 0`). Sampling starts at level `n_steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceSchedule {
    pub timesteps: Vec<usize>,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl InferenceSchedule {
    pub fn new(train: &NoiseSchedule, n_steps: usize) -> Result<Self> {
        let t_train = train.steps();
        if n_steps == 0 || n_steps > t_train {
            return Err(Error::InvalidArgument(format!(
                "inference steps {n_steps} must lie in 1..={t_train}"
            )));
        }
        let mut timesteps = vec![0];
        let mut lambda = vec![1.0];
        let mut sigma = vec![0.0];
        for k in 1..=n_steps {
            let t = k * t_train / n_steps - 1;
            timesteps.push(t);
            lambda.push(train.lambda[t]);
            sigma.push(train.sigma[t]);
        }
        Ok(InferenceSchedule {
            timesteps,
            lambda,
            sigma,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    pub fn check_level(&self, level: usize) -> Result<()> {
        if level == 0 || level > self.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "solver level {level} outside 1..={}",
                self.n_steps()
            )));
        }
        Ok(())
    }

    /// Deterministic DDIM update from `level` to `level - 1` given the
    /// predicted noise.
    pub fn ddim_step(&self, z: &Tensor, eps_hat: &Tensor, level: usize) -> Result<Tensor> {
        self.check_level(level)?;
        let (lam, sig) = (self.lambda[level], self.sigma[level]);
        let (lam_prev, sig_prev) = (self.lambda[level - 1], self.sigma[level - 1]);
        let x0 = ((z - (eps_hat * sig)?)? / lam)?;
        if level == 1 {
            return Ok(x0);
        }
        Ok(((x0 * lam_prev)? + (eps_hat * sig_prev)?)?)
    }
}

//! Classifier-guided sampling: sequential (SG) and differential (DG)
//! guidance over a deterministic DDIM loop, and long-video stitching by
//! first-frame conditioning.

use std::cell::RefCell;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::av_classifier::AvClassifier;
use crate::error::{Error, Result};
use crate::nn::ensure_finite;
use crate::univdm::{make_unified_input, Conditioning, InferenceSchedule, NoisePredictor, UnifiedInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Off,
    Sg,
    Dg,
}

impl FromStr for GuidanceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "off" => Ok(GuidanceMode::Off),
            "sg" => Ok(GuidanceMode::Sg),
            "dg" => Ok(GuidanceMode::Dg),
            other => Err(Error::Config(format!("unknown guidance mode `{other}`"))),
        }
    }
}

impl fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GuidanceMode::Off => "off",
            GuidanceMode::Sg => "sg",
            GuidanceMode::Dg => "dg",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSign {
    Ascend,
    Descend,
}

impl GuidanceSign {
    fn factor(self) -> f64 {
        match self {
            GuidanceSign::Ascend => 1.0,
            GuidanceSign::Descend => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub lambda_face: f64,
    pub lambda_nonface: f64,
    pub lambda_diff: f64,
    pub rate: f64,
    pub mode: GuidanceMode,
    pub n_steps: usize,
    pub sign: GuidanceSign,
    /// Divide the DG combination by `1 + lambda_diff`.
    pub dg_strict_noop: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            lambda_face: 0.1,
            lambda_nonface: 1.0,
            lambda_diff: 0.25,
            rate: 0.5,
            mode: GuidanceMode::Dg,
            n_steps: 20,
            sign: GuidanceSign::Ascend,
            dg_strict_noop: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("guidance rate {} outside [0, 1]", self.rate)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("n_steps must be positive".into()));
        }
        for (name, v) in [
            ("lambda_face", self.lambda_face),
            ("lambda_nonface", self.lambda_nonface),
            ("lambda_diff", self.lambda_diff),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Number of guided iterations, taken from the high-noise end.
    pub fn guided_steps(&self) -> usize {
        match self.mode {
            GuidanceMode::Off => 0,
            _ => ((self.rate * self.n_steps as f64) - 1e-9).ceil().max(0.0) as usize,
        }
    }
}

/// Complementary face / non-face maps at latent resolution `[B, F, h, w]`.
#[derive(Clone, Debug)]
pub struct RegionMasks {
    pub face: Tensor,
    pub nonface: Tensor,
}

impl RegionMasks {
    pub fn from_face(face: &Tensor) -> Result<Self> {
        Ok(RegionMasks {
            face: face.clone(),
            nonface: face.affine(-1.0, 1.0)?,
        })
    }

    pub fn narrow_frames(&self, start: usize, len: usize) -> Result<Self> {
        Ok(RegionMasks {
            face: self.face.narrow(1, start, len)?,
            nonface: self.nonface.narrow(1, start, len)?,
        })
    }
}

/// A source of region-masked sync gradients.
pub trait SyncGuide {
    /// `grad log s` at `z`, zero outside `mask`.
    fn gradient(&self, z: &Tensor, audio: &Tensor, t: &Tensor, mask: &Tensor) -> Result<Tensor>;
}

impl SyncGuide for AvClassifier {
    fn gradient(&self, z: &Tensor, audio: &Tensor, t: &Tensor, mask: &Tensor) -> Result<Tensor> {
        self.sync_gradient(z, audio, t, mask)
    }
}

/// Call counts and timings collected while sampling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub solver_calls: usize,
    pub gradient_calls: usize,
    pub guided_steps: usize,
    pub step_seconds: Vec<f64>,
    /// Solver calls made during each guided iteration.
    pub guided_solver_calls: Vec<usize>,
    pub guided_gradient_calls: Vec<usize>,
}

impl SamplerStats {
    pub fn total_seconds(&self) -> f64 {
        self.step_seconds.iter().sum()
    }

    pub fn merge(&mut self, other: &SamplerStats) {
        self.solver_calls += other.solver_calls;
        self.gradient_calls += other.gradient_calls;
        self.guided_steps += other.guided_steps;
        self.step_seconds.extend(&other.step_seconds);
        self.guided_solver_calls.extend(&other.guided_solver_calls);
        self.guided_gradient_calls.extend(&other.guided_gradient_calls);
    }
}

/// Intermediate states of one guided step.
#[derive(Clone, Debug)]
pub struct GuidedChain {
    pub z: Tensor,
    pub nonface: Tensor,
    pub face: Tensor,
    pub star: Tensor,
    pub level: usize,
}

/// Everything a guided sampler reads. Classifiers may be absent when the
/// mode is `Off`.
pub struct Sampler<'a, P: NoisePredictor> {
    pub model: &'a P,
    pub sched: &'a InferenceSchedule,
    pub face: Option<&'a dyn SyncGuide>,
    pub nonface: Option<&'a dyn SyncGuide>,
    pub cfg: &'a GuidanceConfig,
    stats: RefCell<SamplerStats>,
}

impl<'a, P: NoisePredictor> Sampler<'a, P> {
    pub fn new(
        model: &'a P,
        sched: &'a InferenceSchedule,
        face: Option<&'a dyn SyncGuide>,
        nonface: Option<&'a dyn SyncGuide>,
        cfg: &'a GuidanceConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if sched.n_steps() != cfg.n_steps {
            return Err(Error::Config(format!(
                "schedule has {} steps, guidance config {}",
                sched.n_steps(),
                cfg.n_steps
            )));
        }
        if cfg.mode != GuidanceMode::Off && cfg.guided_steps() > 0 && (face.is_none() || nonface.is_none()) {
            return Err(Error::MissingInput(format!("{} guidance needs both classifiers", cfg.mode)));
        }
        Ok(Sampler {
            model,
            sched,
            face,
            nonface,
            cfg,
            stats: RefCell::new(SamplerStats::default()),
        })
    }

    pub fn stats(&self) -> SamplerStats {
        self.stats.borrow().clone()
    }

    pub fn reset_stats(&self) {
        *self.stats.borrow_mut() = SamplerStats::default();
    }

    /// Plain solver call `f(z, level)`; the result carries no autograd history.
    pub fn solve(&self, z: &Tensor, cond: &Conditioning, level: usize) -> Result<Tensor> {
        self.stats.borrow_mut().solver_calls += 1;
        let b = z.dim(0)?;
        self.sched.check_level(level)?;
        let t = Tensor::full(self.sched.timesteps[level] as f64, b, z.device())?;
        let eps = self.model.predict_noise(z, &t, cond)?.detach();
        self.sched.ddim_step(z, &eps, level)
    }

    fn gradient(&self, guide: Option<&dyn SyncGuide>, z: &Tensor, cond: &Conditioning, level: usize, mask: &Tensor) -> Result<Tensor> {
        let guide = guide.ok_or_else(|| Error::MissingInput("classifier required for guidance".into()))?;
        self.stats.borrow_mut().gradient_calls += 1;
        let t = Tensor::full(self.sched.timesteps[level] as f64, z.dim(0)?, z.device())?;
        guide.gradient(z, &cond.audio, &t, mask)
    }

    /// Guides the state `z` at inference level `level`: the non-face
    /// gradient is taken at `z`, the face gradient at the non-face state,
    /// each is added to `z` under its mask, and `z* = z_face + z_nonface - z`.
    pub fn guide(&self, z: &Tensor, cond: &Conditioning, masks: &RegionMasks, level: usize) -> Result<GuidedChain> {
        let sigma = self.sched.sigma[level];
        let sign = self.cfg.sign.factor();
        let g_nf = self.gradient(self.nonface, z, cond, level, &masks.nonface)?;
        let nonface = (z + (g_nf * (sign * self.cfg.lambda_nonface * sigma))?)?;
        check(&nonface, "non-face guided state", level)?;
        let g_f = self.gradient(self.face, &nonface, cond, level, &masks.face)?;
        let face = (z + (g_f * (sign * self.cfg.lambda_face * sigma))?)?;
        check(&face, "face guided state", level)?;
        let star = ((&face + &nonface)? - z)?;
        Ok(GuidedChain {
            z: z.clone(),
            nonface,
            face,
            star,
            level,
        })
    }

    /// Sequential guidance in solver-first form: one solver call from
    /// `level`, then guidance at `level - 1`.
    pub fn sg_step(&self, z: &Tensor, cond: &Conditioning, masks: &RegionMasks, level: usize) -> Result<GuidedChain> {
        let next = self.solve(z, cond, level)?;
        self.guide(&next, cond, masks, level - 1)
    }

    /// Differential guidance: advances a chain with three solver calls,
    /// `f(z*) + lambda_diff (f(z_nonface) M_face + f(z_face) M_nonface)`.
    pub fn dg_step(&self, chain: &GuidedChain, cond: &Conditioning, masks: &RegionMasks) -> Result<Tensor> {
        let level = chain.level;
        let base = self.solve(&chain.star, cond, level)?;
        let from_nf = self.solve(&chain.nonface, cond, level)?;
        let from_f = self.solve(&chain.face, cond, level)?;
        let comp = (mask_latent(&from_nf, &masks.face)? + mask_latent(&from_f, &masks.nonface)?)?;
        let mut out = (base + (comp * self.cfg.lambda_diff)?)?;
        if self.cfg.dg_strict_noop {
            out = (out / (1.0 + self.cfg.lambda_diff))?;
        }
        check(&out, "differential update", level)?;
        Ok(out)
    }

    /// Runs the full loop from `input` and returns `z_0` `[B, F, C, h, w]`.
    /// With a first-frame condition, frame 0 is re-noised from the
    /// condition after every step so it ends equal to the condition.
    pub fn sample(&self, cond: &Conditioning, masks: &RegionMasks, input: &UnifiedInput) -> Result<Tensor> {
        let n = self.sched.n_steps();
        let guided = self.cfg.guided_steps();
        let cond = Conditioning {
            first_frame: input.first_frame.clone(),
            ..cond.clone()
        };
        let noise0 = input.noise.narrow(1, 0, 1)?;
        let mut z = input.noise.clone();
        if let Some(first) = &input.first_frame {
            z = self.inject_first(&z, first, &noise0, n)?;
        }
        for i in 0..n {
            let level = n - i;
            let start = Instant::now();
            let (solver0, grad0) = {
                let s = self.stats.borrow();
                (s.solver_calls, s.gradient_calls)
            };
            let next = if i < guided {
                let chain = self.guide(&z, &cond, masks, level)?;
                match self.cfg.mode {
                    GuidanceMode::Dg => self.dg_step(&chain, &cond, masks)?,
                    _ => self.solve(&chain.star, &cond, level)?,
                }
            } else {
                self.solve(&z, &cond, level)?
            };
            check(&next, "sampler state", level)?;
            z = match &input.first_frame {
                Some(first) => self.inject_first(&next, first, &noise0, level - 1)?,
                None => next,
            };
            let mut s = self.stats.borrow_mut();
            s.step_seconds.push(start.elapsed().as_secs_f64());
            if i < guided {
                s.guided_steps += 1;
                let (sc, gc) = (s.solver_calls - solver0, s.gradient_calls - grad0);
                s.guided_solver_calls.push(sc);
                s.guided_gradient_calls.push(gc);
            }
        }
        Ok(z)
    }

    fn inject_first(&self, z: &Tensor, first: &Tensor, noise0: &Tensor, level: usize) -> Result<Tensor> {
        let frame0 = ((first.unsqueeze(1)? * self.sched.lambda[level])? + (noise0 * self.sched.sigma[level])?)?;
        let f = z.dim(1)?;
        if f == 1 {
            return Ok(frame0);
        }
        Ok(Tensor::cat(&[&frame0, &z.narrow(1, 1, f - 1)?], 1)?)
    }

    /// Generates a long video as chained segments of `segment_len` frames;
    /// each segment after the first starts from the previous segment's
    /// last latent frame, and the duplicated boundary frames are dropped.
    pub fn generate_long(&self, cond: &Conditioning, masks: &RegionMasks, segment_len: usize, seed: u64) -> Result<LongVideo> {
        if segment_len < 2 {
            return Err(Error::InvalidArgument(format!("segment length {segment_len} < 2")));
        }
        let (b, total, _) = cond.audio.dims3()?;
        if total < 2 * segment_len - 1 {
            return Err(Error::InvalidArgument(format!(
                "{total} audio frames cover fewer than two segments of {segment_len}"
            )));
        }
        let (_, c, h, w) = cond.reference.dims4()?;
        let mut segments: Vec<Tensor> = Vec::new();
        let mut lengths = Vec::new();
        let mut start = 0;
        while start + 1 < total {
            let len = segment_len.min(total - start);
            let first = segments.last().map(|s| s.narrow(1, s.dim(1)? - 1, 1)?.squeeze(1)).transpose()?;
            let seg_cond = Conditioning {
                reference: cond.reference.clone(),
                audio: cond.audio.narrow(1, start, len)?,
                first_frame: None,
            };
            let input = make_unified_input(first.as_ref(), (b, len, c, h, w), seed.wrapping_add(segments.len() as u64))?;
            let out = self.sample(&seg_cond, &masks.narrow_frames(start, len)?, &input)?;
            segments.push(out);
            lengths.push(len);
            start += len - 1;
        }
        let mut parts = vec![segments[0].clone()];
        for s in &segments[1..] {
            parts.push(s.narrow(1, 1, s.dim(1)? - 1)?);
        }
        Ok(LongVideo {
            latents: Tensor::cat(&parts, 1)?,
            segments,
            lengths,
        })
    }
}

/// Output of [`Sampler::generate_long`].
#[derive(Clone, Debug)]
pub struct LongVideo {
    pub latents: Tensor,
    pub segments: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

fn mask_latent(z: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(z.broadcast_mul(&mask.unsqueeze(2)?)?)
}

fn check(t: &Tensor, what: &str, level: usize) -> Result<()> {
    ensure_finite(t, &format!("{what} at level {level}"))
}

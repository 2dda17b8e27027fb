//! Unified video diffusion backbone: schedules, audio windows, latent
//! codecs, the denoiser network and its re-weighted training loss.

pub mod audio;
pub mod codec;
pub mod network;
pub mod schedule;
pub mod train;

use std::collections::BTreeMap;

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::nn::{labeled_rng, randn, ParamStore, DTYPE};

pub use audio::{window_audio, AudioFeatureExtractor, AudioFeatureTrack, LogMelExtractor};
pub use codec::{AutoencoderConfig, Codec, ConvAutoencoder, PatchifyCodec};
pub use network::{Conditioning, Denoiser, UniVdmConfig, VideoEncoder};
pub use schedule::{InferenceSchedule, NoiseSchedule, ScheduleKind};
pub use train::{par_train_step, train_univdm, weighted_mse, LatentDataset, TrainConfig};

/// Latent video `[F, C, h, w]`.
#[derive(Clone, Debug)]
pub struct LatentVideo {
    pub data: Tensor,
    pub frame_rate: f64,
}

impl LatentVideo {
    pub fn new(data: Tensor, frame_rate: f64) -> Result<Self> {
        let (f, ..) = data.dims4()?;
        if f == 0 {
            return Err(Error::Shape("latent video needs at least one frame".into()));
        }
        crate::nn::ensure_finite(&data, "latent video")?;
        Ok(LatentVideo { data, frame_rate })
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }
}

/// Latent of the reference image `[C, h, w]`.
#[derive(Clone, Debug)]
pub struct ReferenceLatent {
    pub data: Tensor,
}

/// Stacks the reference in front of the video frames: `[F + 1, C, h, w]`.
pub fn merge_reference(reference: &ReferenceLatent, video: &LatentVideo) -> Result<Tensor> {
    let frame = &video.data.dims()[1..];
    if reference.data.dims() != frame {
        return Err(Error::Shape(format!(
            "reference {:?} does not match frame shape {frame:?}",
            reference.data.dims()
        )));
    }
    Ok(Tensor::cat(&[&reference.data.unsqueeze(0)?, &video.data], 0)?)
}

/// Inverse of [`merge_reference`].
pub fn split_reference(merged: &Tensor, frame_rate: f64) -> Result<(ReferenceLatent, LatentVideo)> {
    let slots = merged.dim(0)?;
    if slots < 2 {
        return Err(Error::Shape(format!("merged tensor has {slots} slots, need at least 2")));
    }
    let reference = ReferenceLatent {
        data: merged.get(0)?,
    };
    let video = LatentVideo {
        data: merged.narrow(0, 1, slots - 1)?,
        frame_rate,
    };
    Ok((reference, video))
}

/// Anything that predicts the noise in `z_t` (`[B, F, C, h, w]`).
pub trait NoisePredictor {
    fn predict_noise(&self, z: &Tensor, t: &Tensor, cond: &Conditioning) -> Result<Tensor>;
}

impl NoisePredictor for Denoiser {
    fn predict_noise(&self, z: &Tensor, t: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.forward(z, t, cond)
    }
}

/// One deterministic DDIM step from inference level `level` to `level - 1`.
pub fn solver_step(
    model: &impl NoisePredictor,
    sched: &InferenceSchedule,
    z: &Tensor,
    cond: &Conditioning,
    level: usize,
) -> Result<Tensor> {
    sched.check_level(level)?;
    let b = z.dim(0)?;
    let t = Tensor::full(sched.timesteps[level] as f64, b, z.device())?;
    let eps = model.predict_noise(z, &t, cond)?.detach();
    sched.ddim_step(z, &eps, level)
}

/// Starting state of the sampler.
#[derive(Clone, Debug)]
pub struct UnifiedInput {
    /// Gaussian noise `[B, F, C, h, w]`.
    pub noise: Tensor,
    /// First-frame condition `[B, C, h, w]`, when the segment continues a
    /// previous one.
    pub first_frame: Option<Tensor>,
}

impl UnifiedInput {
    pub fn conditioned(&self) -> bool {
        self.first_frame.is_some()
    }
}

pub fn make_unified_input(first_frame: Option<&Tensor>, shape: (usize, usize, usize, usize, usize), seed: u64) -> Result<UnifiedInput> {
    let (b, f, c, h, w) = shape;
    if f == 0 {
        return Err(Error::Shape("unified input needs at least one frame".into()));
    }
    if let Some(first) = first_frame {
        if first.dims() != [b, c, h, w] {
            return Err(Error::Shape(format!("first frame {:?} vs [{b}, {c}, {h}, {w}]", first.dims())));
        }
    }
    let mut rng = labeled_rng(seed, "unified-input");
    Ok(UnifiedInput {
        noise: randn(&mut rng, (b, f, c, h, w))?,
        first_frame: first_frame.cloned(),
    })
}

/// A denoiser together with its training schedule and parameters.
pub struct UniVdm {
    pub config: UniVdmConfig,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    pub net: Denoiser,
}

impl UniVdm {
    pub fn new(config: UniVdmConfig, kind: ScheduleKind, seed: u64) -> Result<Self> {
        let schedule = NoiseSchedule::new(config.train_steps, kind)?;
        let store = ParamStore::new(seed);
        let net = Denoiser::new(config, store.var_builder())?;
        Ok(UniVdm {
            config,
            schedule,
            store,
            net,
        })
    }

    /// Rebuilds a model from saved parameter tensors.
    pub fn from_tensors(config: UniVdmConfig, kind: ScheduleKind, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let model = UniVdm::new(config, kind, 0)?;
        let loaded = model.store.load(tensors, None)?;
        if loaded != model.store.all_vars().len() {
            return Err(Error::Container(format!(
                "checkpoint provides {loaded} of {} denoiser parameters",
                model.store.all_vars().len()
            )));
        }
        Ok(model)
    }

    pub fn inference_schedule(&self, n_steps: usize) -> Result<InferenceSchedule> {
        InferenceSchedule::new(&self.schedule, n_steps)
    }

    /// Encoder parameters, keyed without the `encoder.` prefix.
    pub fn encoder_tensors(&self) -> BTreeMap<String, Tensor> {
        self.store
            .tensors()
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("encoder.").map(|s| (s.to_string(), v)))
            .collect()
    }
}

impl NoisePredictor for UniVdm {
    fn predict_noise(&self, z: &Tensor, t: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        self.net.forward(z, t, cond)
    }
}

/// Windowed audio rows of several tracks as a `[B, F, (2m+1) * d_a]` tensor.
pub fn audio_batch(tracks: &[&AudioFeatureTrack]) -> Result<Tensor> {
    let rows: Vec<Tensor> = tracks.iter().map(|t| t.to_tensor()).collect::<Result<_>>()?;
    Ok(Tensor::stack(&rows, 0)?.to_dtype(DTYPE)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, to_vec};

    #[test]
    fn merge_and_split_round_trip() {
        let mut rng = labeled_rng(3, "merge");
        let reference = ReferenceLatent {
            data: randn(&mut rng, (4, 2, 2)).unwrap(),
        };
        let video = LatentVideo::new(randn(&mut rng, (3, 4, 2, 2)).unwrap(), 25.0).unwrap();
        let merged = merge_reference(&reference, &video).unwrap();
        assert_eq!(merged.dims(), &[4, 4, 2, 2]);
        assert_eq!(to_vec(&merged.get(0).unwrap()).unwrap(), to_vec(&reference.data).unwrap());
        for f in 0..3 {
            assert_eq!(
                to_vec(&merged.get(f + 1).unwrap()).unwrap(),
                to_vec(&video.data.get(f).unwrap()).unwrap()
            );
        }
        let (r, v) = split_reference(&merged, 25.0).unwrap();
        assert_eq!(to_vec(&r.data).unwrap(), to_vec(&reference.data).unwrap());
        assert_eq!(to_vec(&v.data).unwrap(), to_vec(&video.data).unwrap());
    }

    #[test]
    fn merge_smallest_case_and_mismatch() {
        let reference = ReferenceLatent {
            data: Tensor::zeros((4, 2, 2), DTYPE, &device()).unwrap(),
        };
        let one = LatentVideo::new(Tensor::ones((1, 4, 2, 2), DTYPE, &device()).unwrap(), 25.0).unwrap();
        assert_eq!(merge_reference(&reference, &one).unwrap().dims(), &[2, 4, 2, 2]);
        assert!(LatentVideo::new(Tensor::zeros((0, 4, 2, 2), DTYPE, &device()).unwrap(), 25.0).is_err());
        let other = LatentVideo::new(Tensor::ones((1, 3, 2, 2), DTYPE, &device()).unwrap(), 25.0).unwrap();
        assert!(merge_reference(&reference, &other).is_err());
    }

    #[test]
    fn unified_input_statistics() {
        let u = make_unified_input(None, (1, 16, 4, 16, 16), 11).unwrap();
        let v = to_vec(&u.noise).unwrap();
        let n = v.len() as f64;
        assert!(n >= 1e4);
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((std - 1.0).abs() < 0.05, "std {std}");
        assert!(!u.conditioned());
    }

    #[test]
    fn unified_input_keeps_first_frame() {
        let mut rng = labeled_rng(1, "ff");
        let first = randn(&mut rng, (2, 4, 4, 4)).unwrap();
        let u = make_unified_input(Some(&first), (2, 8, 4, 4, 4), 0).unwrap();
        assert!(u.conditioned());
        assert_eq!(to_vec(u.first_frame.as_ref().unwrap()).unwrap(), to_vec(&first).unwrap());
        assert!(make_unified_input(Some(&first), (1, 8, 4, 4, 4), 0).is_err());
    }

    struct Oracle {
        z0: Tensor,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, z: &Tensor, t: &Tensor, _: &Conditioning) -> Result<Tensor> {
            let t = t.to_vec1::<f64>()?[0] as usize;
            let (lam, sig) = (self.sched.lambda[t], self.sched.sigma[t]);
            Ok(((z - (&self.z0 * lam)?)? / sig)?)
        }
    }

    fn dummy_cond(b: usize, f: usize) -> Conditioning {
        Conditioning {
            reference: Tensor::zeros((b, 4, 4, 4), DTYPE, &device()).unwrap(),
            audio: Tensor::zeros((b, f, 40), DTYPE, &device()).unwrap(),
            first_frame: None,
        }
    }

    #[test]
    fn perfect_denoiser_recovers_signal() {
        let sched = NoiseSchedule::new(200, ScheduleKind::LinearBeta).unwrap();
        let inf = InferenceSchedule::new(&sched, 20).unwrap();
        let mut rng = labeled_rng(5, "oracle");
        let z0 = randn(&mut rng, (1, 3, 4, 4, 4)).unwrap();
        let eps = randn(&mut rng, (1, 3, 4, 4, 4)).unwrap();
        let oracle = Oracle { z0: z0.clone(), sched: sched.clone() };
        let cond = dummy_cond(1, 3);

        let z1 = sched.add_noise(&z0, &eps, inf.timesteps[1]).unwrap();
        let out = solver_step(&oracle, &inf, &z1, &cond, 1).unwrap();
        let err = to_vec(&(out - &z0).unwrap().abs().unwrap()).unwrap().into_iter().fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");

        let mut z = sched.add_noise(&z0, &eps, inf.timesteps[20]).unwrap();
        for level in (1..=20).rev() {
            z = solver_step(&oracle, &inf, &z, &cond, level).unwrap();
            assert_eq!(z.dims(), &[1, 3, 4, 4, 4]);
        }
        let err = to_vec(&(z - &z0).unwrap().abs().unwrap()).unwrap().into_iter().fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
        assert!(solver_step(&oracle, &inf, &z1, &cond, 0).is_err());
        assert!(solver_step(&oracle, &inf, &z1, &cond, 21).is_err());
    }
}

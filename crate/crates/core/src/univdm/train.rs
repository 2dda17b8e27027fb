//! Re-weighted denoising objective and the training loop.

use candle_core::Tensor;
use candle_nn::{Optimizer, ParamsAdamW};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{labeled_rng, randn};

use super::{Conditioning, NoisePredictor, UniVdm};

/// `sum(M * (eps - eps_hat)^2) / sum(M)` with `mask` `[B, F, h, w]`
/// broadcast over the channel axis of `[B, F, C, h, w]` errors.
pub fn weighted_mse(eps: &Tensor, eps_hat: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let (b, f, c, h, w) = eps.dims5()?;
    if eps_hat.dims() != eps.dims() {
        return Err(Error::Shape(format!("prediction {:?} vs noise {:?}", eps_hat.dims(), eps.dims())));
    }
    if mask.dims() != [b, f, h, w] {
        return Err(Error::Shape(format!("mask {:?} vs [{b}, {f}, {h}, {w}]", mask.dims())));
    }
    let m = mask.unsqueeze(2)?.broadcast_as((b, f, c, h, w))?;
    let num = (eps - eps_hat)?.sqr()?.mul(&m)?.sum_all()?;
    let den = m.sum_all()?;
    Ok(num.div(&den)?)
}

/// Latent training clips stacked along the batch axis.
#[derive(Clone, Debug)]
pub struct LatentDataset {
    /// `[N, F, C, h, w]`
    pub latents: Tensor,
    /// Windowed audio `[N, F, (2m+1) * d_a]`.
    pub audio: Tensor,
    /// Loss weights at latent resolution `[N, F, h, w]`.
    pub masks: Tensor,
}

impl LatentDataset {
    pub fn new(latents: Tensor, audio: Tensor, masks: Tensor) -> Result<Self> {
        let (n, f, _, h, w) = latents.dims5()?;
        let (an, af, _) = audio.dims3()?;
        if (an, af) != (n, f) || masks.dims() != [n, f, h, w] {
            return Err(Error::Shape(format!(
                "dataset parts disagree: latents {:?}, audio {:?}, masks {:?}",
                latents.dims(),
                audio.dims(),
                masks.dims()
            )));
        }
        let min = masks.flatten_all()?.min(0)?.to_scalar::<f64>()?;
        if min <= 0.0 {
            return Err(Error::InvalidArgument(format!("loss weights must be positive, found {min}")));
        }
        Ok(LatentDataset { latents, audio, masks })
    }

    pub fn len(&self) -> usize {
        self.latents.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> usize {
        self.latents.dims()[1]
    }

    pub fn select(&self, idx: &[u32]) -> Result<LatentDataset> {
        let idx = Tensor::new(idx, self.latents.device())?;
        Ok(LatentDataset {
            latents: self.latents.index_select(&idx, 0)?,
            audio: self.audio.index_select(&idx, 0)?,
            masks: self.masks.index_select(&idx, 0)?,
        })
    }
}

/// A training batch with its sampled reference frames, timesteps and noise.
pub struct TrainBatch {
    pub data: LatentDataset,
    pub reference: Tensor,
    pub first_frame: Option<Tensor>,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
}

impl TrainBatch {
    /// Draws references, conditioning, timesteps and noise for `data`.
    pub fn sample(data: LatentDataset, train_steps: usize, first_frame_prob: f64, rng: &mut impl Rng) -> Result<Self> {
        let (b, f, ..) = data.latents.dims5()?;
        let mut refs = Vec::with_capacity(b);
        for i in 0..b {
            let k = rng.random_range(0..f);
            refs.push(data.latents.get(i)?.get(k)?);
        }
        let reference = Tensor::stack(&refs, 0)?;
        let first_frame = if rng.random_bool(first_frame_prob) {
            Some(data.latents.narrow(1, 0, 1)?.squeeze(1)?)
        } else {
            None
        };
        let timesteps = (0..b).map(|_| rng.random_range(0..train_steps)).collect();
        let noise = randn(rng, data.latents.shape().clone())?;
        Ok(TrainBatch {
            data,
            reference,
            first_frame,
            timesteps,
            noise,
        })
    }
}

/// Re-weighted noise-prediction loss for one batch.
pub fn par_train_step(model: &UniVdm, batch: &TrainBatch) -> Result<Tensor> {
    let z_t = model.schedule.add_noise_batch(&batch.data.latents, &batch.noise, &batch.timesteps)?;
    let t: Vec<f64> = batch.timesteps.iter().map(|&t| t as f64).collect();
    let t = Tensor::new(t.as_slice(), z_t.device())?;
    let cond = Conditioning {
        reference: batch.reference.clone(),
        audio: batch.data.audio.clone(),
        first_frame: batch.first_frame.clone(),
    };
    let eps_hat = model.predict_noise(&z_t, &t, &cond)?;
    weighted_mse(&batch.noise, &eps_hat, &batch.data.masks)
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub first_frame_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            batch: 8,
            lr: 2e-3,
            first_frame_prob: 0.5,
        }
    }
}

/// Trains the denoiser with AdamW; returns the per-step losses.
pub fn train_univdm(model: &UniVdm, data: &LatentDataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut opt = candle_nn::AdamW::new(
        model.store.all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = labeled_rng(seed, "univdm-train");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<u32> = (0..cfg.batch).map(|_| rng.random_range(0..data.len()) as u32).collect();
        let batch = TrainBatch::sample(data.select(&idx)?, model.schedule.steps(), cfg.first_frame_prob, &mut rng)?;
        let loss = par_train_step(model, &batch)?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("denoiser loss is {value} at step {step}")));
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("univdm step {step}: loss {value:.4}");
        }
    }
    Ok(losses)
}

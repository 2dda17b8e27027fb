//! Latent codecs mapping frames `[N, 3, H, W]` to latents `[N, C, H/k, W/k]`.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Optimizer, ParamsAdamW, VarBuilder};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{labeled_rng, ParamStore};

pub trait Codec {
    fn latent_channels(&self) -> usize;
    /// Spatial downsampling factor.
    fn factor(&self) -> usize;
    fn encode(&self, frames: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Lossless space-to-depth codec, used to test the diffusion math without
/// a trained autoencoder.
#[derive(Clone, Debug)]
pub struct PatchifyCodec {
    pub patch: usize,
    pub channels: usize,
}

impl Codec for PatchifyCodec {
    fn latent_channels(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    fn factor(&self) -> usize {
        self.patch
    }

    fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = frames.dims4()?;
        let p = self.patch;
        if c != self.channels || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!("cannot patchify {:?} with patch {p}", frames.shape())));
        }
        Ok(frames
            .reshape((n, c, h / p, p, w / p, p))?
            .permute((0, 1, 3, 5, 2, 4))?
            .reshape((n, c * p * p, h / p, w / p))?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (n, cl, h, w) = latents.dims4()?;
        let p = self.patch;
        if cl != self.latent_channels() {
            return Err(Error::Shape(format!("latent channels {cl} != {}", self.latent_channels())));
        }
        Ok(latents
            .reshape((n, self.channels, p, p, h, w))?
            .permute((0, 1, 4, 2, 5, 3))?
            .reshape((n, self.channels, h * p, w * p))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub latent_channels: usize,
    pub width: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            latent_channels: 4,
            width: 16,
        }
    }
}

/// Three stride-2 stages down, three nearest-upsample stages up (8x).
#[derive(Clone, Debug)]
pub struct ConvAutoencoder {
    pub config: AutoencoderConfig,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    /// Multiplier applied after encoding so latents have roughly unit variance.
    pub scale: f64,
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, k, cfg, vb)?)
}

impl ConvAutoencoder {
    pub fn new(config: AutoencoderConfig, vb: VarBuilder) -> Result<Self> {
        let w = config.width;
        let c = config.latent_channels;
        let enc = vec![
            conv(3, w, 3, 1, vb.pp("enc0"))?,
            conv(w, w, 3, 2, vb.pp("enc1"))?,
            conv(w, 2 * w, 3, 2, vb.pp("enc2"))?,
            conv(2 * w, 2 * w, 3, 2, vb.pp("enc3"))?,
            conv(2 * w, c, 1, 1, vb.pp("enc4"))?,
        ];
        let dec = vec![
            conv(c, 2 * w, 1, 1, vb.pp("dec0"))?,
            conv(2 * w, 2 * w, 3, 1, vb.pp("dec1"))?,
            conv(2 * w, w, 3, 1, vb.pp("dec2"))?,
            conv(w, w, 3, 1, vb.pp("dec3"))?,
            conv(w, 3, 3, 1, vb.pp("dec4"))?,
        ];
        Ok(ConvAutoencoder {
            config,
            enc,
            dec,
            scale: 1.0,
        })
    }

    fn encode_raw(&self, frames: &Tensor) -> Result<Tensor> {
        let mut x = ((frames * 2.0)? - 1.0)?;
        for (i, layer) in self.enc.iter().enumerate() {
            x = layer.forward(&x)?;
            if i + 1 < self.enc.len() {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let mut x = self.dec[0].forward(z)?.silu()?;
        for layer in &self.dec[1..4] {
            let (_, _, h, w) = x.dims4()?;
            x = layer.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?.silu()?;
        }
        let x = self.dec[4].forward(&x)?;
        Ok(((x + 1.0)? * 0.5)?)
    }

    /// Fits the autoencoder to `frames` with an MSE reconstruction loss and
    /// sets `scale` from the resulting latent standard deviation.
    pub fn fit(&mut self, store: &ParamStore, frames: &Tensor, steps: usize, batch: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let n = frames.dim(0)?;
        let mut opt = candle_nn::AdamW::new(
            store.all_vars(),
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = labeled_rng(seed, "codec-batches");
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<u32> = (0..batch.min(n)).map(|_| rng.random_range(0..n) as u32).collect();
            let idx = Tensor::new(idx.as_slice(), frames.device())?;
            let x = frames.index_select(&idx, 0)?;
            let rec = self.decode_raw(&self.encode_raw(&x)?)?;
            let loss = (rec - &x)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            losses.push(loss.to_scalar::<f64>()?);
        }
        let sample_idx: Vec<u32> = (0..n.min(256) as u32).collect();
        let sample = frames.index_select(&Tensor::new(sample_idx.as_slice(), frames.device())?, 0)?;
        let z = self.encode_raw(&sample)?;
        let std = z.flatten_all()?.var(0)?.sqrt()?.to_scalar::<f64>()?;
        self.scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        Ok(losses)
    }
}

impl Codec for ConvAutoencoder {
    fn latent_channels(&self) -> usize {
        self.config.latent_channels
    }

    fn factor(&self) -> usize {
        8
    }

    fn encode(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = frames.dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("autoencoder expects [N, 3, 8k, 8k], got {:?}", frames.shape())));
        }
        Ok((self.encode_raw(frames)? * self.scale)?)
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        self.decode_raw(&(latents / self.scale)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, to_vec};

    #[test]
    fn patchify_round_trips_exactly() {
        let mut rng = labeled_rng(0, "patch");
        let x = randn(&mut rng, (2, 3, 8, 16)).unwrap();
        let codec = PatchifyCodec { patch: 4, channels: 3 };
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.dims(), &[2, 48, 2, 4]);
        assert_eq!(to_vec(&codec.decode(&z).unwrap()).unwrap(), to_vec(&x).unwrap());
    }

    #[test]
    fn autoencoder_shapes_and_learning() {
        let store = ParamStore::new(1);
        let mut ae = ConvAutoencoder::new(AutoencoderConfig { latent_channels: 4, width: 8 }, store.var_builder()).unwrap();
        let mut rng = labeled_rng(0, "frames");
        let frames = (randn(&mut rng, (16, 3, 16, 16)).unwrap() * 0.1).unwrap().affine(1.0, 0.5).unwrap();
        let z = ae.encode(&frames).unwrap();
        assert_eq!(z.dims(), &[16, 4, 2, 2]);
        assert_eq!(ae.decode(&z).unwrap().dims(), &[16, 3, 16, 16]);
        let losses = ae.fit(&store, &frames, 60, 8, 3e-3, 0).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert!(ae.scale.is_finite() && ae.scale > 0.0);
    }
}

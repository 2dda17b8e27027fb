//! Toy 3D U-Net denoiser.
//!
//! Frames are processed with 2-D convolutions on a folded `[B * S, C, h, w]`
//! layout, where `S` is the number of temporal slots. Temporal
//! self-attention unfolds the slot axis, and every block cross-attends to
//! the windowed audio features of its frame.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Attention, GroupNorm, LayerNorm, DTYPE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniVdmConfig {
    pub latent_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub audio_dim: usize,
    /// Audio window half-width.
    #[serde(rename = "m")]
    pub audio_window: usize,
    pub time_dim: usize,
    /// Number of training timesteps, used to normalize timestep inputs.
    #[serde(rename = "T_train")]
    pub train_steps: usize,
}

impl Default for UniVdmConfig {
    fn default() -> Self {
        UniVdmConfig {
            latent_channels: 4,
            width: 32,
            heads: 4,
            audio_dim: 8,
            audio_window: 2,
            time_dim: 64,
            train_steps: 200,
        }
    }
}

impl UniVdmConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.latent_channels + 1
    }

    pub fn audio_tokens(&self) -> usize {
        2 * self.audio_window + 1
    }

    /// Channel width of the encoder output.
    pub fn encoder_width(&self) -> usize {
        2 * self.width
    }
}

fn conv3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(cin, cout, 3, cfg, vb)?)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, tdim: usize, vb: VarBuilder) -> Result<Self> {
        let skip = if cin != cout {
            Some(candle_nn::conv2d(cin, cout, 1, Default::default(), vb.pp("skip"))?)
        } else {
            None
        };
        Ok(ResBlock {
            norm1: GroupNorm::new(8, cin, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, 1, vb.pp("conv1"))?,
            temb: candle_nn::linear(tdim, cout, vb.pp("temb"))?,
            norm2: GroupNorm::new(8, cout, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, 1, vb.pp("conv2"))?,
            skip,
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(temb)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let x = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((x + h)?)
    }
}

/// Self-attention across temporal slots at every spatial position.
#[derive(Clone, Debug)]
struct TemporalAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl TemporalAttention {
    fn new(dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(TemporalAttention {
            norm: LayerNorm::new(dim, vb.pp("norm"))?,
            attn: Attention::new(dim, dim, heads, vb.pp("attn"))?,
        })
    }

    fn forward(&self, x: &Tensor, slots: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = n / slots;
        let seq = x
            .reshape((b, slots, c, h, w))?
            .permute((0, 3, 4, 1, 2))?
            .reshape((b * h * w, slots, c))?;
        let pos = timestep_embedding(&Tensor::arange(0u32, slots as u32, x.device())?.to_dtype(DTYPE)?, c)?;
        let xn = self.norm.forward(&seq)?.broadcast_add(&pos.unsqueeze(0)?)?;
        let out = (seq + self.attn.forward(&xn, &xn)?)?;
        Ok(out.reshape((b, h, w, slots, c))?.permute((0, 3, 4, 1, 2))?.reshape((n, c, h, w))?)
    }
}

/// Spatial positions of each frame attend to that frame's audio window.
#[derive(Clone, Debug)]
struct AudioCrossAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl AudioCrossAttention {
    fn new(dim: usize, audio_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(AudioCrossAttention {
            norm: LayerNorm::new(dim, vb.pp("norm"))?,
            attn: Attention::new(dim, audio_dim, heads, vb.pp("attn"))?,
        })
    }

    fn forward(&self, x: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let seq = x.permute((0, 2, 3, 1))?.reshape((n, h * w, c))?;
        let out = (&seq + self.attn.forward(&self.norm.forward(&seq)?, audio)?)?;
        Ok(out.reshape((n, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
    }
}

/// Inputs folded to `[B * S, ...]` ready for the convolutional trunk.
pub struct FoldedInput {
    pub x: Tensor,
    pub slot_type: Vec<u32>,
    pub temb_t: Tensor,
    pub audio: Tensor,
    pub slots: usize,
}

/// Down path of the U-Net. The audio-visual classifiers reuse this module
/// with weights copied from the trained denoiser.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub config: UniVdmConfig,
    conv_in: Conv2d,
    slot_embed: Tensor,
    window_pos: Tensor,
    time1: Linear,
    time2: Linear,
    res1: ResBlock,
    temporal1: TemporalAttention,
    audio1: AudioCrossAttention,
    down: Conv2d,
    res2: ResBlock,
    temporal2: TemporalAttention,
    audio2: AudioCrossAttention,
}

pub struct EncoderFeatures {
    pub skip: Tensor,
    pub mid: Tensor,
    pub temb: Tensor,
}

impl VideoEncoder {
    pub fn new(config: UniVdmConfig, vb: VarBuilder) -> Result<Self> {
        let d = config.width;
        let td = config.time_dim;
        Ok(VideoEncoder {
            conv_in: conv3(config.input_channels(), d, 1, vb.pp("conv_in"))?,
            slot_embed: vb.get_with_hints((2, d), "slot_embed", candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 })?,
            window_pos: vb.get_with_hints(
                (config.audio_tokens(), config.audio_dim),
                "window_pos",
                candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 },
            )?,
            time1: candle_nn::linear(td, td, vb.pp("time1"))?,
            time2: candle_nn::linear(td, td, vb.pp("time2"))?,
            res1: ResBlock::new(d, d, td, vb.pp("res1"))?,
            temporal1: TemporalAttention::new(d, config.heads, vb.pp("temporal1"))?,
            audio1: AudioCrossAttention::new(d, config.audio_dim, config.heads, vb.pp("audio1"))?,
            down: conv3(d, 2 * d, 2, vb.pp("down"))?,
            res2: ResBlock::new(2 * d, 2 * d, td, vb.pp("res2"))?,
            temporal2: TemporalAttention::new(2 * d, config.heads, vb.pp("temporal2"))?,
            audio2: AudioCrossAttention::new(2 * d, config.audio_dim, config.heads, vb.pp("audio2"))?,
            config,
        })
    }

    /// Builds folded inputs for video frames only (no reference slot,
    /// no first-frame conditioning), as used by the classifiers.
    pub fn fold_video(&self, z: &Tensor, t: &Tensor, audio: &Tensor) -> Result<FoldedInput> {
        let (b, f, c, h, w) = z.dims5()?;
        if c != self.config.latent_channels {
            return Err(Error::Shape(format!("latent channels {c} != {}", self.config.latent_channels)));
        }
        check_audio(audio, b, f, &self.config)?;
        let zeros = Tensor::zeros((b, f, c + 1, h, w), DTYPE, z.device())?;
        let x = Tensor::cat(&[z, &zeros], 2)?.reshape((b * f, c * 2 + 1, h, w))?;
        Ok(FoldedInput {
            x,
            slot_type: vec![1; b * f],
            temb_t: repeat_rows(t, f)?,
            audio: audio.reshape((b * f, self.config.audio_tokens(), self.config.audio_dim))?,
            slots: f,
        })
    }

    pub fn forward(&self, input: &FoldedInput) -> Result<EncoderFeatures> {
        let t_norm = (&input.temb_t * (1000.0 / self.config.train_steps as f64))?;
        let temb = timestep_embedding(&t_norm, self.config.time_dim)?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let slot_idx = Tensor::new(input.slot_type.as_slice(), input.x.device())?;
        let slot = self.slot_embed.index_select(&slot_idx, 0)?.unsqueeze(2)?.unsqueeze(3)?;
        let audio = input.audio.broadcast_add(&self.window_pos)?;

        let x = self.conv_in.forward(&input.x)?.broadcast_add(&slot)?;
        let x = self.res1.forward(&x, &temb)?;
        let x = self.temporal1.forward(&x, input.slots)?;
        let skip = self.audio1.forward(&x, &audio)?;
        let x = self.down.forward(&skip)?;
        let x = self.res2.forward(&x, &temb)?;
        let x = self.temporal2.forward(&x, input.slots)?;
        let mid = self.audio2.forward(&x, &audio)?;
        Ok(EncoderFeatures { skip, mid, temb })
    }
}

fn repeat_rows(t: &Tensor, reps: usize) -> Result<Tensor> {
    let b = t.dim(0)?;
    Ok(t.unsqueeze(1)?.broadcast_as((b, reps))?.contiguous()?.reshape(b * reps)?)
}

fn check_audio(audio: &Tensor, b: usize, f: usize, cfg: &UniVdmConfig) -> Result<()> {
    let (ab, af, aw) = audio.dims3()?;
    if ab != b || af != f {
        return Err(Error::Shape(format!(
            "audio covers {ab}x{af} clips x frames, latent has {b}x{f}"
        )));
    }
    if aw != cfg.audio_tokens() * cfg.audio_dim {
        return Err(Error::Shape(format!(
            "audio rows have width {aw}, expected {}",
            cfg.audio_tokens() * cfg.audio_dim
        )));
    }
    Ok(())
}

/// Conditioning for one denoiser call.
#[derive(Clone, Debug)]
pub struct Conditioning {
    /// Reference latent `[B, C, h, w]`, merged as temporal slot 0.
    pub reference: Tensor,
    /// Windowed audio `[B, F, (2m+1) * d_a]`.
    pub audio: Tensor,
    /// Optional first-frame latent `[B, C, h, w]`.
    pub first_frame: Option<Tensor>,
}

impl Conditioning {
    /// Same conditioning with the audio replaced by zeros.
    pub fn without_audio(&self) -> Result<Self> {
        Ok(Conditioning {
            reference: self.reference.clone(),
            audio: self.audio.zeros_like()?,
            first_frame: self.first_frame.clone(),
        })
    }

    pub fn batch(&self) -> Result<usize> {
        Ok(self.reference.dim(0)?)
    }
}

/// Noise-prediction network.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: UniVdmConfig,
    pub encoder: VideoEncoder,
    up: Conv2d,
    res3: ResBlock,
    temporal3: TemporalAttention,
    audio3: AudioCrossAttention,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Denoiser {
    pub fn new(config: UniVdmConfig, vb: VarBuilder) -> Result<Self> {
        let d = config.width;
        let conv_out_w = vb.pp("conv_out").get_with_hints((config.latent_channels, d, 3, 3), "weight", candle_nn::Init::Const(0.0))?;
        let conv_out_b = vb.pp("conv_out").get_with_hints(config.latent_channels, "bias", candle_nn::Init::Const(0.0))?;
        Ok(Denoiser {
            encoder: VideoEncoder::new(config, vb.pp("encoder"))?,
            up: conv3(2 * d, d, 1, vb.pp("up"))?,
            res3: ResBlock::new(2 * d, d, config.time_dim, vb.pp("res3"))?,
            temporal3: TemporalAttention::new(d, config.heads, vb.pp("temporal3"))?,
            audio3: AudioCrossAttention::new(d, config.audio_dim, config.heads, vb.pp("audio3"))?,
            norm_out: GroupNorm::new(8, d, vb.pp("norm_out"))?,
            conv_out: Conv2d::new(
                conv_out_w,
                Some(conv_out_b),
                Conv2dConfig {
                    padding: 1,
                    ..Default::default()
                },
            ),
            config,
        })
    }

    /// Merges the reference as slot 0 in front of the video frames and
    /// appends first-frame conditioning channels.
    fn fold(&self, z: &Tensor, t: &Tensor, cond: &Conditioning) -> Result<FoldedInput> {
        let (b, f, c, h, w) = z.dims5()?;
        let cfg = &self.config;
        if c != cfg.latent_channels {
            return Err(Error::Shape(format!("latent channels {c} != {}", cfg.latent_channels)));
        }
        if t.dims() != [b] {
            return Err(Error::Shape(format!("expected {b} timesteps, got {:?}", t.dims())));
        }
        check_audio(&cond.audio, b, f, cfg)?;
        let merged = merge_reference_batch(&cond.reference, z)?;
        let slots = f + 1;
        let dev = z.device();

        let mut cond_planes = Tensor::zeros((b, slots, c + 1, h, w), DTYPE, dev)?;
        if let Some(first) = &cond.first_frame {
            if first.dims() != [b, c, h, w] {
                return Err(Error::Shape(format!("first frame {:?} vs latent frame [{b}, {c}, {h}, {w}]", first.dims())));
            }
            let flag = Tensor::ones((b, 1, h, w), DTYPE, dev)?;
            let slot1 = Tensor::cat(&[first, &flag], 1)?.unsqueeze(1)?;
            let before = cond_planes.narrow(1, 0, 1)?;
            let after = cond_planes.narrow(1, 2, slots - 2)?;
            cond_planes = Tensor::cat(&[&before, &slot1, &after], 1)?;
        }
        let x = Tensor::cat(&[&merged, &cond_planes], 2)?.reshape((b * slots, 2 * c + 1, h, w))?;

        let aw = cfg.audio_tokens() * cfg.audio_dim;
        let audio = Tensor::cat(&[&Tensor::zeros((b, 1, aw), DTYPE, dev)?, &cond.audio], 1)?
            .reshape((b * slots, cfg.audio_tokens(), cfg.audio_dim))?;
        let slot_type = (0..b).flat_map(|_| (0..slots).map(|s| (s > 0) as u32)).collect();
        Ok(FoldedInput {
            x,
            slot_type,
            temb_t: repeat_rows(t, slots)?,
            audio,
            slots,
        })
    }

    /// Predicted noise `[B, F, C, h, w]` for noisy latents `z_t` at
    /// (training-schedule) timesteps `t`.
    pub fn forward(&self, z: &Tensor, t: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        let (b, f, c, h, w) = z.dims5()?;
        let input = self.fold(z, t, cond)?;
        let feats = self.encoder.forward(&input)?;
        let audio = input.audio.broadcast_add(&self.encoder.window_pos)?;
        let (_, _, mh, mw) = feats.mid.dims4()?;
        debug_assert_eq!((mh * 2, mw * 2), (h, w));
        let x = self.up.forward(&feats.mid.upsample_nearest2d(h, w)?)?;
        let x = Tensor::cat(&[&x, &feats.skip], 1)?;
        let x = self.res3.forward(&x, &feats.temb)?;
        let x = self.temporal3.forward(&x, input.slots)?;
        let x = self.audio3.forward(&x, &audio)?;
        let out = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        // drop the reference slot
        Ok(out.reshape((b, f + 1, c, h, w))?.narrow(1, 1, f)?)
    }
}

/// Stacks `[B, C, h, w]` references in front of `[B, F, C, h, w]` videos.
pub fn merge_reference_batch(reference: &Tensor, video: &Tensor) -> Result<Tensor> {
    let (b, _, c, h, w) = video.dims5()?;
    if reference.dims() != [b, c, h, w] {
        return Err(Error::Shape(format!(
            "reference {:?} does not match video frames [{b}, {c}, {h}, {w}]",
            reference.dims()
        )));
    }
    Ok(Tensor::cat(&[&reference.unsqueeze(1)?, video], 1)?)
}

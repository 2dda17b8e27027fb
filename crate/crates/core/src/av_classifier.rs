//! Regional audio-visual sync classifiers built on the denoiser encoder.
//!
//! Each video frame becomes one token by global max pooling of the encoder
//! feature map (after a 3-D rotary encoding over frame, row and column),
//! each audio frame becomes one token by a linear projection. A small
//! transformer reads `[CLS, video..., audio...]` and an MLP head maps the
//! CLS output to a sync probability.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::{Module, Tensor, Var, D};
use candle_nn::{Linear, Optimizer, ParamsAdamW, VarBuilder};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{gelu, labeled_rng, log_sigmoid, randn, Attention, LayerNorm, ParamStore, DTYPE};
use crate::univdm::network::UniVdmConfig;
use crate::univdm::{solver_step, Conditioning, InferenceSchedule, NoiseSchedule, UniVdm, VideoEncoder};

pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Face,
    NonFace,
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(ClassifierKind::Face),
            "non-face" | "nonface" => Ok(ClassifierKind::NonFace),
            other => Err(Error::Config(format!("unknown classifier kind `{other}`"))),
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClassifierKind::Face => "face",
            ClassifierKind::NonFace => "non-face",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub kind: ClassifierKind,
    pub encoder: UniVdmConfig,
    pub layers: usize,
    pub heads: usize,
    pub max_video_frames: usize,
    pub max_audio_frames: usize,
    pub rope_base: f64,
    pub freeze_encoder: bool,
}

impl ClassifierConfig {
    pub fn new(kind: ClassifierKind, encoder: UniVdmConfig) -> Self {
        ClassifierConfig {
            kind,
            encoder,
            layers: 4,
            heads: 4,
            max_video_frames: 32,
            max_audio_frames: 32,
            rope_base: 100.0,
            freeze_encoder: false,
        }
    }

    /// Token width `c`.
    pub fn width(&self) -> usize {
        self.encoder.encoder_width()
    }

    /// Hash of every field except `kind`, so face and non-face classifiers
    /// can be checked for identical architecture.
    pub fn architecture_digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("kind");
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Rotary angles for (frame, row, column) positions.
#[derive(Clone, Debug)]
pub struct Rope3d {
    pub channels: usize,
    pub base: f64,
}

impl Rope3d {
    /// Channel pairs assigned to (frame, row, column).
    pub fn splits(&self) -> (usize, usize, usize) {
        let pairs = self.channels / 2;
        let ys = pairs / 3;
        (pairs - 2 * ys, ys, ys)
    }

    /// Rotation angle of channel pair `i` at position `(f, y, x)`.
    pub fn angle(&self, i: usize, f: usize, y: usize, x: usize) -> f64 {
        let (nf, ny, nx) = self.splits();
        let (pos, j, n) = if i < nf {
            (f, i, nf)
        } else if i < nf + ny {
            (y, i - nf, ny)
        } else {
            (x, i - nf - ny, nx)
        };
        pos as f64 * self.base.powf(-(j as f64) / n as f64)
    }

    /// Rotates channel pairs of `[B * F, c, h, w]` feature maps.
    pub fn apply(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels || c % 2 != 0 || n % frames != 0 {
            return Err(Error::Shape(format!("rope over {:?} with {frames} frames", x.dims())));
        }
        let pairs = c / 2;
        let mut cos = Vec::with_capacity(frames * pairs * h * w);
        let mut sin = Vec::with_capacity(frames * pairs * h * w);
        for f in 0..frames {
            for i in 0..pairs {
                for y in 0..h {
                    for xx in 0..w {
                        let a = self.angle(i, f, y, xx);
                        cos.push(a.cos());
                        sin.push(a.sin());
                    }
                }
            }
        }
        let shape = (1, frames, pairs, 1, h, w);
        let cos = Tensor::from_vec(cos, shape, x.device())?;
        let sin = Tensor::from_vec(sin, shape, x.device())?;
        let xr = x.reshape((n / frames, frames, pairs, 2, h, w))?;
        let a = xr.narrow(3, 0, 1)?;
        let b = xr.narrow(3, 1, 1)?;
        let ra = (a.broadcast_mul(&cos)? - b.broadcast_mul(&sin)?)?;
        let rb = (a.broadcast_mul(&sin)? + b.broadcast_mul(&cos)?)?;
        Ok(Tensor::cat(&[&ra, &rb], 3)?.reshape((n, c, h, w))?)
    }
}

/// Modal, temporal and rotary encodings.
#[derive(Clone, Debug)]
pub struct EncodingSet {
    /// Row 0 is audio, row 1 is visual: `[2, c]`.
    pub modal: Tensor,
    pub temporal_video: Tensor,
    pub temporal_audio: Tensor,
    pub spatial: Rope3d,
}

pub const AUDIO_ROW: usize = 0;
pub const VISUAL_ROW: usize = 1;

impl EncodingSet {
    fn new(cfg: &ClassifierConfig, vb: VarBuilder) -> Result<Self> {
        let c = cfg.width();
        let init = candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 };
        Ok(EncodingSet {
            modal: vb.get_with_hints((2, c), "modal", init)?,
            temporal_video: vb.get_with_hints((cfg.max_video_frames, c), "temporal_video", init)?,
            temporal_audio: vb.get_with_hints((cfg.max_audio_frames, c), "temporal_audio", init)?,
            spatial: Rope3d {
                channels: c,
                base: cfg.rope_base,
            },
        })
    }

    /// Same encodings with the audio and visual modal rows exchanged.
    pub fn swap_modal(&self) -> Result<Self> {
        let swapped = Tensor::cat(&[&self.modal.get(1)?.unsqueeze(0)?, &self.modal.get(0)?.unsqueeze(0)?], 0)?;
        Ok(EncodingSet {
            modal: swapped,
            ..self.clone()
        })
    }
}

/// Global max pool over the spatial axes: `[N, c, h, w] -> [N, c]`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.max(D::Minus1)?)
}

/// `[CLS, video..., audio...]` for batched tokens `[B, t, c]`.
pub fn assemble_sequence(v_tokens: &Tensor, a_tokens: &Tensor, cls: &Tensor) -> Result<Tensor> {
    let (b, _, cv) = v_tokens.dims3()?;
    let (ba, _, ca) = a_tokens.dims3()?;
    if cv != ca || cls.dims() != [cv] || b != ba {
        return Err(Error::Shape(format!(
            "token widths differ: video {:?}, audio {:?}, cls {:?}",
            v_tokens.dims(),
            a_tokens.dims(),
            cls.dims()
        )));
    }
    let cls = cls.reshape((1, 1, cv))?.broadcast_as((b, 1, cv))?;
    Ok(Tensor::cat(&[&cls, v_tokens, a_tokens], 1)?)
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(c: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(c, vb.pp("ln1"))?,
            attn: Attention::new_live(c, c, heads, vb.pp("attn"))?,
            ln2: LayerNorm::new(c, vb.pp("ln2"))?,
            fc1: candle_nn::linear(c, 2 * c, vb.pp("fc1"))?,
            fc2: candle_nn::linear(2 * c, c, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h)?)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?)?;
        Ok((x + h)?)
    }
}

pub struct AvClassifier {
    pub config: ClassifierConfig,
    pub store: ParamStore,
    pub encoder: VideoEncoder,
    pub encodings: EncodingSet,
    pub cls: Tensor,
    audio_proj: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

impl AvClassifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let vb = store.var_builder();
        let c = config.width();
        let enc = &config.encoder;
        let blocks = (0..config.layers)
            .map(|i| Block::new(c, config.heads, vb.pp(format!("blocks.{i}"))))
            .collect::<Result<_>>()?;
        Ok(AvClassifier {
            encoder: VideoEncoder::new(*enc, vb.pp("encoder"))?,
            encodings: EncodingSet::new(&config, vb.pp("encodings"))?,
            cls: vb.get_with_hints(c, "cls", candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 })?,
            audio_proj: candle_nn::linear_no_bias(enc.audio_tokens() * enc.audio_dim, c, vb.pp("audio_proj"))?,
            blocks,
            norm: LayerNorm::new(c, vb.pp("norm"))?,
            head1: candle_nn::linear(c, c, vb.pp("head1"))?,
            head2: candle_nn::linear(c, 1, vb.pp("head2"))?,
            store,
            config,
        })
    }

    /// Classifier whose encoder starts from the denoiser's encoder weights.
    pub fn from_univdm(config: ClassifierConfig, model: &UniVdm, seed: u64) -> Result<Self> {
        if config.encoder != model.config {
            return Err(Error::Config("classifier encoder config differs from the denoiser's".into()));
        }
        let clf = AvClassifier::new(config, seed)?;
        clf.store.load(&model.store.tensors(), Some(("encoder.", "encoder.")))?;
        Ok(clf)
    }

    pub fn from_tensors(config: ClassifierConfig, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let clf = AvClassifier::new(config, 0)?;
        let loaded = clf.store.load(tensors, None)?;
        if loaded != clf.store.all_vars().len() {
            return Err(Error::Container(format!("classifier checkpoint has {loaded} parameters")));
        }
        Ok(clf)
    }

    pub fn kind(&self) -> ClassifierKind {
        self.config.kind
    }

    fn check_t(&self, t: &Tensor) -> Result<()> {
        for v in t.to_vec1::<f64>()? {
            if v < 0.0 || v >= self.config.encoder.train_steps as f64 {
                return Err(Error::InvalidArgument(format!(
                    "timestep {v} outside 0..{}",
                    self.config.encoder.train_steps
                )));
            }
        }
        Ok(())
    }

    /// Encoder feature maps `[B * F, c, h/2, w/2]` after the rotary encoding.
    pub fn video_features(&self, v: &Tensor, t: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let (_, f, ..) = v.dims5()?;
        if f > self.config.max_video_frames {
            return Err(Error::Shape(format!("{f} video frames exceed {}", self.config.max_video_frames)));
        }
        self.check_t(t)?;
        let input = self.encoder.fold_video(v, t, audio)?;
        let mid = self.encoder.forward(&input)?.mid;
        self.encodings.spatial.apply(&mid, f)
    }

    /// Video tokens `[B, F, c]`.
    pub fn encode_video_tokens(&self, v: &Tensor, t: &Tensor, audio: &Tensor, enc: &EncodingSet) -> Result<Tensor> {
        let (b, f, ..) = v.dims5()?;
        let pooled = global_max_pool(&self.video_features(v, t, audio)?)?;
        let c = self.config.width();
        let pooled = pooled.reshape((b, f, c))?;
        let add = enc.modal.get(VISUAL_ROW)?.unsqueeze(0)?.broadcast_add(&enc.temporal_video.narrow(0, 0, f)?)?;
        Ok(pooled.broadcast_add(&add.unsqueeze(0)?)?)
    }

    /// Audio tokens `[B, t_a, c]` from windowed audio `[B, t_a, (2m+1) * d_a]`.
    pub fn encode_audio_tokens(&self, audio: &Tensor, enc: &EncodingSet) -> Result<Tensor> {
        let (_, ta, _) = audio.dims3()?;
        if ta > self.config.max_audio_frames {
            return Err(Error::Shape(format!("{ta} audio frames exceed {}", self.config.max_audio_frames)));
        }
        let add = enc.modal.get(AUDIO_ROW)?.unsqueeze(0)?.broadcast_add(&enc.temporal_audio.narrow(0, 0, ta)?)?;
        Ok(self.audio_proj.forward(audio)?.broadcast_add(&add.unsqueeze(0)?)?)
    }

    /// Final-layer outputs `[B, L, c]`.
    pub fn transformer(&self, seq: &Tensor) -> Result<Tensor> {
        let mut x = seq.clone();
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.norm.forward(&x)
    }

    /// Logit of the sync probability; reads only the CLS output.
    pub fn head(&self, y: &Tensor) -> Result<Tensor> {
        let cls = y.narrow(1, 0, 1)?.squeeze(1)?;
        Ok(self.head2.forward(&gelu(&self.head1.forward(&cls)?)?)?.squeeze(1)?)
    }

    /// Token sequence for a batch of (video, audio) pairs.
    pub fn sequence(&self, v: &Tensor, t: &Tensor, audio: &Tensor) -> Result<Tensor> {
        let vt = self.encode_video_tokens(v, t, audio, &self.encodings)?;
        let at = self.encode_audio_tokens(audio, &self.encodings)?;
        assemble_sequence(&vt, &at, &self.cls)
    }

    /// Sync logits `[B]`.
    pub fn logits(&self, v: &Tensor, t: &Tensor, audio: &Tensor) -> Result<Tensor> {
        self.head(&self.transformer(&self.sequence(v, t, audio)?)?)
    }

    /// Sync probabilities in (0, 1).
    pub fn score(&self, v: &Tensor, t: &Tensor, audio: &Tensor) -> Result<Vec<f64>> {
        let logits = self.logits(v, t, audio)?.to_vec1::<f64>()?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }

    /// Scores a pair after applying this classifier's region mask.
    pub fn score_pair(&self, pair: &SamplePair, t: usize) -> Result<f64> {
        let v = match &pair.region_mask {
            Some(m) => mask_video(&pair.video, m)?,
            None => pair.video.clone(),
        };
        let tt = Tensor::new(&[t as f64], v.device())?;
        Ok(self.score(&v.unsqueeze(0)?, &tt, &pair.audio.unsqueeze(0)?)?[0])
    }

    /// Gradient of `log s` with respect to `z` (`[B, F, C, h, w]`), with the
    /// classifier seeing `z * region_mask` and the gradient zeroed outside
    /// the mask (`[B, F, h, w]`).
    pub fn sync_gradient(&self, z: &Tensor, audio: &Tensor, t: &Tensor, region_mask: &Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&z.detach())?;
        let masked = mask_video(var.as_tensor(), region_mask)?;
        let obj = log_sigmoid(&self.logits(&masked, t, audio)?)?.sum_all()?;
        let grads = obj.backward()?;
        let g = match grads.get(var.as_tensor()) {
            Some(g) => mask_video(g, region_mask)?,
            None => z.zeros_like()?,
        };
        let max = g.abs()?.flatten_all()?.max(0)?.to_scalar::<f64>()?;
        if !max.is_finite() {
            return Err(Error::Numeric(format!(
                "{} classifier gradient is not finite (log s = {})",
                self.kind(),
                obj.to_scalar::<f64>()?
            )));
        }
        Ok(g)
    }

    fn trainable_vars(&self) -> Vec<Var> {
        if self.config.freeze_encoder {
            let enc: Vec<_> = self.store.vars_with_prefix("encoder.").iter().map(|v| v.as_tensor().id()).collect();
            self.store.all_vars().into_iter().filter(|v| !enc.contains(&v.as_tensor().id())).collect()
        } else {
            self.store.all_vars()
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy with probabilities clamped to `[eps, 1 - eps]`.
pub fn bce_loss(s: f64, y: f64) -> f64 {
    let s = s.clamp(PROB_EPS, 1.0 - PROB_EPS);
    -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
}

/// Mean BCE over a batch of logits `[B]` and labels `[B]`.
pub fn bce_loss_tensor(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let s = crate::nn::sigmoid(logits)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?;
    let pos = labels.mul(&s.log()?)?;
    let neg = labels.affine(-1.0, 1.0)?.mul(&s.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean_all()?)
}

/// Multiplies `[.., F, C, h, w]` latents by a `[.., F, h, w]` mask.
pub fn mask_video(v: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(mask.rank() - 2)?;
    Ok(v.broadcast_mul(&m)?)
}

/// Region a classifier attends to, given a binary face map.
pub fn region_mask(kind: ClassifierKind, face: &Tensor) -> Result<Tensor> {
    Ok(match kind {
        ClassifierKind::Face => face.clone(),
        ClassifierKind::NonFace => face.affine(-1.0, 1.0)?,
    })
}

/// Face bounding box of one frame in pixel coordinates (`x1`, `y1` exclusive).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceBox {
    pub frame_index: usize,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

/// Binary face map `[frames, H / factor, W / factor]`: a latent cell is
/// face when its pixel block overlaps the frame's box, then the map is
/// dilated by `dilation` cells. Frames without a box have no face cells.
pub fn face_cells(boxes: &[FaceBox], frames: usize, width: usize, height: usize, factor: usize, dilation: usize) -> Result<Tensor> {
    if factor == 0 || !width.is_multiple_of(factor) || !height.is_multiple_of(factor) {
        return Err(Error::Shape(format!("{width}x{height} frame not divisible by {factor}")));
    }
    let (w, h) = (width / factor, height / factor);
    let mut map = vec![0.0; frames * h * w];
    for b in boxes {
        if b.frame_index >= frames {
            continue;
        }
        let k = factor as f64;
        for cy in 0..h {
            for cx in 0..w {
                let (px0, py0) = (cx as f64 * k, cy as f64 * k);
                if b.x0 < px0 + k && b.x1 > px0 && b.y0 < py0 + k && b.y1 > py0 {
                    map[(b.frame_index * h + cy) * w + cx] = 1.0;
                }
            }
        }
    }
    if dilation > 0 {
        let src = map.clone();
        for f in 0..frames {
            for cy in 0..h {
                for cx in 0..w {
                    let ylo = cy.saturating_sub(dilation);
                    let xlo = cx.saturating_sub(dilation);
                    let hit = (ylo..=(cy + dilation).min(h - 1))
                        .any(|y| (xlo..=(cx + dilation).min(w - 1)).any(|x| src[(f * h + y) * w + x] > 0.0));
                    if hit {
                        map[(f * h + cy) * w + cx] = 1.0;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(map, (frames, h, w), &crate::nn::device())?)
}

/// One (video, audio) example for classifier training or scoring.
#[derive(Clone, Debug)]
pub struct SamplePair {
    /// Clean latent video `[F, C, h, w]`.
    pub video: Tensor,
    /// Windowed audio `[F, (2m+1) * d_a]`.
    pub audio: Tensor,
    /// 1 for real, 0 for generated.
    pub label: f64,
    /// Binary map `[F, h, w]`; pixels outside it are zeroed before encoding.
    pub region_mask: Option<Tensor>,
}

/// With probability `p`, restricts the pair to the classifier's region.
/// Missing face boxes count as an empty face region.
pub fn apply_region_masking(
    pair: &SamplePair,
    kind: ClassifierKind,
    p: f64,
    face: Option<&Tensor>,
    rng: &mut impl Rng,
) -> Result<SamplePair> {
    if !rng.random_bool(p.clamp(0.0, 1.0)) {
        return Ok(pair.clone());
    }
    let face = match face {
        Some(f) => f.clone(),
        None => {
            log::warn!("no face boxes for sample; treating the face region as empty");
            let (f, _, h, w) = pair.video.dims4()?;
            Tensor::zeros((f, h, w), DTYPE, pair.video.device())?
        }
    };
    let mask = region_mask(kind, &face)?;
    Ok(SamplePair {
        video: mask_video(&pair.video, &mask)?,
        region_mask: Some(mask),
        ..pair.clone()
    })
}

/// Clip lengths `base` scaled by `factor`, rounded to the nearest frame.
pub fn scale_lengths(base: &[usize], factor: f64) -> Vec<usize> {
    base.iter().map(|&l| ((l as f64 * factor).round() as usize).max(1)).collect()
}

/// A random crop of a clip with a random reference frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LengthSample {
    pub clip: usize,
    pub start: usize,
    pub len: usize,
    pub reference_index: usize,
}

/// Draws `n` crops with lengths uniform over `lengths`. Clips shorter than
/// the drawn length are skipped.
pub fn augment_lengths(clip_lengths: &[usize], lengths: &[usize], n: usize, rng: &mut impl Rng) -> Vec<LengthSample> {
    let mut out = Vec::with_capacity(n);
    if clip_lengths.is_empty() || lengths.is_empty() {
        return out;
    }
    for _ in 0..n {
        let clip = rng.random_range(0..clip_lengths.len());
        let len = lengths[rng.random_range(0..lengths.len())];
        let frames = clip_lengths[clip];
        if frames < len {
            log::info!("clip {clip} has {frames} frames, shorter than {len}; skipped");
            continue;
        }
        out.push(LengthSample {
            clip,
            start: rng.random_range(0..=frames - len),
            len,
            reference_index: rng.random_range(0..frames),
        });
    }
    out
}

/// Real and generated clips for classifier training.
#[derive(Clone, Debug)]
pub struct PairDataset {
    /// `[N, F, C, h, w]`
    pub video: Tensor,
    /// `[N, F, (2m+1) * d_a]`
    pub audio: Tensor,
    /// Binary face maps at latent resolution `[N, F, h, w]`.
    pub face: Tensor,
    pub labels: Vec<f64>,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Result<PairDataset> {
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let t = Tensor::new(ids.as_slice(), self.video.device())?;
        Ok(PairDataset {
            video: self.video.index_select(&t, 0)?,
            audio: self.audio.index_select(&t, 0)?,
            face: self.face.index_select(&t, 0)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    pub fn concat(&self, other: &PairDataset) -> Result<PairDataset> {
        Ok(PairDataset {
            video: Tensor::cat(&[&self.video, &other.video], 0)?,
            audio: Tensor::cat(&[&self.audio, &other.audio], 0)?,
            face: Tensor::cat(&[&self.face, &other.face], 0)?,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
        })
    }

    pub fn pair(&self, i: usize) -> Result<SamplePair> {
        Ok(SamplePair {
            video: self.video.get(i)?,
            audio: self.audio.get(i)?,
            label: self.labels[i],
            region_mask: None,
        })
    }
}

/// Generates one video per real clip with the unguided sampler, reusing the
/// clip's audio and a randomly chosen frame as reference. Returns the real
/// clips labeled 1 followed by their generated partners labeled 0.
pub fn make_negative_samples(
    model: &UniVdm,
    real_video: &Tensor,
    audio: &Tensor,
    face: &Tensor,
    n_steps: usize,
    batch: usize,
    seed: u64,
) -> Result<PairDataset> {
    let (n, f, c, h, w) = real_video.dims5()?;
    let sched = model.inference_schedule(n_steps)?;
    let mut rng = labeled_rng(seed, "negatives");
    let refs: Vec<usize> = augment_lengths(&vec![f; n], &[f], n, &mut rng)
        .iter()
        .map(|s| s.reference_index)
        .collect();
    let mut generated = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.min(n - start);
        let reference = Tensor::stack(
            &(start..start + len)
                .map(|i| real_video.get(i)?.get(refs[i]))
                .collect::<candle_core::Result<Vec<_>>>()?,
            0,
        )?;
        let cond = Conditioning {
            reference,
            audio: audio.narrow(0, start, len)?,
            first_frame: None,
        };
        let noise = randn(&mut rng, (len, f, c, h, w))?;
        let out = sample_unguided(model, &sched, noise, &cond)?;
        crate::nn::ensure_finite(&out, "generated negative")?;
        generated.push(out);
        start += len;
    }
    let gen = Tensor::cat(&generated, 0)?;
    let real = PairDataset {
        video: real_video.clone(),
        audio: audio.clone(),
        face: face.clone(),
        labels: vec![1.0; n],
    };
    let fake = PairDataset {
        video: gen,
        audio: audio.clone(),
        face: face.clone(),
        labels: vec![0.0; n],
    };
    real.concat(&fake)
}

fn sample_unguided(model: &UniVdm, sched: &InferenceSchedule, noise: Tensor, cond: &Conditioning) -> Result<Tensor> {
    let mut z = noise;
    for level in (1..=sched.n_steps()).rev() {
        z = solver_step(model, sched, &z, cond, level)?;
    }
    Ok(z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_prob: f64,
    pub lengths: Vec<usize>,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            steps: 400,
            batch: 16,
            lr: 1e-3,
            mask_prob: 0.8,
            lengths: scale_lengths(&[30, 60, 90, 120], 1.0 / 15.0),
        }
    }
}

/// Trains with BCE on noised latents at uniformly drawn timesteps, random
/// crop lengths and region masking. Returns the per-step losses.
pub fn train_classifier(
    clf: &AvClassifier,
    data: &PairDataset,
    schedule: &NoiseSchedule,
    cfg: &ClassifierTrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty classifier training set".into()));
    }
    let frames = data.video.dims()[1];
    let mut opt = candle_nn::AdamW::new(
        clf.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = labeled_rng(seed, &format!("classifier-train-{}", clf.kind()));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let batch = data.select(&idx)?;
        let len = cfg.lengths[rng.random_range(0..cfg.lengths.len())].min(frames);
        let start = rng.random_range(0..=frames - len);
        let video = batch.video.narrow(1, start, len)?;
        let audio = batch.audio.narrow(1, start, len)?;
        let face = batch.face.narrow(1, start, len)?;

        let ts: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..schedule.steps())).collect();
        let noise = randn(&mut rng, video.shape().clone())?;
        let noisy = schedule.add_noise_batch(&video, &noise, &ts)?;
        let region = region_mask(clf.kind(), &face)?;
        let keep: Vec<f64> = (0..cfg.batch).map(|_| rng.random_bool(cfg.mask_prob) as u8 as f64).collect();
        let keep = Tensor::from_vec(keep, (cfg.batch, 1, 1, 1), video.device())?;
        // masked samples use the region map, the rest an all-ones map
        let mask = (region.broadcast_mul(&keep)? + keep.affine(-1.0, 1.0)?.broadcast_as(region.shape())?)?;
        let input = mask_video(&noisy, &mask)?;

        let t = Tensor::from_vec(ts.iter().map(|&t| t as f64).collect::<Vec<_>>(), cfg.batch, video.device())?;
        let labels = Tensor::new(batch.labels.as_slice(), video.device())?;
        let loss = bce_loss_tensor(&clf.logits(&input, &t, &audio)?, &labels)?;
        let value = loss.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("classifier loss is {value} at step {step}")));
        }
        opt.backward_step(&loss)?;
        losses.push(value);
        if step % 100 == 0 {
            log::debug!("{} classifier step {step}: loss {value:.4}", clf.kind());
        }
    }
    Ok(losses)
}

/// Accuracy at a fixed timestep with the classifier's region always applied.
pub fn evaluate_accuracy(clf: &AvClassifier, data: &PairDataset, t: usize, batch: usize) -> Result<f64> {
    let mut correct = 0usize;
    let mut start = 0;
    while start < data.len() {
        let len = batch.min(data.len() - start);
        let idx: Vec<usize> = (start..start + len).collect();
        let part = data.select(&idx)?;
        let mask = region_mask(clf.kind(), &part.face)?;
        let v = mask_video(&part.video, &mask)?;
        let tt = Tensor::full(t as f64, len, v.device())?;
        let scores = clf.score(&v, &tt, &part.audio)?;
        correct += scores
            .iter()
            .zip(&part.labels)
            .filter(|(s, y)| (**s > 0.5) == (**y > 0.5))
            .count();
        start += len;
    }
    Ok(correct as f64 / data.len() as f64)
}

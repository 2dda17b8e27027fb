//! Stage functions shared by the command-line front end and tests:
//! dataset loading, codec fitting, checkpoints and guided generation.

use std::path::Path;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::av_classifier::{face_cells, AvClassifier, ClassifierKind, PairDataset};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, RegionMasks, Sampler, SamplerStats, SyncGuide};
use crate::io::config::RunConfig;
use crate::io::container::{Checkpoint, TensorContainer};
use crate::io::synthetic::{read_clip, read_manifest, Manifest};
use crate::nn::{device, labeled_rng, ParamStore};
use crate::par_mask::{build_sequence_mask, downsample_mask, ReweightMask};
use crate::univdm::audio::{window_audio, AudioFeatureExtractor, LogMelExtractor};
use crate::univdm::codec::{AutoencoderConfig, Codec, ConvAutoencoder};
use crate::univdm::schedule::ScheduleKind;
use crate::univdm::train::LatentDataset;
use crate::univdm::{make_unified_input, Conditioning, UniVdm, UniVdmConfig};

/// Spatial factor between frames and latents.
pub const LATENT_FACTOR: usize = 8;

/// Clips loaded from a dataset root, in pixel space.
#[derive(Clone, Debug)]
pub struct ClipSet {
    pub manifest: Manifest,
    /// `[N, F, 3, H, W]`
    pub frames: Tensor,
    /// `[N, F, (2m+1) * d_a]`
    pub audio: Tensor,
    /// Latent-resolution PAR weights `[N, F, h, w]`.
    pub par: Tensor,
    /// Latent-resolution face cells `[N, F, h, w]`.
    pub face: Tensor,
}

pub fn load_clips(root: &Path, cfg: &RunConfig) -> Result<ClipSet> {
    let manifest = read_manifest(root)?;
    let s = manifest.spec;
    let n = manifest.clips.len();
    let extractor = LogMelExtractor {
        bands: cfg.univdm.audio_bands,
    };
    let m = cfg.univdm.network.audio_window;
    let (mut frames, mut audio, mut par, mut face) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let clip = read_clip(root, &manifest, i)?;
        frames.push(clip.frames.to_tensor()?);
        let feats = extractor.extract(&clip.audio.samples, clip.audio.sample_rate, s.fps, s.frames)?;
        audio.push(window_audio(&feats, extractor.dim(), m).to_tensor()?);
        let mask = if cfg.par.enabled {
            build_sequence_mask(&clip.pose, &cfg.par.params)?
        } else {
            ReweightMask::ones(s.frames, s.width, s.height)
        };
        let small = downsample_mask(&mask, LATENT_FACTOR)?;
        par.push(Tensor::from_vec(small.weights, (s.frames, small.height, small.width), &device())?);
        face.push(face_cells(
            &clip.faces,
            s.frames,
            s.width,
            s.height,
            LATENT_FACTOR,
            cfg.classifier.face_dilation,
        )?);
    }
    Ok(ClipSet {
        manifest,
        frames: Tensor::stack(&frames, 0)?,
        audio: Tensor::stack(&audio, 0)?,
        par: Tensor::stack(&par, 0)?,
        face: Tensor::stack(&face, 0)?,
    })
}

/// Deterministic train / held-out split of clip indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub holdout: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, holdout_fraction: f64, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut labeled_rng(seed, "split"));
        let k = ((n as f64 * holdout_fraction).round() as usize).min(n.saturating_sub(1));
        let mut holdout = idx[..k].to_vec();
        let mut train = idx[k..].to_vec();
        holdout.sort();
        train.sort();
        Split { train, holdout }
    }
}

pub fn select(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(t.index_select(&Tensor::new(ids.as_slice(), t.device())?, 0)?)
}

/// A fitted autoencoder with its parameter store.
pub struct TrainedCodec {
    pub store: ParamStore,
    pub ae: ConvAutoencoder,
}

impl TrainedCodec {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let ae = ConvAutoencoder::new(config, store.var_builder())?;
        Ok(TrainedCodec { store, ae })
    }

    /// Fits on the frames of `clips` (`[N, F, 3, H, W]`).
    pub fn fit(cfg: &RunConfig, clips: &Tensor) -> Result<(Self, Vec<f64>)> {
        let mut codec = TrainedCodec::new(cfg.codec.autoencoder, cfg.seed)?;
        let (n, f, c, h, w) = clips.dims5()?;
        let flat = clips.reshape((n * f, c, h, w))?;
        let losses = codec
            .ae
            .fit(&codec.store, &flat, cfg.codec.steps, cfg.codec.batch, cfg.codec.lr, cfg.seed)?;
        Ok((codec, losses))
    }

    /// `[N, F, 3, H, W]` to `[N, F, C, h, w]`.
    pub fn encode_clips(&self, clips: &Tensor) -> Result<Tensor> {
        let (n, f, c, h, w) = clips.dims5()?;
        let z = chunked(&clips.reshape((n * f, c, h, w))?, |x| Ok(self.ae.encode(x)?.detach()))?;
        let (_, cl, hl, wl) = z.dims4()?;
        Ok(z.reshape((n, f, cl, hl, wl))?)
    }

    pub fn decode_clips(&self, z: &Tensor) -> Result<Tensor> {
        let (n, f, c, h, w) = z.dims5()?;
        let x = chunked(&z.reshape((n * f, c, h, w))?, |z| Ok(self.ae.decode(z)?.detach()))?;
        let (_, xc, xh, xw) = x.dims4()?;
        Ok(x.reshape((n, f, xc, xh, xw))?)
    }

    pub fn checkpoint(&self, config_digest: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "codec",
            "config": self.ae.config,
            "config_digest": config_digest,
        }));
        ck.insert_tensors("param.", &self.store.tensors())?;
        ck.insert_values("scale", &[self.ae.scale]);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "codec")?;
        let config: AutoencoderConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let mut codec = TrainedCodec::new(config, 0)?;
        let tensors = ck.tensors_with_prefix("param.")?;
        if codec.store.load(&tensors, None)? != codec.store.all_vars().len() {
            return Err(Error::Container("codec checkpoint is incomplete".into()));
        }
        codec.ae.scale = ck.values("scale")?[0];
        Ok(codec)
    }
}

/// Applies `f` to row blocks of `x` to bound peak memory.
fn chunked(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    const CHUNK: usize = 256;
    let n = x.dim(0)?;
    let parts = (0..n)
        .step_by(CHUNK)
        .map(|s| f(&x.narrow(0, s, CHUNK.min(n - s))?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

fn expect_kind(ck: &Checkpoint, kind: &str) -> Result<()> {
    let found = ck.meta_str("kind")?;
    if found != kind {
        return Err(Error::Container(format!("expected a {kind} checkpoint, found {found}")));
    }
    Ok(())
}

/// Latents and conditioning of every clip, ready for diffusion training.
#[derive(Clone, Debug)]
pub struct LatentSet {
    pub latents: Tensor,
    pub audio: Tensor,
    pub par: Tensor,
    pub face: Tensor,
    pub split: Split,
}

impl LatentSet {
    pub fn train_dataset(&self) -> Result<LatentDataset> {
        let i = &self.split.train;
        LatentDataset::new(select(&self.latents, i)?, select(&self.audio, i)?, select(&self.par, i)?)
    }

    pub fn checkpoint(&self, config_digest: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(serde_json::json!({
            "kind": "latents",
            "split": self.split,
            "config_digest": config_digest,
        }));
        for (name, t) in [("latents", &self.latents), ("audio", &self.audio), ("par", &self.par), ("face", &self.face)] {
            ck.tensors.insert(name.into(), TensorContainer::from_tensor(t)?);
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        expect_kind(ck, "latents")?;
        let get = |name: &str| -> Result<Tensor> {
            ck.tensors
                .get(name)
                .ok_or_else(|| Error::Container(format!("latent checkpoint lacks `{name}`")))?
                .to_tensor()
        };
        Ok(LatentSet {
            latents: get("latents")?,
            audio: get("audio")?,
            par: get("par")?,
            face: get("face")?,
            split: serde_json::from_value(ck.metadata["split"].clone())?,
        })
    }
}

pub fn univdm_checkpoint(model: &UniVdm, kind: ScheduleKind, config_digest: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "univdm",
        "config": model.config,
        "schedule": kind,
        "config_digest": config_digest,
    }));
    ck.insert_tensors("param.", &model.store.tensors())?;
    ck.insert_values("schedule.lambda", &model.schedule.lambda);
    ck.insert_values("schedule.sigma", &model.schedule.sigma);
    Ok(ck)
}

pub fn load_univdm(ck: &Checkpoint) -> Result<UniVdm> {
    expect_kind(ck, "univdm")?;
    let config: UniVdmConfig = serde_json::from_value(ck.metadata["config"].clone())?;
    let kind: ScheduleKind = serde_json::from_value(ck.metadata["schedule"].clone())?;
    let model = UniVdm::from_tensors(config, kind, &ck.tensors_with_prefix("param.")?)?;
    if ck.values("schedule.lambda")? != model.schedule.lambda.as_slice() {
        return Err(Error::Container("stored schedule differs from the rebuilt one".into()));
    }
    Ok(model)
}

pub fn classifier_checkpoint(clf: &AvClassifier, config_digest: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "classifier",
        "classifier_kind": clf.kind(),
        "config": clf.config,
        "config_digest": config_digest,
    }));
    ck.insert_tensors("param.", &clf.store.tensors())?;
    Ok(ck)
}

pub fn load_classifier(ck: &Checkpoint, expected: ClassifierKind) -> Result<AvClassifier> {
    expect_kind(ck, "classifier")?;
    let config: crate::av_classifier::ClassifierConfig = serde_json::from_value(ck.metadata["config"].clone())?;
    if config.kind != expected {
        return Err(Error::Config(format!("expected a {expected} classifier, found {}", config.kind)));
    }
    AvClassifier::from_tensors(config, &ck.tensors_with_prefix("param.")?)
}

pub fn pairs_checkpoint(pairs: &PairDataset, split: &Split, config_digest: &str) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(serde_json::json!({
        "kind": "pairs",
        "split": split,
        "config_digest": config_digest,
    }));
    for (name, t) in [("video", &pairs.video), ("audio", &pairs.audio), ("face", &pairs.face)] {
        ck.tensors.insert(name.into(), TensorContainer::from_tensor(t)?);
    }
    ck.insert_values("labels", &pairs.labels);
    Ok(ck)
}

pub fn load_pairs(ck: &Checkpoint) -> Result<(PairDataset, Split)> {
    expect_kind(ck, "pairs")?;
    let get = |name: &str| -> Result<Tensor> {
        ck.tensors
            .get(name)
            .ok_or_else(|| Error::Container(format!("pair checkpoint lacks `{name}`")))?
            .to_tensor()
    };
    Ok((
        PairDataset {
            video: get("video")?,
            audio: get("audio")?,
            face: get("face")?,
            labels: ck.values("labels")?.to_vec(),
        },
        serde_json::from_value(ck.metadata["split"].clone())?,
    ))
}

/// Rows `idx` of the real half and the generated half of `pairs`, where
/// the generated partner of clip `i` sits at `n + i`.
pub fn pairs_for_clips(pairs: &PairDataset, idx: &[usize]) -> Result<PairDataset> {
    let n = pairs.len() / 2;
    let rows: Vec<usize> = idx.iter().copied().chain(idx.iter().map(|i| n + i)).collect();
    pairs.select(&rows)
}

/// Conditioning for generation from clip `clip`: its frame-0 latent as
/// reference and its audio.
pub fn clip_conditioning(latents: &LatentSet, clip: usize) -> Result<(Conditioning, RegionMasks)> {
    let reference = latents.latents.get(clip)?.get(0)?.unsqueeze(0)?;
    let audio = latents.audio.get(clip)?.unsqueeze(0)?;
    let face = latents.face.get(clip)?.unsqueeze(0)?;
    Ok((
        Conditioning {
            reference,
            audio,
            first_frame: None,
        },
        RegionMasks::from_face(&face)?,
    ))
}

/// Samples one clip-conditioned video and returns it with sampler stats.
pub fn generate(
    model: &UniVdm,
    face: Option<&dyn SyncGuide>,
    nonface: Option<&dyn SyncGuide>,
    guidance: &GuidanceConfig,
    cond: &Conditioning,
    masks: &RegionMasks,
    seed: u64,
) -> Result<(Tensor, SamplerStats)> {
    let sched = model.inference_schedule(guidance.n_steps)?;
    let sampler = Sampler::new(model, &sched, face, nonface, guidance)?;
    let (_, c, h, w) = cond.reference.dims4()?;
    let (b, f, _) = cond.audio.dims3()?;
    let input = make_unified_input(None, (b, f, c, h, w), seed)?;
    let z = sampler.sample(cond, masks, &input)?;
    Ok((z, sampler.stats()))
}

/// Mean sync score of `videos` (`[B, F, C, h, w]`) at timestep 0 with the
/// classifier's region applied.
pub fn mean_score(clf: &AvClassifier, videos: &Tensor, audio: &Tensor, face: &Tensor) -> Result<f64> {
    let mask = crate::av_classifier::region_mask(clf.kind(), face)?;
    let v = crate::av_classifier::mask_video(videos, &mask)?;
    let t = Tensor::zeros(videos.dim(0)?, crate::nn::DTYPE, videos.device())?;
    let s = clf.score(&v, &t, audio)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

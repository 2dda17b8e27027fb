//! Single-file JSON run configuration.
//!
//! Every section has defaults, so a config file may be partial; unknown
//! keys are rejected at every level. The stored copy of a run's config is
//! the fully materialized form, and its SHA-256 is the config digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::av_classifier::{ClassifierConfig, ClassifierKind, ClassifierTrainConfig};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::io::container::read_file;
use crate::io::synthetic::SyntheticSpec;
use crate::par_mask::ParParams;
use crate::univdm::codec::AutoencoderConfig;
use crate::univdm::schedule::ScheduleKind;
use crate::univdm::train::TrainConfig;
use crate::univdm::UniVdmConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root holding `manifest.json`.
    pub root: PathBuf,
    pub synthetic: SyntheticSpec,
    /// Fraction of clips held out from UniVDM and classifier training.
    pub holdout_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            root: PathBuf::from("data"),
            synthetic: SyntheticSpec::default(),
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParSection {
    pub params: ParParams,
    /// Whether training uses the re-weighting mask or a uniform one.
    pub enabled: bool,
}

impl Default for ParSection {
    fn default() -> Self {
        ParSection {
            params: ParParams {
                radius: 3.0,
                blur_sigma: 1.0,
                ..ParParams::default()
            },
            enabled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecSection {
    pub autoencoder: AutoencoderConfig,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        CodecSection {
            autoencoder: AutoencoderConfig::default(),
            steps: 400,
            batch: 16,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UniVdmSection {
    pub network: UniVdmConfig,
    pub schedule: ScheduleKind,
    pub train: TrainConfig,
    /// Log-mel bands per frame (`d_a`).
    pub audio_bands: usize,
}

impl Default for UniVdmSection {
    fn default() -> Self {
        UniVdmSection {
            network: UniVdmConfig::default(),
            schedule: ScheduleKind::LinearBeta,
            train: TrainConfig::default(),
            audio_bands: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativesSection {
    pub batch: usize,
}

impl Default for NegativesSection {
    fn default() -> Self {
        NegativesSection { batch: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub layers: usize,
    pub heads: usize,
    pub max_video_frames: usize,
    pub max_audio_frames: usize,
    pub rope_base: f64,
    pub freeze_encoder: bool,
    pub train: ClassifierTrainConfig,
    /// Latent cells of dilation applied to the face map.
    pub face_dilation: usize,
    /// Timestep at which held-out accuracy is reported.
    pub eval_timestep: usize,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        ClassifierSection {
            layers: 4,
            heads: 4,
            max_video_frames: 32,
            max_audio_frames: 32,
            rope_base: 100.0,
            freeze_encoder: false,
            train: ClassifierTrainConfig::default(),
            face_dilation: 0,
            eval_timestep: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LongVideoSection {
    pub segments: usize,
}

impl Default for LongVideoSection {
    fn default() -> Self {
        LongVideoSection { segments: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub sigma_b: f64,
    pub diversity_pairs: usize,
    pub fgd_shrinkage: f64,
    pub feature_dim: usize,
    pub feature_steps: usize,
    pub feature_lr: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            sigma_b: crate::metrics::DEFAULT_SIGMA_B,
            diversity_pairs: 500,
            fgd_shrinkage: 1e-6,
            feature_dim: 32,
            feature_steps: 300,
            feature_lr: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Only `"cpu"` is supported.
    pub device: String,
    pub data: DataSection,
    pub par: ParSection,
    pub codec: CodecSection,
    pub univdm: UniVdmSection,
    pub negatives: NegativesSection,
    pub classifier: ClassifierSection,
    pub guidance: GuidanceConfig,
    pub long_video: LongVideoSection,
    pub metrics: MetricsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            device: "cpu".into(),
            data: DataSection::default(),
            par: ParSection::default(),
            codec: CodecSection::default(),
            univdm: UniVdmSection::default(),
            negatives: NegativesSection::default(),
            classifier: ClassifierSection::default(),
            guidance: GuidanceConfig::default(),
            long_video: LongVideoSection::default(),
            metrics: MetricsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let bytes = read_file(p).map_err(|e| match e {
                    Error::MissingInput(m) => Error::Config(m),
                    other => other,
                })?;
                let text = String::from_utf8(bytes).map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?;
                RunConfig::from_json(&text)
            }
        }
    }

    /// Materialized form with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.device != "cpu" {
            return Err(Error::Config(format!("unsupported device `{}`", self.device)));
        }
        self.data.synthetic.validate()?;
        if !(0.0..1.0).contains(&self.data.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        self.par.params.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        let n = &self.univdm.network;
        if n.latent_channels != self.codec.autoencoder.latent_channels {
            return Err(Error::Config("univdm and codec latent_channels differ".into()));
        }
        if n.audio_dim != self.univdm.audio_bands {
            return Err(Error::Config("univdm audio_dim must equal audio_bands".into()));
        }
        if !n.width.is_multiple_of(8) || !n.width.is_multiple_of(n.heads) {
            return Err(Error::Config("univdm width must be a multiple of 8 and of heads".into()));
        }
        if self.guidance.n_steps == 0 || self.guidance.n_steps > n.train_steps {
            return Err(Error::Config("guidance n_steps must lie in 1..=T_train".into()));
        }
        if self.classifier.train.lengths.is_empty() || self.classifier.train.lengths.contains(&0) {
            return Err(Error::Config("classifier lengths must be non-empty and positive".into()));
        }
        if self.long_video.segments == 0 {
            return Err(Error::Config("long_video segments must be positive".into()));
        }
        Ok(())
    }

    pub fn classifier_config(&self, kind: ClassifierKind) -> ClassifierConfig {
        let c = &self.classifier;
        ClassifierConfig {
            kind,
            encoder: self.univdm.network,
            layers: c.layers,
            heads: c.heads,
            max_video_frames: c.max_video_frames,
            max_audio_frames: c.max_audio_frames,
            rope_base: c.rope_base,
            freeze_encoder: c.freeze_encoder,
        }
    }
}

//! Command-line front end.
//!
//! Every command works inside one work directory and writes its own run
//! directory there (config copy, log, artifacts, `report.json`):
//!
//! ```text
//! <work>/data                     gen-data (dataset root, configurable)
//! <work>/train                    codec.ckpt, latents.ckpt, univdm.ckpt
//! <work>/negatives                pairs.ckpt
//! <work>/classifier-<kind>        classifier.ckpt
//! <work>/generate/<mode>-s<seed>  latents.tensor, frames.tensor
//! <work>/long/s<seed>             latents.tensor
//! <work>/eval                     report.json
//! ```

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::Tensor;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::av_classifier::{evaluate_accuracy, make_negative_samples, train_classifier, AvClassifier, ClassifierKind};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceMode, RegionMasks, Sampler, SyncGuide};
use crate::io::config::RunConfig;
use crate::io::container::{Checkpoint, TensorContainer};
use crate::io::run_dir::RunDir;
use crate::io::synthetic::{read_manifest, write_dataset};
use crate::metrics::{self, BeatTrack, MetricReport, PoseAutoencoder, SegmentTiming};
use crate::pipeline::{
    classifier_checkpoint, clip_conditioning, generate, load_classifier, load_clips, load_pairs, load_univdm,
    mean_score, pairs_checkpoint, pairs_for_clips, univdm_checkpoint, LatentSet, Split, TrainedCodec,
};
use crate::univdm::train::train_univdm;
use crate::univdm::{Conditioning, UniVdm};

#[derive(Debug, Parser)]
#[command(name = "paha", version, about = "Parts-aware audio-driven avatar diffusion at desk scale")]
pub struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Work directory shared by all stages.
    #[arg(long, global = true, default_value = "work")]
    pub work: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic stick-figure dataset.
    GenData {
        #[arg(long)]
        clips: Option<usize>,
    },
    /// Fit the codec and train the denoiser with the re-weighted loss.
    Train,
    /// Sample one unguided video per clip as classifier negatives.
    MakeNegatives,
    /// Train one regional audio-visual classifier.
    TrainClassifier {
        #[arg(long)]
        kind: ClassifierKind,
    },
    /// Generate one video for a held-out clip.
    Generate(GenerateArgs),
    /// Chain first-frame-conditioned segments into a long video.
    StitchLong {
        #[command(flatten)]
        gen: GenerateArgs,
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Score generation runs against held-out real clips.
    Eval {
        /// Generation run directories.
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Earlier eval report to compare against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub mode: Option<GuidanceMode>,
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub lambda_face: Option<f64>,
    #[arg(long)]
    pub lambda_nonface: Option<f64>,
    #[arg(long)]
    pub lambda_diff: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip to take reference and audio from; defaults to a held-out clip
    /// chosen by seed.
    #[arg(long)]
    pub clip: Option<usize>,
    /// Output run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl GenerateArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        let g = &mut cfg.guidance;
        if let Some(m) = self.mode {
            g.mode = m;
        }
        if let Some(r) = self.rate {
            g.rate = r;
        }
        if let Some(v) = self.lambda_face {
            g.lambda_face = v;
        }
        if let Some(v) = self.lambda_nonface {
            g.lambda_nonface = v;
        }
        if let Some(v) = self.lambda_diff {
            g.lambda_diff = v;
        }
        if let Some(n) = self.steps {
            g.n_steps = n;
        }
        cfg.validate()
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the JSON report on success.
pub fn run<I, T>(args: I) -> Result<serde_json::Value>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            Error::InvalidArgument(e.to_string())
        }
        _ => Error::Config(e.to_string()),
    })?;
    execute(&cli)
}

pub fn execute(cli: &Cli) -> Result<serde_json::Value> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    let work = cli.work.as_path();
    match &cli.command {
        Command::GenData { clips } => {
            if let Some(n) = clips {
                cfg.data.synthetic.n_clips = *n;
            }
            cfg.validate()?;
            gen_data(work, &cfg)
        }
        Command::Train => train(work, &cfg),
        Command::MakeNegatives => negatives(work, &cfg),
        Command::TrainClassifier { kind } => classifier(work, &cfg, *kind),
        Command::Generate(args) => {
            args.apply(&mut cfg)?;
            generate_cmd(work, &cfg, args)
        }
        Command::StitchLong { gen, segments } => {
            gen.apply(&mut cfg)?;
            if let Some(s) = segments {
                cfg.long_video.segments = *s;
            }
            cfg.validate()?;
            stitch_long(work, &cfg, gen)
        }
        Command::Eval { runs, baseline } => eval(work, &cfg, runs, baseline.as_deref()),
    }
}

pub fn data_root(work: &Path, cfg: &RunConfig) -> PathBuf {
    if cfg.data.root.is_absolute() {
        cfg.data.root.clone()
    } else {
        work.join(&cfg.data.root)
    }
}

fn require(path: &Path, stage: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(format!("{} not found; run `{stage}` first", path.display())))
    }
}

fn train_dir(work: &Path) -> PathBuf {
    work.join("train")
}

fn classifier_dir(work: &Path, kind: ClassifierKind) -> PathBuf {
    work.join(format!("classifier-{kind}"))
}

fn load_latents(work: &Path) -> Result<LatentSet> {
    let p = train_dir(work).join("latents.ckpt");
    require(&p, "train")?;
    LatentSet::from_checkpoint(&Checkpoint::read(&p)?)
}

fn load_model(work: &Path) -> Result<UniVdm> {
    let p = train_dir(work).join("univdm.ckpt");
    require(&p, "train")?;
    load_univdm(&Checkpoint::read(&p)?)
}

fn load_codec(work: &Path) -> Result<TrainedCodec> {
    let p = train_dir(work).join("codec.ckpt");
    require(&p, "train")?;
    TrainedCodec::from_checkpoint(&Checkpoint::read(&p)?)
}

fn try_load_classifier(work: &Path, kind: ClassifierKind) -> Result<Option<AvClassifier>> {
    let p = classifier_dir(work, kind).join("classifier.ckpt");
    if !p.exists() {
        return Ok(None);
    }
    load_classifier(&Checkpoint::read(&p)?, kind).map(Some)
}

fn mean_tail(v: &[f64], k: usize) -> f64 {
    let k = k.clamp(1, v.len().max(1));
    v[v.len() - k..].iter().sum::<f64>() / k as f64
}

fn mean_head(v: &[f64], k: usize) -> f64 {
    let k = k.clamp(1, v.len().max(1));
    v[..k].iter().sum::<f64>() / k as f64
}

fn gen_data(work: &Path, cfg: &RunConfig) -> Result<serde_json::Value> {
    let root = data_root(work, cfg);
    let mut run = RunDir::open(&root, cfg)?;
    let start = Instant::now();
    let manifest = write_dataset(&root, &cfg.data.synthetic)?;
    run.log(&format!("wrote {} clips to {}", manifest.clips.len(), root.display()));
    run.write_report(&serde_json::json!({
        "command": "gen-data",
        "clips": manifest.clips.len(),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

#[derive(Serialize)]
struct TrainReport {
    command: &'static str,
    clips: usize,
    train_clips: usize,
    codec_loss_first: f64,
    codec_loss_last: f64,
    loss_first: f64,
    loss_last: f64,
    loss_drop: f64,
    losses: Vec<f64>,
    seconds: f64,
}

fn train(work: &Path, cfg: &RunConfig) -> Result<serde_json::Value> {
    let root = data_root(work, cfg);
    require(&root.join("manifest.json"), "gen-data")?;
    let mut run = RunDir::open(&train_dir(work), cfg)?;
    let start = Instant::now();
    let clips = load_clips(&root, cfg)?;
    let (codec, closs) = TrainedCodec::fit(cfg, &clips.frames)?;
    run.log(&format!("codec loss {:.5} -> {:.5}", closs[0], closs[closs.len() - 1]));
    codec.checkpoint(&run.config_digest)?.write(&run.file("codec.ckpt"))?;

    let n = clips.frames.dim(0)?;
    let latents = LatentSet {
        latents: codec.encode_clips(&clips.frames)?,
        audio: clips.audio,
        par: clips.par,
        face: clips.face,
        split: Split::new(n, cfg.data.holdout_fraction, cfg.seed),
    };
    latents.checkpoint(&run.config_digest)?.write(&run.file("latents.ckpt"))?;

    let model = UniVdm::new(cfg.univdm.network, cfg.univdm.schedule, cfg.seed)?;
    let losses = train_univdm(&model, &latents.train_dataset()?, &cfg.univdm.train, cfg.seed)?;
    let window = (losses.len() / 10).max(1);
    let (first, last) = (mean_head(&losses, window), mean_tail(&losses, window));
    run.log(&format!("denoiser loss {first:.4} -> {last:.4}"));
    univdm_checkpoint(&model, cfg.univdm.schedule, &run.config_digest)?.write(&run.file("univdm.ckpt"))?;
    run.write_report(&TrainReport {
        command: "train",
        clips: n,
        train_clips: latents.split.train.len(),
        codec_loss_first: closs[0],
        codec_loss_last: closs[closs.len() - 1],
        loss_first: first,
        loss_last: last,
        loss_drop: 1.0 - last / first,
        losses,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn negatives(work: &Path, cfg: &RunConfig) -> Result<serde_json::Value> {
    let model = load_model(work)?;
    let latents = load_latents(work)?;
    let mut run = RunDir::open(&work.join("negatives"), cfg)?;
    let start = Instant::now();
    let pairs = make_negative_samples(
        &model,
        &latents.latents,
        &latents.audio,
        &latents.face,
        cfg.guidance.n_steps,
        cfg.negatives.batch,
        cfg.seed,
    )?;
    run.log(&format!("{} pairs", pairs.len()));
    pairs_checkpoint(&pairs, &latents.split, &run.config_digest)?.write(&run.file("pairs.ckpt"))?;
    run.write_report(&serde_json::json!({
        "command": "make-negatives",
        "pairs": pairs.len(),
        "n_steps": cfg.guidance.n_steps,
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn classifier(work: &Path, cfg: &RunConfig, kind: ClassifierKind) -> Result<serde_json::Value> {
    let pairs_path = work.join("negatives").join("pairs.ckpt");
    require(&pairs_path, "make-negatives")?;
    let model = load_model(work)?;
    let (pairs, split) = load_pairs(&Checkpoint::read(&pairs_path)?)?;
    let mut run = RunDir::open(&classifier_dir(work, kind), cfg)?;
    let start = Instant::now();
    let train = pairs_for_clips(&pairs, &split.train)?;
    let holdout = pairs_for_clips(&pairs, &split.holdout)?;
    let clf = AvClassifier::from_univdm(cfg.classifier_config(kind), &model, cfg.seed)?;
    let losses = train_classifier(&clf, &train, &model.schedule, &cfg.classifier.train, cfg.seed)?;
    let acc = if holdout.is_empty() {
        f64::NAN
    } else {
        evaluate_accuracy(&clf, &holdout, cfg.classifier.eval_timestep, 64)?
    };
    run.log(&format!("{kind} classifier held-out accuracy {acc:.4}"));
    classifier_checkpoint(&clf, &run.config_digest)?.write(&run.file("classifier.ckpt"))?;
    run.write_report(&serde_json::json!({
        "command": "train-classifier",
        "kind": kind,
        "architecture_digest": clf.config.architecture_digest(),
        "holdout_pairs": holdout.len(),
        "holdout_accuracy": acc,
        "eval_timestep": cfg.classifier.eval_timestep,
        "loss_first": mean_head(&losses, 20),
        "loss_last": mean_tail(&losses, 20),
        "seconds": start.elapsed().as_secs_f64(),
    }))
}

fn pick_clip(latents: &LatentSet, args: &GenerateArgs) -> Result<usize> {
    let n = latents.latents.dim(0)?;
    let clip = match args.clip {
        Some(c) => c,
        None if !latents.split.holdout.is_empty() => latents.split.holdout[args.seed as usize % latents.split.holdout.len()],
        None => args.seed as usize % n,
    };
    if clip >= n {
        return Err(Error::InvalidArgument(format!("clip {clip} outside 0..{n}")));
    }
    Ok(clip)
}

struct Guides {
    face: Option<AvClassifier>,
    nonface: Option<AvClassifier>,
}

impl Guides {
    fn load(work: &Path) -> Result<Self> {
        Ok(Guides {
            face: try_load_classifier(work, ClassifierKind::Face)?,
            nonface: try_load_classifier(work, ClassifierKind::NonFace)?,
        })
    }

    fn face(&self) -> Option<&dyn SyncGuide> {
        self.face.as_ref().map(|c| c as &dyn SyncGuide)
    }

    fn nonface(&self) -> Option<&dyn SyncGuide> {
        self.nonface.as_ref().map(|c| c as &dyn SyncGuide)
    }

    fn scores(&self, z: &Tensor, audio: &Tensor, face: &Tensor) -> Result<(Option<f64>, Option<f64>)> {
        let s = |c: &Option<AvClassifier>| c.as_ref().map(|c| mean_score(c, z, audio, face)).transpose();
        Ok((s(&self.face)?, s(&self.nonface)?))
    }
}

#[derive(Serialize)]
struct GenerateReport {
    command: &'static str,
    mode: GuidanceMode,
    rate: f64,
    seed: u64,
    clip: usize,
    n_steps: usize,
    guided_steps: usize,
    solver_calls: usize,
    gradient_calls: usize,
    guided_solver_calls: Vec<usize>,
    guided_gradient_calls: Vec<usize>,
    timing: SegmentTiming,
    face_score: Option<f64>,
    nonface_score: Option<f64>,
}

fn generate_cmd(work: &Path, cfg: &RunConfig, args: &GenerateArgs) -> Result<serde_json::Value> {
    let model = load_model(work)?;
    let latents = load_latents(work)?;
    let codec = load_codec(work)?;
    let guides = Guides::load(work)?;
    let clip = pick_clip(&latents, args)?;
    let g = &cfg.guidance;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| work.join("generate").join(format!("{}-s{}", g.mode, args.seed)));
    let mut run = RunDir::open(&out, cfg)?;
    let (cond, masks) = clip_conditioning(&latents, clip)?;
    let start = Instant::now();
    let (z, stats) = generate(&model, guides.face(), guides.nonface(), g, &cond, &masks, args.seed)?;
    let sampling = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let frames = codec.decode_clips(&z)?;
    let decoding = start.elapsed().as_secs_f64();
    TensorContainer::from_tensor(&z)?.write(&run.file("latents.tensor"))?;
    TensorContainer::from_tensor(&frames)?.write(&run.file("frames.tensor"))?;
    let (face_score, nonface_score) = guides.scores(&z, &cond.audio, &masks.face)?;
    run.log(&format!("{} sample for clip {clip}: {sampling:.3}s", g.mode));
    run.write_report(&GenerateReport {
        command: "generate",
        mode: g.mode,
        rate: g.rate,
        seed: args.seed,
        clip,
        n_steps: g.n_steps,
        guided_steps: stats.guided_steps,
        solver_calls: stats.solver_calls,
        gradient_calls: stats.gradient_calls,
        guided_solver_calls: stats.guided_solver_calls,
        guided_gradient_calls: stats.guided_gradient_calls,
        timing: SegmentTiming {
            sampling_seconds: sampling,
            decoding_seconds: decoding,
        },
        face_score,
        nonface_score,
    })
}

fn stitch_long(work: &Path, cfg: &RunConfig, args: &GenerateArgs) -> Result<serde_json::Value> {
    let model = load_model(work)?;
    let latents = load_latents(work)?;
    let guides = Guides::load(work)?;
    let frames = latents.latents.dim(1)?;
    let k = cfg.long_video.segments;
    let total = k * (frames - 1) + 1;
    // audio and face maps for the long clip: consecutive clips, each
    // contributing its frames after the first
    let n = latents.latents.dim(0)?;
    let first = pick_clip(&latents, args)?;
    let mut audio = vec![latents.audio.get(first)?];
    let mut face = vec![latents.face.get(first)?];
    for s in 1..k {
        let c = (first + s) % n;
        audio.push(latents.audio.get(c)?.narrow(0, 1, frames - 1)?);
        face.push(latents.face.get(c)?.narrow(0, 1, frames - 1)?);
    }
    let cond = Conditioning {
        reference: latents.latents.get(first)?.get(0)?.unsqueeze(0)?,
        audio: Tensor::cat(&audio, 0)?.unsqueeze(0)?,
        first_frame: None,
    };
    let masks = RegionMasks::from_face(&Tensor::cat(&face, 0)?.unsqueeze(0)?)?;
    let out = args.out.clone().unwrap_or_else(|| work.join("long").join(format!("s{}", args.seed)));
    let mut run = RunDir::open(&out, cfg)?;
    let sched = model.inference_schedule(cfg.guidance.n_steps)?;
    let sampler = Sampler::new(&model, &sched, guides.face(), guides.nonface(), &cfg.guidance)?;
    let start = Instant::now();
    let long = sampler.generate_long(&cond, &masks, frames, args.seed)?;
    let seconds = start.elapsed().as_secs_f64();
    let boundaries_match = long.segments.windows(2).all(|w| {
        let a = w[0].narrow(1, w[0].dim(1).unwrap_or(1) - 1, 1);
        let b = w[1].narrow(1, 0, 1);
        match (a, b) {
            (Ok(a), Ok(b)) => crate::nn::to_vec(&a).ok() == crate::nn::to_vec(&b).ok(),
            _ => false,
        }
    });
    TensorContainer::from_tensor(&long.latents)?.write(&run.file("latents.tensor"))?;
    run.log(&format!("{} segments, {} frames", long.segments.len(), long.latents.dim(1)?));
    run.write_report(&serde_json::json!({
        "command": "stitch-long",
        "segments": long.segments.len(),
        "lengths": long.lengths,
        "frames": long.latents.dim(1)?,
        "expected_frames": total,
        "boundaries_match": boundaries_match,
        "seconds": seconds,
    }))
}

/// Gesture-feature rows: one flattened latent frame per row.
fn frame_rows(z: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, f, c, h, w) = z.dims5()?;
    Ok(z.reshape((b * f, c * h * w))?.to_vec2::<f64>()?)
}

/// Motion points of each frame: consecutive latent values paired as
/// `(x, y)` coordinates.
fn motion_points(z: &Tensor) -> Result<Vec<Vec<(f64, f64)>>> {
    Ok(frame_rows(&z.get(0)?.unsqueeze(0)?)?
        .into_iter()
        .map(|r| r.chunks_exact(2).map(|p| (p[0], p[1])).collect())
        .collect())
}

#[derive(Serialize, serde::Deserialize)]
struct EvalReport {
    command: String,
    runs: Vec<String>,
    metrics: Vec<MetricReport>,
    time_cost: metrics::TimeCost,
}

fn eval(work: &Path, cfg: &RunConfig, runs: &[PathBuf], baseline: Option<&Path>) -> Result<serde_json::Value> {
    let latents = load_latents(work)?;
    let root = data_root(work, cfg);
    let manifest = read_manifest(&root)?;
    let mut gen = Vec::new();
    let mut timings = Vec::new();
    let mut beats = Vec::new();
    for r in runs {
        let lp = r.join("latents.tensor");
        require(&lp, "generate")?;
        let z = TensorContainer::read(&lp)?.to_tensor()?;
        let report: serde_json::Value = serde_json::from_slice(&crate::io::container::read_file(&r.join("report.json"))?)?;
        let timing: SegmentTiming = serde_json::from_value(report["timing"].clone())?;
        let clip = report["clip"]
            .as_u64()
            .ok_or_else(|| Error::InvalidArgument(format!("{} report lacks `clip`", r.display())))? as usize;
        let audio = crate::io::wav::read_wav(&root.join(&manifest.clips[clip]).join("audio.wav"))?;
        beats.push(BeatTrack {
            audio_beats: metrics::audio_beats(&audio.samples, audio.sample_rate),
            motion_beats: metrics::motion_beats(&motion_points(&z)?, manifest.spec.fps),
        });
        gen.extend(frame_rows(&z)?);
        timings.push(timing);
    }
    let real_clips = if latents.split.holdout.is_empty() {
        &latents.split.train
    } else {
        &latents.split.holdout
    };
    let real = frame_rows(&crate::pipeline::select(&latents.latents, real_clips)?)?;
    let mut run = RunDir::open(&work.join("eval"), cfg)?;
    let m = &cfg.metrics;
    let ae = PoseAutoencoder::new(real[0].len(), m.feature_dim, cfg.seed)?;
    ae.fit(&real, m.feature_steps, m.feature_lr, cfg.seed)?;
    let hash = ae.checkpoint_hash()?;
    let real_f = ae.features(&real)?;
    let gen_f = ae.features(&gen)?;
    let mk = |metric: &str, value: f64, n: usize| MetricReport {
        metric: metric.into(),
        value,
        n_samples: n,
        feature_ckpt_hash: hash.clone(),
        config_digest: run.config_digest.clone(),
    };
    let bas_values: Vec<f64> = beats.iter().filter_map(|b| metrics::bas(b, m.sigma_b).ok()).collect();
    let mut reports = vec![
        mk("fgd", metrics::fgd(&real_f, &gen_f, m.fgd_shrinkage)?, gen_f.len()),
        mk("diversity", metrics::diversity(&gen_f, m.diversity_pairs, cfg.seed)?, gen_f.len()),
    ];
    if !bas_values.is_empty() {
        reports.push(mk("bas", bas_values.iter().sum::<f64>() / bas_values.len() as f64, bas_values.len()));
    }
    if let Some(path) = baseline {
        let base: EvalReport = serde_json::from_slice(&crate::io::container::read_file(path)?)?;
        for r in &reports {
            if let Some(b) = base.metrics.iter().find(|b| b.metric == r.metric) {
                metrics::check_comparable(r, b)?;
            }
        }
    }
    let tc = metrics::time_cost(&timings)?;
    run.log(&format!("evaluated {} runs", runs.len()));
    run.write_report(&EvalReport {
        command: "eval".into(),
        runs: runs.iter().map(|r| r.display().to_string()).collect(),
        metrics: reports,
        time_cost: tc,
    })
}

//! Procedural audio-driven stick figures.
//!
//! Each clip has a tone whose per-frame amplitude follows a random
//! envelope. The arm angle moves by exactly `k * e_f` at frame `f`, where
//! `e_f` is the mean squared sample value of that frame's audio, and the
//! mouth opens in proportion to the frame's RMS amplitude. Samples are
//! quantized to PCM-16 before energies are measured, so the coupling
//! survives a WAV round trip.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::av_classifier::FaceBox;
use crate::error::{Error, Result};
use crate::io::container::{read_file, write_file, DType, TensorContainer};
use crate::io::jsonl::{read_face_boxes, read_poses, write_jsonl};
use crate::io::wav::{quantize, read_wav, write_wav, Audio};
use crate::nn::labeled_rng;
use crate::par_mask::{Keypoint, PoseFrame, PoseSequence, Region};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub sample_rate: u32,
    /// Radians of arm rotation per unit of frame energy.
    pub k: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_clips: 500,
            frames: 8,
            height: 32,
            width: 32,
            fps: 25.0,
            sample_rate: 16000,
            k: 2.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_clips == 0 || self.frames == 0 {
            return Err(Error::Config("synthetic dataset needs at least one clip and one frame".into()));
        }
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config("synthetic frames must be at least 16x16".into()));
        }
        if !(self.fps > 0.0) || self.sample_rate == 0 || !(self.k > 0.0) {
            return Err(Error::Config("fps, sample_rate and k must be positive".into()));
        }
        // a step of at most half the range always has a direction that stays inside
        let limit = (ARM_MAX - ARM_MIN) / (2.0 * MAX_ENERGY);
        if self.k > limit {
            return Err(Error::Config(format!("k must be at most {limit}")));
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        (self.sample_rate as f64 / self.fps).round() as usize
    }
}

const ARM_MIN: f64 = -0.45 * PI;
const ARM_MAX: f64 = 0.45 * PI;
/// Upper bound on frame energy: tones peak below 0.95.
const MAX_ENERGY: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticClip {
    /// `[F, 3, H, W]`, row-major, values in `[0, 1]`.
    pub frames: Vec<f64>,
    pub pose: PoseSequence,
    pub audio: Audio,
    pub faces: Vec<FaceBox>,
    /// Mean squared sample value of each frame.
    pub energy: Vec<f64>,
    /// Arm elevation per frame, radians.
    pub arm_angle: Vec<f64>,
}

impl SyntheticClip {
    pub fn frame_count(&self) -> usize {
        self.energy.len()
    }

    /// `|angle_f - angle_{f-1}|` for `f >= 1`.
    pub fn angular_speed(&self) -> Vec<f64> {
        self.arm_angle.windows(2).map(|w| (w[1] - w[0]).abs()).collect()
    }
}

/// Mean squared value of each frame's samples.
pub fn frame_energy(samples: &[f64], samples_per_frame: usize, frames: usize) -> Vec<f64> {
    (0..frames)
        .map(|f| {
            let s = &samples[f * samples_per_frame..((f + 1) * samples_per_frame).min(samples.len())];
            s.iter().map(|v| v * v).sum::<f64>() / s.len().max(1) as f64
        })
        .collect()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

fn synth_audio(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let spf = spec.samples_per_frame();
    let freq = rng.random_range(150.0..600.0);
    let mut samples = Vec::with_capacity(spf * spec.frames);
    for _ in 0..spec.frames {
        // silence, a soft syllable or a loud one
        let amp: f64 = match rng.random_range(0..3) {
            0 => rng.random_range(0.0..0.1),
            1 => rng.random_range(0.2..0.5),
            _ => rng.random_range(0.6..0.95),
        };
        for _ in 0..spf {
            let i = samples.len() as f64;
            let x = amp * (2.0 * PI * freq * i / spec.sample_rate as f64).sin();
            samples.push(quantize(x) as f64 / 32768.0);
        }
    }
    samples
}

/// Reflecting walk: each frame moves by exactly `step`, reversing
/// direction when the next position would leave `[ARM_MIN, ARM_MAX]`.
fn arm_walk(start: f64, steps: &[f64], dir0: f64) -> Vec<f64> {
    let mut angle = vec![start];
    let mut dir = dir0;
    for &s in &steps[1..] {
        let cur = *angle.last().unwrap();
        if !(ARM_MIN..=ARM_MAX).contains(&(cur + dir * s)) {
            dir = -dir;
        }
        angle.push(cur + dir * s);
    }
    angle
}

struct Painter<'a> {
    img: &'a mut [f64],
    w: usize,
    h: usize,
}

impl Painter<'_> {
    fn blend(&mut self, x: usize, y: usize, a: f64, color: [f64; 3]) {
        for (c, col) in color.iter().enumerate() {
            let p = &mut self.img[(c * self.h + y) * self.w + x];
            *p = *p * (1.0 - a) + col * a;
        }
    }

    /// Anti-aliased thick segment.
    fn segment(&mut self, p: (f64, f64), q: (f64, f64), thickness: f64, color: [f64; 3]) {
        let (dx, dy) = (q.0 - p.0, q.1 - p.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for y in 0..self.h {
            for x in 0..self.w {
                let (px, py) = (x as f64 - p.0, y as f64 - p.1);
                let u = ((px * dx + py * dy) / len2).clamp(0.0, 1.0);
                let d = ((px - u * dx).powi(2) + (py - u * dy).powi(2)).sqrt();
                let a = (thickness / 2.0 + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    self.blend(x, y, a, color);
                }
            }
        }
    }

    fn disc(&mut self, c: (f64, f64), r: f64, color: [f64; 3]) {
        for y in 0..self.h {
            for x in 0..self.w {
                let d = ((x as f64 - c.0).powi(2) + (y as f64 - c.1).powi(2)).sqrt();
                let a = (r + 0.5 - d).clamp(0.0, 1.0);
                if a > 0.0 {
                    self.blend(x, y, a, color);
                }
            }
        }
    }
}

/// Generates clip `index` of the dataset described by `spec`.
pub fn generate_clip(spec: &SyntheticSpec, index: usize) -> Result<SyntheticClip> {
    spec.validate()?;
    let mut rng = labeled_rng(spec.seed, &format!("synthetic-clip-{index}"));
    let (w, h, nf) = (spec.width, spec.height, spec.frames);
    let samples = synth_audio(spec, &mut rng);
    let energy = frame_energy(&samples, spec.samples_per_frame(), nf);
    let steps: Vec<f64> = energy.iter().map(|e| spec.k * e).collect();
    let start = rng.random_range(ARM_MIN..ARM_MAX);
    let dir = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let arm_angle = arm_walk(start, &steps, dir);

    let s = w.min(h) as f64 / 32.0;
    let cx = w as f64 / 2.0 + rng.random_range(-2.0..2.0) * s;
    let bg = [rng.random_range(0.1..0.3), rng.random_range(0.1..0.3), rng.random_range(0.2..0.4)];
    let shirt = [rng.random_range(0.5..1.0), rng.random_range(0.2..0.8), rng.random_range(0.1..0.5)];
    let skin = [0.95, 0.8, 0.65];
    let head_r = 4.0 * s;
    let head = (cx, 7.0 * s);
    let neck = (cx, head.1 + head_r + 0.5 * s);
    let hip = (cx, 21.0 * s);
    let upper = 5.0 * s;
    let fore = 4.5 * s;

    let mut frames = vec![0.0; nf * 3 * h * w];
    let mut poses = Vec::with_capacity(nf);
    let mut faces = Vec::with_capacity(nf);
    for f in 0..nf {
        let img = &mut frames[f * 3 * h * w..(f + 1) * 3 * h * w];
        for c in 0..3 {
            img[c * h * w..(c + 1) * h * w].iter_mut().for_each(|p| *p = bg[c]);
        }
        let mut paint = Painter { img, w, h };
        let theta = arm_angle[f];
        let mut kps = Vec::new();
        let conf = |rng: &mut ChaCha8Rng| rng.random_range(0.5..=1.0);

        paint.segment(neck, hip, 2.5 * s, shirt);
        paint.segment(hip, (cx - 4.0 * s, 30.0 * s), 2.0 * s, shirt);
        paint.segment(hip, (cx + 4.0 * s, 30.0 * s), 2.0 * s, shirt);
        let shoulder_y = neck.1 + 1.5 * s;
        let mut arm_keypoints = Vec::new();
        for side in [-1.0, 1.0] {
            let shoulder = (cx + side * 2.0 * s, shoulder_y);
            // elevation above horizontal, mirrored left to right
            let elbow = (shoulder.0 + side * upper * theta.cos(), shoulder.1 - upper * theta.sin());
            let phi = theta + 0.6;
            let wrist = (elbow.0 + side * fore * phi.cos(), elbow.1 - fore * phi.sin());
            let tip = (wrist.0 + side * 1.5 * s * phi.cos(), wrist.1 - 1.5 * s * phi.sin());
            paint.segment(shoulder, elbow, 2.0 * s, shirt);
            paint.segment(elbow, wrist, 2.0 * s, shirt);
            paint.disc(wrist, 1.2 * s, skin);
            arm_keypoints.push((shoulder, elbow, wrist, tip));
        }
        paint.disc(head, head_r, skin);
        let eye_y = head.1 - 1.0 * s;
        paint.disc((cx - 1.5 * s, eye_y), 0.4 * s, [0.1, 0.1, 0.1]);
        paint.disc((cx + 1.5 * s, eye_y), 0.4 * s, [0.1, 0.1, 0.1]);
        let mouth_y = head.1 + 2.0 * s;
        let open = 2.5 * s * energy[f].sqrt();
        paint.segment((cx - 1.5 * s, mouth_y), (cx + 1.5 * s, mouth_y), 0.6 * s + open, [0.5, 0.05, 0.1]);

        for p in [(cx - 1.5 * s, eye_y), (cx + 1.5 * s, eye_y), (cx, head.1 + 0.5 * s), (cx, mouth_y)] {
            kps.push(Keypoint::new(p.0, p.1, conf(&mut rng), Region::Face)?);
        }
        kps.push(Keypoint::new(neck.0, neck.1, conf(&mut rng), Region::Body)?);
        kps.push(Keypoint::new(hip.0, hip.1, conf(&mut rng), Region::Body)?);
        for (shoulder, elbow, _, _) in &arm_keypoints {
            kps.push(Keypoint::new(shoulder.0, shoulder.1, conf(&mut rng), Region::Body)?);
            kps.push(Keypoint::new(elbow.0, elbow.1, conf(&mut rng), Region::Body)?);
        }
        kps.push(Keypoint::new(cx, 30.0 * s, conf(&mut rng), Region::Body)?);
        for (_, _, wrist, tip) in &arm_keypoints {
            kps.push(Keypoint::new(wrist.0, wrist.1, conf(&mut rng), Region::Hand)?);
            kps.push(Keypoint::new(tip.0, tip.1, conf(&mut rng), Region::Hand)?);
        }
        poses.push(PoseFrame {
            frame_index: f,
            keypoints: kps,
        });
        faces.push(FaceBox {
            frame_index: f,
            x0: head.0 - head_r,
            y0: head.1 - head_r,
            x1: head.0 + head_r,
            y1: head.1 + head_r,
        });
    }
    // stored as f32 on disk; keep the in-memory copy identical
    frames.iter_mut().for_each(|p| *p = (p.clamp(0.0, 1.0) as f32) as f64);
    Ok(SyntheticClip {
        frames,
        pose: PoseSequence::new(poses, w, h, spec.fps)?,
        audio: Audio {
            sample_rate: spec.sample_rate,
            samples,
        },
        faces,
        energy,
        arm_angle,
    })
}

/// A permutation without fixed points, so every clip gets foreign audio.
pub fn derangement(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n < 2 {
        return (0..n).collect();
    }
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    // rotate by one along the shuffled order: p[i] -> p[i+1]
    let mut out = vec![0; n];
    for i in 0..n {
        out[p[i]] = p[(i + 1) % n];
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    /// Directory name of each clip, relative to the dataset root.
    pub clips: Vec<String>,
    /// `misaligned[i]` is the clip whose audio pairs with video `i` in the
    /// misaligned variant.
    pub misaligned: Vec<usize>,
}

pub fn clip_dir(i: usize) -> String {
    format!("clips/{i:05}")
}

/// Writes every clip plus `manifest.json` under `root`.
pub fn write_dataset(root: &Path, spec: &SyntheticSpec) -> Result<Manifest> {
    spec.validate()?;
    let mut rng = labeled_rng(spec.seed, "synthetic-misaligned");
    let manifest = Manifest {
        spec: *spec,
        clips: (0..spec.n_clips).map(clip_dir).collect(),
        misaligned: derangement(spec.n_clips, &mut rng),
    };
    for (i, rel) in manifest.clips.iter().enumerate() {
        let clip = generate_clip(spec, i)?;
        let dir = root.join(rel);
        let frames = TensorContainer::new(DType::F32, vec![spec.frames, 3, spec.height, spec.width], clip.frames)?;
        frames.write(&dir.join("frames.tensor"))?;
        write_wav(&dir.join("audio.wav"), &clip.audio)?;
        write_jsonl(&dir.join("pose.jsonl"), &clip.pose.frames)?;
        write_jsonl(&dir.join("faces.jsonl"), &clip.faces)?;
    }
    write_file(&root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    Ok(serde_json::from_slice(&read_file(&root.join("manifest.json"))?)?)
}

/// One clip as read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedClip {
    pub frames: TensorContainer,
    pub audio: Audio,
    pub pose: PoseSequence,
    pub faces: Vec<FaceBox>,
}

pub fn read_clip(root: &Path, manifest: &Manifest, i: usize) -> Result<LoadedClip> {
    let dir = root.join(&manifest.clips[i]);
    let s = &manifest.spec;
    let frames = TensorContainer::read(&dir.join("frames.tensor"))?;
    if frames.shape != [s.frames, 3, s.height, s.width] {
        return Err(Error::Shape(format!("clip {i} frames have shape {:?}", frames.shape)));
    }
    Ok(LoadedClip {
        frames,
        audio: read_wav(&dir.join("audio.wav"))?,
        pose: PoseSequence::new(read_poses(&dir.join("pose.jsonl"))?, s.width, s.height, s.fps)?,
        faces: read_face_boxes(&dir.join("faces.jsonl"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_clips: 6,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn speed_tracks_energy_exactly() {
        let spec = small();
        for i in 0..6 {
            let clip = generate_clip(&spec, i).unwrap();
            for (f, v) in clip.angular_speed().iter().enumerate() {
                assert!((v - spec.k * clip.energy[f + 1]).abs() < 1e-12);
            }
            assert!(clip.arm_angle.iter().all(|a| (ARM_MIN..=ARM_MAX).contains(a)));
            let sp = clip.angular_speed();
            let r = pearson(&clip.energy[1..], &sp);
            assert!((r - 1.0).abs() < 1e-9, "r = {r}");
            for kp in clip.pose.frames.iter().flat_map(|f| &f.keypoints) {
                assert!((0.5..=1.0).contains(&kp.confidence));
            }
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut rng = labeled_rng(1, "d");
        for n in 2..30 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn disk_round_trip_preserves_coupling() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small();
        let m = write_dataset(dir.path(), &spec).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        let clip = generate_clip(&spec, 2).unwrap();
        let loaded = read_clip(dir.path(), &m, 2).unwrap();
        assert_eq!(loaded.frames.data, clip.frames);
        assert_eq!(loaded.audio, clip.audio);
        assert_eq!(loaded.faces, clip.faces);
        let e = frame_energy(&loaded.audio.samples, spec.samples_per_frame(), spec.frames);
        assert_eq!(e, clip.energy);
    }
}

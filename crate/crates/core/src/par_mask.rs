//! Parts-aware loss re-weighting masks.
//!
//! Pose keypoints above a confidence threshold define *awareness areas*:
//! filled circles around hand and face keypoints, and the bounding
//! rectangle of the body keypoints. The re-weighting mask amplifies the
//! diffusion loss inside those areas.
//!
//! Pixel `(x, y)` is the unit cell whose center sits at integer coordinates
//! `(x, y)`, so a keypoint at `(50.0, 50.0)` is centered on pixel `(50, 50)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Hand,
    Face,
    Body,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    pub region: Region,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, confidence: f64, region: Region) -> Result<Self> {
        let kp = Keypoint {
            x,
            y,
            confidence,
            region,
        };
        kp.validate()?;
        Ok(kp)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidArgument(format!(
                "keypoint confidence {} outside [0, 1]",
                self.confidence
            )));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::InvalidArgument(
                "keypoint coordinates must be finite".into(),
            ));
        }
        Ok(())
    }

    fn clamped(&self, width: usize, height: usize) -> (f64, f64) {
        (
            self.x.clamp(0.0, (width - 1) as f64),
            self.y.clamp(0.0, (height - 1) as f64),
        )
    }
}

/// One line of a pose JSON-lines file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseFrame {
    pub frame_index: usize,
    pub keypoints: Vec<Keypoint>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<PoseFrame>,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
}

impl PoseSequence {
    pub fn new(frames: Vec<PoseFrame>, width: usize, height: usize, fps: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("pose frame size must be non-zero".into()));
        }
        for frame in &frames {
            for kp in &frame.keypoints {
                kp.validate()?;
            }
        }
        Ok(PoseSequence {
            frames,
            width,
            height,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Dense boolean map, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BoolMap {
    pub fn empty(width: usize, height: usize) -> Self {
        BoolMap {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    fn set(&mut self, x: usize, y: usize) {
        self.data[y * self.width + x] = true;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// True when every pixel set in `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BoolMap) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AwarenessArea {
    pub hand_face: BoolMap,
    pub body: BoolMap,
}

/// Dense real-valued map, row-major `[height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl WeightMap {
    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        WeightMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Per-frame loss weights, row-major `[frames, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReweightMask {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub weights: Vec<f64>,
}

impl ReweightMask {
    pub fn ones(frames: usize, width: usize, height: usize) -> Self {
        ReweightMask {
            frames,
            width,
            height,
            weights: vec![1.0; frames * width * height],
        }
    }

    pub fn from_frames(frames: Vec<WeightMap>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidArgument("mask needs at least one frame".into()))?;
        let (width, height) = (first.width, first.height);
        if frames.iter().any(|f| f.width != width || f.height != height) {
            return Err(Error::Shape("mask frames differ in size".into()));
        }
        let n = frames.len();
        let weights = frames.into_iter().flat_map(|f| f.data).collect();
        Ok(ReweightMask {
            frames: n,
            width,
            height,
            weights,
        })
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        let plane = self.width * self.height;
        &self.weights[f * plane..(f + 1) * plane]
    }

    pub fn mean(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Thresholds and weights of the re-weighting scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParParams {
    pub tau: f64,
    #[serde(rename = "r")]
    pub radius: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub blur_sigma: f64,
}

impl Default for ParParams {
    fn default() -> Self {
        ParParams {
            tau: 0.8,
            radius: 10.0,
            omega1: 10.0,
            omega2: 2.0,
            blur_sigma: 1.5,
        }
    }
}

impl ParParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidArgument(format!("tau {} outside [0, 1]", self.tau)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidArgument("radius must be positive".into()));
        }
        if !(self.blur_sigma > 0.0) {
            return Err(Error::InvalidArgument("blur_sigma must be positive".into()));
        }
        if !(self.omega1 >= self.omega2 && self.omega2 >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "weights must satisfy omega1 >= omega2 >= 1 (got {}, {})",
                self.omega1, self.omega2
            )));
        }
        Ok(())
    }
}

/// Keypoints whose confidence is strictly above `tau`.
pub fn filter_reliable(frame: &[Keypoint], tau: f64) -> Vec<Keypoint> {
    frame.iter().filter(|kp| kp.confidence > tau).copied().collect()
}

/// Integer pixel range `[lo, hi]` covered by `center ± radius`, clipped to the frame.
fn span(center: f64, radius: f64, len: usize) -> (usize, usize) {
    let lo = (center - radius).ceil().max(0.0) as usize;
    let hi = ((center + radius).floor() as isize).clamp(0, len as isize - 1) as usize;
    (lo, hi)
}

fn paint_circle(width: usize, height: usize, cx: f64, cy: f64, r: f64, mut f: impl FnMut(usize, usize)) {
    let (x0, x1) = span(cx, r, width);
    let (y0, y1) = span(cy, r, height);
    let r2 = r * r;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r2 {
                f(x, y);
            }
        }
    }
}

pub fn build_awareness_area(
    frame: &[Keypoint],
    tau: f64,
    radius: f64,
    width: usize,
    height: usize,
) -> Result<AwarenessArea> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument("radius must be positive".into()));
    }
    let reliable = filter_reliable(frame, tau);
    let mut hand_face = BoolMap::empty(width, height);
    let mut body = BoolMap::empty(width, height);

    let mut bounds: Option<(f64, f64, f64, f64)> = None;
    for kp in &reliable {
        let (x, y) = kp.clamped(width, height);
        match kp.region {
            Region::Hand | Region::Face => {
                paint_circle(width, height, x, y, radius, |px, py| hand_face.set(px, py));
            }
            Region::Body => {
                bounds = Some(match bounds {
                    None => (x, x, y, y),
                    Some((x0, x1, y0, y1)) => (x0.min(x), x1.max(x), y0.min(y), y1.max(y)),
                });
            }
        }
    }
    if let Some((x0, x1, y0, y1)) = bounds {
        for y in (y0.ceil() as usize)..=(y1.floor() as usize) {
            for x in (x0.ceil() as usize)..=(x1.floor() as usize) {
                body.set(x, y);
            }
        }
    }
    Ok(AwarenessArea { hand_face, body })
}

/// Normalized discrete Gaussian truncated at `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian blur with zero padding outside the frame.
pub fn gaussian_blur(map: &WeightMap, sigma: f64) -> WeightMap {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (w, h) = (map.width as isize, map.height as isize);
    let mut tmp = vec![0.0; map.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sx = x + i as isize - radius;
                if (0..w).contains(&sx) {
                    acc += kv * map.data[(y * w + sx) as usize];
                }
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0; map.data.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let sy = y + i as isize - radius;
                if (0..h).contains(&sy) {
                    acc += kv * tmp[(sy * w + x) as usize];
                }
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    WeightMap {
        width: map.width,
        height: map.height,
        data: out,
    }
}

/// Confidence field: every reliable hand/face keypoint adds its confidence
/// inside its circle.
fn confidence_field(reliable: &[Keypoint], radius: f64, width: usize, height: usize) -> WeightMap {
    let mut field = WeightMap::filled(width, height, 0.0);
    for kp in reliable.iter().filter(|kp| kp.region != Region::Body) {
        let (x, y) = kp.clamped(width, height);
        paint_circle(width, height, x, y, radius, |px, py| {
            field.data[py * width + px] += kp.confidence;
        });
    }
    field
}

/// Single-frame re-weighting map.
///
/// Hand/face area: blurred confidence field times `omega1`, floored at 1.
/// Body rectangle outside hand/face: `omega2`. Everything else: 1.
pub fn build_reweight_mask(
    frame: &[Keypoint],
    params: &ParParams,
    width: usize,
    height: usize,
) -> Result<WeightMap> {
    params.validate()?;
    let area = build_awareness_area(frame, params.tau, params.radius, width, height)?;
    let reliable = filter_reliable(frame, params.tau);
    let field = gaussian_blur(
        &confidence_field(&reliable, params.radius, width, height),
        params.blur_sigma,
    );
    let data = (0..width * height)
        .map(|i| {
            if area.hand_face.data[i] {
                (field.data[i] * params.omega1).max(1.0)
            } else if area.body.data[i] {
                params.omega2
            } else {
                1.0
            }
        })
        .collect();
    Ok(WeightMap {
        width,
        height,
        data,
    })
}

pub fn build_sequence_mask(pose: &PoseSequence, params: &ParParams) -> Result<ReweightMask> {
    let frames = pose
        .frames
        .iter()
        .map(|f| build_reweight_mask(&f.keypoints, params, pose.width, pose.height))
        .collect::<Result<Vec<_>>>()?;
    ReweightMask::from_frames(frames)
}

/// Average-pools every frame over `factor x factor` blocks.
pub fn downsample_mask(mask: &ReweightMask, factor: usize) -> Result<ReweightMask> {
    if factor == 0 || !mask.width.is_multiple_of(factor) || !mask.height.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "mask {}x{} not divisible by factor {}",
            mask.width, mask.height, factor
        )));
    }
    let (ow, oh) = (mask.width / factor, mask.height / factor);
    let norm = (factor * factor) as f64;
    let mut weights = Vec::with_capacity(mask.frames * ow * oh);
    for f in 0..mask.frames {
        let plane = mask.frame(f);
        for by in 0..oh {
            for bx in 0..ow {
                let mut acc = 0.0;
                for y in by * factor..(by + 1) * factor {
                    let row = &plane[y * mask.width..(y + 1) * mask.width];
                    acc += row[bx * factor..(bx + 1) * factor].iter().sum::<f64>();
                }
                weights.push(acc / norm);
            }
        }
    }
    Ok(ReweightMask {
        frames: mask.frames,
        width: ow,
        height: oh,
        weights,
    })
}

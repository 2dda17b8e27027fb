//! Per-frame audio features and their temporal windowing.

use candle_core::Tensor;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::nn::device;

/// Per-frame audio features with a symmetric context window.
///
/// Row `f` of `windowed` is the concatenation of rows `f-m ..= f+m` of
/// `per_frame`, replicating the first/last row past the clip boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureTrack {
    pub frames: usize,
    pub dim: usize,
    pub per_frame: Vec<f64>,
    pub window: usize,
    pub windowed: Vec<f64>,
}

impl AudioFeatureTrack {
    pub fn windowed_dim(&self) -> usize {
        (2 * self.window + 1) * self.dim
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.per_frame[f * self.dim..(f + 1) * self.dim]
    }

    pub fn windowed_row(&self, f: usize) -> &[f64] {
        let w = self.windowed_dim();
        &self.windowed[f * w..(f + 1) * w]
    }

    /// `[frames, (2m+1) * dim]` tensor of the windowed features.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.windowed.clone(), (self.frames, self.windowed_dim()), &device())?)
    }

    /// Frames `start..start+len`, re-windowed from the cropped raw features.
    pub fn crop(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames {
            return Err(Error::InvalidArgument(format!(
                "crop {start}+{len} outside {} frames",
                self.frames
            )));
        }
        let rows = self.per_frame[start * self.dim..(start + len) * self.dim].to_vec();
        Ok(window_audio(&rows, self.dim, self.window))
    }
}

pub fn window_audio(per_frame: &[f64], dim: usize, m: usize) -> AudioFeatureTrack {
    assert!(dim > 0 && per_frame.len().is_multiple_of(dim), "feature rows must have width {dim}");
    let frames = per_frame.len() / dim;
    let mut windowed = Vec::with_capacity(frames * (2 * m + 1) * dim);
    for f in 0..frames as isize {
        for off in -(m as isize)..=(m as isize) {
            let src = (f + off).clamp(0, frames as isize - 1) as usize;
            windowed.extend_from_slice(&per_frame[src * dim..(src + 1) * dim]);
        }
    }
    AudioFeatureTrack {
        frames,
        dim,
        per_frame: per_frame.to_vec(),
        window: m,
        windowed,
    }
}

/// Anything that turns a mono waveform into one feature row per video frame.
pub trait AudioFeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, samples: &[f64], sample_rate: u32, fps: f64, frames: usize) -> Result<Vec<f64>>;
}

/// Log energies of mel-spaced triangular bands, one analysis window per video frame.
#[derive(Clone, Debug)]
pub struct LogMelExtractor {
    pub bands: usize,
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

impl AudioFeatureExtractor for LogMelExtractor {
    fn dim(&self) -> usize {
        self.bands
    }

    fn extract(&self, samples: &[f64], sample_rate: u32, fps: f64, frames: usize) -> Result<Vec<f64>> {
        let hop = (sample_rate as f64 / fps).round() as usize;
        if hop == 0 {
            return Err(Error::InvalidArgument("audio hop size is zero".into()));
        }
        let n_fft = hop.next_power_of_two();
        let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
        let nyquist = sample_rate as f64 / 2.0;
        let mel_edges: Vec<f64> = (0..self.bands + 2)
            .map(|i| mel_to_hz(hz_to_mel(nyquist) * i as f64 / (self.bands + 1) as f64))
            .collect();
        let bin_hz = sample_rate as f64 / n_fft as f64;

        let mut out = Vec::with_capacity(frames * self.bands);
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for f in 0..frames {
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for i in 0..hop {
                let s = samples.get(f * hop + i).copied().unwrap_or(0.0);
                let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / hop as f64).cos();
                buf[i] = Complex::new(s * w, 0.0);
            }
            fft.process(&mut buf);
            let power: Vec<f64> = buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr() / hop as f64).collect();
            for b in 0..self.bands {
                let (lo, mid, hi) = (mel_edges[b], mel_edges[b + 1], mel_edges[b + 2]);
                let mut e = 0.0;
                for (k, p) in power.iter().enumerate() {
                    let hz = k as f64 * bin_hz;
                    let w = if hz > lo && hz <= mid {
                        (hz - lo) / (mid - lo)
                    } else if hz > mid && hz < hi {
                        (hi - hz) / (hi - mid)
                    } else {
                        0.0
                    };
                    e += w * p;
                }
                out.push((1e-4 + e).ln());
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_window_is_identity() {
        let feats = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let t = window_audio(&feats, 2, 0);
        assert_eq!(t.windowed, feats);
    }

    #[test]
    fn edge_replication_example() {
        let t = window_audio(&[1.0, 2.0, 3.0, 4.0, 5.0], 1, 2);
        assert_eq!(t.windowed_row(0), &[1.0, 1.0, 1.0, 2.0, 3.0]);
        assert_eq!(t.windowed_row(2), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.windowed_row(4), &[3.0, 4.0, 5.0, 5.0, 5.0]);
    }

    #[test]
    fn constant_track_repeats() {
        let t = window_audio(&[0.5, -1.0].repeat(6), 2, 1);
        for f in 0..6 {
            assert_eq!(t.windowed_row(f), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        }
    }

    #[test]
    fn crop_rewindows() {
        let t = window_audio(&[1.0, 2.0, 3.0, 4.0, 5.0], 1, 1);
        let c = t.crop(1, 3).unwrap();
        assert_eq!(c.windowed, vec![2.0, 2.0, 3.0, 2.0, 3.0, 4.0, 3.0, 4.0, 4.0]);
        assert!(t.crop(3, 3).is_err());
    }

    #[test]
    fn louder_frames_have_more_band_energy() {
        let sr = 16_000;
        let hop = 640;
        let mut samples = Vec::new();
        for (f, amp) in [0.05f64, 0.8].iter().enumerate() {
            for i in 0..hop {
                let n = (f * hop + i) as f64;
                samples.push(amp * (2.0 * std::f64::consts::PI * 10.0 * n / hop as f64).sin());
            }
        }
        let ex = LogMelExtractor { bands: 8 };
        let feats = ex.extract(&samples, sr, 25.0, 2).unwrap();
        let quiet: f64 = feats[..8].iter().sum();
        let loud: f64 = feats[8..].iter().sum();
        assert!(loud > quiet);
        assert!(feats.iter().all(|v| v.is_finite()));
    }
}

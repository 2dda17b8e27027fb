//! Evaluation metrics: Fréchet gesture distance, diversity, beat alignment
//! and time cost, plus the pose autoencoder that supplies gesture features.

use candle_core::{Module, Tensor};
use candle_nn::{Linear, Optimizer, ParamsAdamW};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{labeled_rng, ParamStore, DTYPE};

/// Mean and covariance (unbiased) of row vectors.
fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 samples, got {n}")));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let mut centered = m;
    for j in 0..d {
        let mu = mean[j];
        centered.column_mut(j).add_scalar_mut(-mu);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Square root of a symmetric positive semi-definite matrix; negative
/// eigenvalues are clipped to zero.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let worst = eig.eigenvalues.iter().copied().fold(0.0, f64::min);
    if worst < -1e-6 {
        log::warn!("clipping negative eigenvalue {worst:e} in matrix square root");
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. `shrinkage`
/// is added to both covariance diagonals; it is required when either set
/// has no more samples than dimensions.
pub fn fgd(real: &[Vec<f64>], generated: &[Vec<f64>], shrinkage: f64) -> Result<f64> {
    let (mu1, mut s1) = moments(real)?;
    let (mu2, mut s2) = moments(generated)?;
    let d = mu1.len();
    if mu2.len() != d {
        return Err(Error::Shape(format!("feature dims {d} vs {}", mu2.len())));
    }
    if (real.len() <= d || generated.len() <= d) && shrinkage <= 0.0 {
        return Err(Error::Numeric(format!(
            "covariance is rank deficient ({} and {} samples in {d} dims) and no shrinkage was given",
            real.len(),
            generated.len()
        )));
    }
    if shrinkage > 0.0 {
        for i in 0..d {
            s1[(i, i)] += shrinkage;
            s2[(i, i)] += shrinkage;
        }
    }
    let r1 = sqrtm_psd(&s1);
    let cross = sqrtm_psd(&(&r1 * &s2 * &r1));
    let diff = mu1 - mu2;
    let value = diff.norm_squared() + s1.trace() + s2.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Mean Euclidean distance over `n_pairs` random pairs of distinct samples.
pub fn diversity(features: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("diversity needs at least 2 samples, got {n}")));
    }
    let mut rng = labeled_rng(seed, "diversity-pairs");
    let mut total = 0.0;
    for _ in 0..n_pairs {
        let i = rng.random_range(0..n);
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        total += features[i]
            .iter()
            .zip(&features[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    Ok(total / n_pairs.max(1) as f64)
}

/// Beat timestamps in seconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BeatTrack {
    pub audio_beats: Vec<f64>,
    pub motion_beats: Vec<f64>,
}

pub const DEFAULT_SIGMA_B: f64 = 0.1;

/// Mean over motion beats of `exp(-d^2 / (2 sigma^2))`, `d` the distance
/// to the nearest audio beat.
pub fn bas(beats: &BeatTrack, sigma_b: f64) -> Result<f64> {
    if beats.motion_beats.is_empty() {
        return Err(Error::InvalidArgument("no motion beats".into()));
    }
    if beats.audio_beats.is_empty() {
        log::warn!("no audio beats; beat alignment score is 0");
        return Ok(0.0);
    }
    let total: f64 = beats
        .motion_beats
        .iter()
        .map(|&m| {
            let d = beats.audio_beats.iter().map(|&a| (m - a).abs()).fold(f64::INFINITY, f64::min);
            (-d * d / (2.0 * sigma_b * sigma_b)).exp()
        })
        .sum();
    Ok(total / beats.motion_beats.len() as f64)
}

/// Greedy peak picking: strict local maxima above zero, strongest first,
/// at least `min_sep` indices apart. Returns sorted indices.
fn pick_peaks(env: &[f64], min_sep: usize) -> Vec<usize> {
    let mut cand: Vec<usize> = (0..env.len())
        .filter(|&i| {
            env[i] > 0.0 && (i == 0 || env[i] > env[i - 1]) && (i + 1 == env.len() || env[i] >= env[i + 1])
        })
        .collect();
    cand.sort_by(|&a, &b| env[b].total_cmp(&env[a]));
    let mut kept: Vec<usize> = Vec::new();
    for c in cand {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_sep) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Audio beats: peaks of the half-wave rectified first difference of log
/// energy over 10 ms hops, at least 0.2 s apart.
pub fn audio_beats(samples: &[f64], sample_rate: u32) -> Vec<f64> {
    let hop = (sample_rate as usize / 100).max(1);
    let energy: Vec<f64> = samples
        .chunks(hop)
        .map(|c| (c.iter().map(|s| s * s).sum::<f64>() / c.len() as f64 + 1e-10).ln())
        .collect();
    let mut onset = vec![0.0; energy.len()];
    for i in 1..energy.len() {
        onset[i] = (energy[i] - energy[i - 1]).max(0.0);
    }
    let hop_s = hop as f64 / sample_rate as f64;
    let min_sep = (0.2 / hop_s).round() as usize;
    pick_peaks(&onset, min_sep).into_iter().map(|i| i as f64 * hop_s).collect()
}

/// Motion beats: local minima of mean keypoint speed. `poses[f]` holds the
/// `(x, y)` keypoints of frame `f`; a minimum of the speed between frames
/// `f` and `f + 1` is timestamped at frame `f + 1`.
pub fn motion_beats(poses: &[Vec<(f64, f64)>], fps: f64) -> Vec<f64> {
    let speed: Vec<f64> = poses
        .windows(2)
        .map(|w| {
            let n = w[0].len().min(w[1].len()).max(1);
            w[0].iter().zip(&w[1]).map(|(a, b)| (a.0 - b.0).hypot(a.1 - b.1)).sum::<f64>() / n as f64
        })
        .collect();
    (1..speed.len().saturating_sub(1))
        .filter(|&i| speed[i] < speed[i - 1] && speed[i] <= speed[i + 1])
        .map(|i| (i as f64 + 1.0) / fps)
        .collect()
}

/// Wall time of one generated segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentTiming {
    pub sampling_seconds: f64,
    pub decoding_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeCost {
    pub sampling_seconds: f64,
    pub decoding_seconds: f64,
    /// Mean total per segment, rounded to whole seconds.
    pub seconds: i64,
}

pub fn time_cost(runs: &[SegmentTiming]) -> Result<TimeCost> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("time cost needs at least one run".into()));
    }
    let n = runs.len() as f64;
    let sampling = runs.iter().map(|r| r.sampling_seconds).sum::<f64>() / n;
    let decoding = runs.iter().map(|r| r.decoding_seconds).sum::<f64>() / n;
    Ok(TimeCost {
        sampling_seconds: sampling,
        decoding_seconds: decoding,
        seconds: (sampling + decoding).round() as i64,
    })
}

/// Output of `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub n_samples: usize,
    pub feature_ckpt_hash: String,
    pub config_digest: String,
}

/// Refuses to compare reports computed with different feature networks.
pub fn check_comparable(a: &MetricReport, b: &MetricReport) -> Result<()> {
    if a.feature_ckpt_hash != b.feature_ckpt_hash {
        return Err(Error::Config(format!(
            "reports use different feature checkpoints ({} vs {})",
            a.feature_ckpt_hash, b.feature_ckpt_hash
        )));
    }
    Ok(())
}

/// Two-layer pose autoencoder whose bottleneck gives gesture features.
pub struct PoseAutoencoder {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub store: ParamStore,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl PoseAutoencoder {
    pub fn new(input_dim: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed);
        let vb = store.var_builder();
        let hidden = 64;
        Ok(PoseAutoencoder {
            enc1: candle_nn::linear(input_dim, hidden, vb.pp("enc1"))?,
            enc2: candle_nn::linear(hidden, feature_dim, vb.pp("enc2"))?,
            dec1: candle_nn::linear(feature_dim, hidden, vb.pp("dec1"))?,
            dec2: candle_nn::linear(hidden, input_dim, vb.pp("dec2"))?,
            input_dim,
            feature_dim,
            store,
        })
    }

    fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.enc2.forward(&self.enc1.forward(x)?.relu()?)?)
    }

    fn to_tensor(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        if rows.iter().any(|r| r.len() != self.input_dim) {
            return Err(Error::Shape(format!("pose vectors must have length {}", self.input_dim)));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (rows.len(), self.input_dim), &crate::nn::device())?.to_dtype(DTYPE)?)
    }

    /// Fits reconstruction of `poses`; returns per-step losses.
    pub fn fit(&self, poses: &[Vec<f64>], steps: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        let x = self.to_tensor(poses)?;
        let mut opt = candle_nn::AdamW::new(
            self.store.all_vars(),
            ParamsAdamW {
                lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = labeled_rng(seed, "pose-ae");
        let n = poses.len();
        let mut losses = Vec::with_capacity(steps);
        for _ in 0..steps {
            let idx: Vec<u32> = (0..n.min(64)).map(|_| rng.random_range(0..n) as u32).collect();
            let xb = x.index_select(&Tensor::new(idx.as_slice(), x.device())?, 0)?;
            let rec = self.dec2.forward(&self.dec1.forward(&self.encode_tensor(&xb)?)?.relu()?)?;
            let loss = (rec - &xb)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            losses.push(loss.to_scalar::<f64>()?);
        }
        Ok(losses)
    }

    pub fn features(&self, poses: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let z = self.encode_tensor(&self.to_tensor(poses)?)?;
        Ok(z.to_vec2::<f64>()?)
    }

    /// Content hash of the parameters.
    pub fn checkpoint_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in self.store.tensors() {
            h.update(name.as_bytes());
            for v in t.flatten_all()?.to_vec1::<f64>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn_vec;

    fn gaussian(n: usize, d: usize, mu: &[f64], seed: u64) -> Vec<Vec<f64>> {
        let mut rng = labeled_rng(seed, "gauss");
        (0..n)
            .map(|_| randn_vec(&mut rng, d).into_iter().zip(mu).map(|(x, m)| x + m).collect())
            .collect()
    }

    #[test]
    fn fgd_identity_symmetry_and_mean_shift() {
        let x = gaussian(500, 4, &[0.0; 4], 1);
        assert!(fgd(&x, &x, 0.0).unwrap() < 1e-6);
        let y = gaussian(400, 4, &[0.3, 0.0, -0.2, 0.1], 2);
        assert!((fgd(&x, &y, 0.0).unwrap() - fgd(&y, &x, 0.0).unwrap()).abs() < 1e-6);
        let mu = [1.0, -0.5, 0.5, 0.0];
        let a = gaussian(100_000, 4, &[0.0; 4], 3);
        let b = gaussian(100_000, 4, &mu, 4);
        let expect: f64 = mu.iter().map(|m| m * m).sum();
        let got = fgd(&a, &b, 0.0).unwrap();
        assert!((got - expect).abs() / expect < 0.05, "{got} vs {expect}");
    }

    #[test]
    fn fgd_rank_deficient_needs_shrinkage() {
        let x = gaussian(3, 4, &[0.0; 4], 5);
        assert!(fgd(&x, &x, 0.0).is_err());
        assert!(fgd(&x, &x, 1e-3).unwrap() < 1e-6);
    }

    #[test]
    fn fgd_grows_with_noise() {
        let base = gaussian(2000, 4, &[0.0; 4], 6);
        let mut rng = labeled_rng(7, "noise");
        let mut last = -1.0;
        for s in [0.0, 0.2, 0.5, 1.0, 2.0] {
            let noisy: Vec<Vec<f64>> = base
                .iter()
                .map(|r| r.iter().zip(randn_vec(&mut rng, 4)).map(|(x, e)| x + s * e).collect())
                .collect();
            let v = fgd(&base, &noisy, 0.0).unwrap();
            assert!(v > last, "{v} <= {last}");
            last = v;
        }
    }

    #[test]
    fn sqrtm_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let r = sqrtm_psd(&a);
        assert!((&r * &r - &a).abs().max() < 1e-10);
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&vec![vec![1.0, 2.0]; 10], 50, 0).unwrap(), 0.0);
        assert!((diversity(&[vec![0.0, 0.0], vec![0.0, 2.0]], 20, 0).unwrap() - 2.0).abs() < 1e-12);
        // x - y ~ N(0, 2 I_8), so |x - y| = sqrt(2) chi_8 with
        // E[chi_8] = sqrt(2) Gamma(4.5) / Gamma(4)
        let x = gaussian(1000, 8, &[0.0; 8], 8);
        let gamma_4_5 = 3.5 * 2.5 * 1.5 * 0.5 * std::f64::consts::PI.sqrt();
        let e_chi8 = 2f64.sqrt() * gamma_4_5 / 6.0;
        let expect = 2f64.sqrt() * e_chi8;
        let got = diversity(&x, 20_000, 1).unwrap();
        assert!((got - expect).abs() / expect < 0.05, "{got} vs {expect}");
        assert!(diversity(&x[..1], 5, 0).is_err());
    }

    #[test]
    fn bas_examples() {
        let b = BeatTrack {
            audio_beats: vec![0.5, 1.0, 1.7],
            motion_beats: vec![0.5, 1.0, 1.7],
        };
        assert_eq!(bas(&b, DEFAULT_SIGMA_B).unwrap(), 1.0);
        let b = BeatTrack {
            audio_beats: vec![1.0],
            motion_beats: vec![1.1],
        };
        assert!((bas(&b, 0.1).unwrap() - (-0.5f64).exp()).abs() < 1e-12);
        let b = BeatTrack {
            audio_beats: vec![0.0, 10.0],
            motion_beats: vec![5.0, 15.0],
        };
        assert!(bas(&b, 0.1).unwrap() < 0.05);
        let shifted = BeatTrack {
            audio_beats: vec![3.0, 13.0],
            motion_beats: vec![8.0, 18.0],
        };
        assert!((bas(&b, 0.1).unwrap() - bas(&shifted, 0.1).unwrap()).abs() < 1e-12);
        let empty = BeatTrack {
            audio_beats: vec![],
            motion_beats: vec![1.0],
        };
        assert_eq!(bas(&empty, 0.1).unwrap(), 0.0);
        assert!(bas(&BeatTrack::default(), 0.1).is_err());
    }

    #[test]
    fn beat_extraction() {
        let sr = 16_000;
        let mut s = vec![0.001; sr * 2];
        for onset in [0.3, 0.9, 1.5] {
            let i = (onset * sr as f64) as usize;
            for v in &mut s[i..i + 1600] {
                *v = 0.5;
            }
        }
        let beats = audio_beats(&s, sr as u32);
        assert_eq!(beats.len(), 3, "{beats:?}");
        for (b, e) in beats.iter().zip([0.3, 0.9, 1.5]) {
            assert!((b - e).abs() <= 0.011, "{b} vs {e}");
        }
        // speed profile 3, 1, 3, 3, 0.5, 2 -> minima at indices 1 and 4
        let xs = [0.0, 3.0, 4.0, 7.0, 10.0, 10.5, 12.5];
        let poses: Vec<Vec<(f64, f64)>> = xs.iter().map(|&x| vec![(x, 0.0)]).collect();
        assert_eq!(motion_beats(&poses, 10.0), vec![0.2, 0.5]);
    }

    #[test]
    fn time_cost_rounds_mean() {
        let runs = [
            SegmentTiming {
                sampling_seconds: 9.0,
                decoding_seconds: 1.0,
            },
            SegmentTiming {
                sampling_seconds: 11.0,
                decoding_seconds: 1.0,
            },
        ];
        assert_eq!(time_cost(&runs).unwrap().seconds, 11);
        assert!(time_cost(&[]).is_err());
    }

    #[test]
    fn pose_autoencoder_learns_and_hashes() {
        let mut rng = labeled_rng(9, "pose");
        let poses: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.random_range(-1.0..1.0);
                (0..10).map(|k| (a * k as f64).sin()).collect()
            })
            .collect();
        let ae = PoseAutoencoder::new(10, 32, 0).unwrap();
        let h0 = ae.checkpoint_hash().unwrap();
        let losses = ae.fit(&poses, 200, 3e-3, 0).unwrap();
        assert!(losses.last().unwrap() < &(losses[0] * 0.5));
        assert_ne!(h0, ae.checkpoint_hash().unwrap());
        let f = ae.features(&poses[..3]).unwrap();
        assert_eq!(f.len(), 3);
        assert_eq!(f[0].len(), 32);
        let a = MetricReport {
            metric: "fgd".into(),
            value: 1.0,
            n_samples: 3,
            feature_ckpt_hash: h0,
            config_digest: "x".into(),
        };
        let b = MetricReport {
            feature_ckpt_hash: ae.checkpoint_hash().unwrap(),
            ..a.clone()
        };
        assert!(check_comparable(&a, &a).is_ok());
        assert!(check_comparable(&a, &b).is_err());
    }
}

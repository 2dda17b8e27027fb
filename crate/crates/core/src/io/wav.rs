//! Mono PCM-16 WAV input and output.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Audio {
    pub sample_rate: u32,
    /// Samples in `[-1, 1)`, multiples of `1 / 32768`.
    pub samples: Vec<f64>,
}

pub fn quantize(x: f64) -> i16 {
    (x * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn write_wav(path: &Path, audio: &Audio) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &audio.samples {
        w.write_sample(quantize(s))?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads a PCM-16 file, averaging channels to mono.
pub fn read_wav(path: &Path) -> Result<Audio> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("{} does not exist", path.display())));
    }
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::InvalidArgument(format!("{} is not PCM-16", path.display())));
    }
    let ch = spec.channels as usize;
    let raw: Vec<i16> = r.samples::<i16>().collect::<std::result::Result<_, _>>()?;
    let samples = raw
        .chunks(ch)
        .map(|c| c.iter().map(|&s| s as f64).sum::<f64>() / (ch as f64 * 32768.0))
        .collect();
    Ok(Audio {
        sample_rate: spec.sample_rate,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantized_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..100).map(|i| quantize((i as f64 * 0.1).sin() * 0.5) as f64 / 32768.0).collect();
        let a = Audio {
            sample_rate: 16000,
            samples,
        };
        write_wav(&path, &a).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back, a);
        write_wav(&path, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }
}

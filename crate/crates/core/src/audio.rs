//! Mono waveforms and 16-bit PCM WAV I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Mono amplitude sequence, nominally within `[-1, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// A copy with `other` added sample by sample.
    pub fn added(&self, other: &[f64]) -> Result<Waveform> {
        if other.len() != self.samples.len() {
            return Err(input_err(format!(
                "length mismatch: {} vs {}",
                self.samples.len(),
                other.len()
            )));
        }
        Ok(Waveform::new(
            self.samples.iter().zip(other).map(|(a, b)| a + b).collect(),
            self.sample_rate,
        ))
    }

    pub fn scaled(&self, gain: f64) -> Waveform {
        Waveform::new(self.samples.iter().map(|v| v * gain).collect(), self.sample_rate)
    }

    /// Writes 16-bit PCM, clipping to `[-1, 1]`.
    pub fn write_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            writer.write_sample(to_pcm16(s))?;
        }
        writer.finalize()?;
        Ok(())
    }

    pub fn read_wav(path: &Path) -> Result<Waveform> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(input_err(format!(
                "{}: expected mono 16-bit PCM, got {:?}",
                path.display(),
                spec
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(from_pcm16))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Waveform::new(samples, spec.sample_rate))
    }
}

pub fn to_pcm16(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

pub fn from_pcm16(v: i16) -> f64 {
    f64::from(v) / 32767.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wav_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let w = Waveform::new((0..100).map(|i| (i as f64 * 0.1).sin() * 0.9).collect(), 8000);
        w.write_wav(&path).unwrap();
        let r = Waveform::read_wav(&path).unwrap();
        assert_eq!(r.sample_rate(), 8000);
        assert_eq!(r.len(), 100);
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() <= 0.5 / 32767.0 + 1e-12);
        }
    }

    #[test]
    fn added_checks_length() {
        let w = Waveform::new(vec![0.0; 4], 8000);
        assert!(w.added(&[0.0; 3]).is_err());
        assert_eq!(w.added(&[0.5; 4]).unwrap().samples(), &[0.5; 4]);
    }
}

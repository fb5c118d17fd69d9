//! Differentiable log-mel filterbank front-end.
//!
//! The DFT is a matrix product against precomputed cosine and sine tables so
//! gradients flow from the features back to individual waveform samples.
//! Frames shorter than `n_fft` are implicitly zero-padded: the tables only
//! have `frame_len` rows.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use spkguard_autograd::{Graph, Tensor, Var};

use crate::audio::Waveform;
use crate::error::{config_err, input_err, Result};

/// Added to mel energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FeatureConfig {
    /// 25 ms frames with a 10 ms hop at 8 kHz, 40 mel bands.
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_len: 200,
            hop: 80,
            n_fft: 256,
            n_mels: 40,
            fmin: 50.0,
            fmax: 4000.0,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 {
            return Err(config_err("frame_len and hop must be positive"));
        }
        if self.frame_len > self.n_fft {
            return Err(config_err(format!(
                "frame_len {} exceeds n_fft {}",
                self.frame_len, self.n_fft
            )));
        }
        let nyquist = f64::from(self.sample_rate) / 2.0;
        if !(0.0 <= self.fmin && self.fmin < self.fmax && self.fmax <= nyquist) {
            return Err(config_err(format!(
                "need 0 <= fmin < fmax <= {nyquist}, got fmin {} fmax {}",
                self.fmin, self.fmax
            )));
        }
        if self.n_mels < 2 {
            return Err(config_err("n_mels must be at least 2"));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Number of frames for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Symmetric Hamming window.
pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Center bins of the `n_mels + 2` mel-spaced edge points, rounded to the DFT grid.
pub fn mel_edge_bins(cfg: &FeatureConfig) -> Vec<usize> {
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let step = (hi - lo) / (cfg.n_mels + 1) as f64;
    (0..cfg.n_mels + 2)
        .map(|i| {
            let hz = mel_to_hz(lo + step * i as f64);
            (hz * cfg.n_fft as f64 / f64::from(cfg.sample_rate)).round() as usize
        })
        .collect()
}

/// Triangular filters `[n_mels, n_bins]` with unit peaks at their center bins.
pub fn mel_matrix(cfg: &FeatureConfig) -> Result<Tensor> {
    cfg.validate()?;
    let edges = mel_edge_bins(cfg);
    let n_bins = cfg.n_bins();
    let mut m = vec![0.0; cfg.n_mels * n_bins];
    for f in 0..cfg.n_mels {
        let (l, c, r) = (edges[f], edges[f + 1], edges[f + 2]);
        if l >= c || c >= r || r >= n_bins {
            return Err(config_err(format!(
                "mel filter {f} is empty (bins {l}, {c}, {r}); n_mels {} too large for n_fft {}",
                cfg.n_mels, cfg.n_fft
            )));
        }
        for k in l..=r {
            let v = if k <= c {
                (k - l) as f64 / (c - l) as f64
            } else {
                (r - k) as f64 / (r - c) as f64
            };
            m[f * n_bins + k] = v;
        }
    }
    Ok(Tensor::new(vec![cfg.n_mels, n_bins], m)?)
}

/// Precomputed tables for one [`FeatureConfig`].
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    window: Tensor,
    /// `[frame_len, 2 * n_bins]`: cosine columns then sine columns.
    dft: Tensor,
    /// `[2 * n_bins, n_mels]`: the mel matrix transposed, stacked twice so that
    /// squared real and imaginary parts sum into power inside one product.
    mel_stacked: Tensor,
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let n_bins = cfg.n_bins();
        let mut dft = vec![0.0; cfg.frame_len * 2 * n_bins];
        for n in 0..cfg.frame_len {
            for k in 0..n_bins {
                let phase = 2.0 * PI * ((k * n) % cfg.n_fft) as f64 / cfg.n_fft as f64;
                dft[n * 2 * n_bins + k] = phase.cos();
                dft[n * 2 * n_bins + n_bins + k] = -phase.sin();
            }
        }
        let mel = mel_matrix(cfg)?;
        let mut stacked = vec![0.0; 2 * n_bins * cfg.n_mels];
        for f in 0..cfg.n_mels {
            for k in 0..n_bins {
                let v = mel.data()[f * n_bins + k];
                stacked[k * cfg.n_mels + f] = v;
                stacked[(n_bins + k) * cfg.n_mels + f] = v;
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            window: Tensor::new(vec![1, cfg.frame_len], hamming(cfg.frame_len))?,
            dft: Tensor::new(vec![cfg.frame_len, 2 * n_bins], dft)?,
            mel_stacked: Tensor::new(vec![2 * n_bins, cfg.n_mels], stacked)?,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Hamming-windowed frames `[frames, frame_len]` of a rank-1 signal node.
    pub fn frame_and_window(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let len = g.value(x).numel();
        if len < self.cfg.frame_len {
            return Err(input_err(format!(
                "signal of {len} samples is shorter than one {}-sample frame",
                self.cfg.frame_len
            )));
        }
        let frames = g.frames(x, self.cfg.frame_len, self.cfg.hop)?;
        let count = g.shape(frames)[0];
        let w = g.constant(self.window.clone());
        let w = g.expand(w, 0, count)?;
        Ok(g.mul(frames, w)?)
    }

    /// Real and imaginary DFT parts side by side: `[frames, 2 * n_bins]`.
    fn spectrum(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let dft = g.constant(self.dft.clone());
        Ok(g.matmul(frames, dft)?)
    }

    /// Magnitude spectrum `[frames, n_bins]` of windowed frames.
    pub fn dft_magnitude(&self, g: &mut Graph, frames: Var) -> Result<Var> {
        let n_bins = self.cfg.n_bins();
        let spec = self.spectrum(g, frames)?;
        let sq = g.square(spec)?;
        let re = g.slice(sq, 1, 0, n_bins)?;
        let im = g.slice(sq, 1, n_bins, 2 * n_bins)?;
        let power = g.add(re, im)?;
        Ok(g.sqrt(power)?)
    }

    /// Mel energies `[frames, n_mels]` before the logarithm.
    pub fn mel_energies(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let frames = self.frame_and_window(g, x)?;
        let spec = self.spectrum(g, frames)?;
        let sq = g.square(spec)?;
        let mel = g.constant(self.mel_stacked.clone());
        Ok(g.matmul(sq, mel)?)
    }

    /// `log(mel energies + 1e-6)`, shape `[frames, n_mels]`.
    pub fn log_mel(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let e = self.mel_energies(g, x)?;
        let e = g.shift(e, LOG_FLOOR)?;
        Ok(g.log(e)?)
    }

    /// Non-differentiable convenience wrapper around [`FeatureExtractor::log_mel`].
    pub fn log_mel_values(&self, wave: &Waveform) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(wave.samples().to_vec()));
        let y = self.log_mel(&mut g, x)?;
        Ok(g.value(y).clone())
    }
}

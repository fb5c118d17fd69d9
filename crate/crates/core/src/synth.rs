//! Deterministic synthetic speaker corpus.
//!
//! A speaker is a voiced source (harmonics of `f0` with slow wobble) shaped
//! by a spectral tilt and two or three resonances. Utterances of the same
//! speaker differ by their seeds: pitch offset within `jitter`, small formant
//! shifts, amplitude envelope, harmonic phases and background noise.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{config_err, input_err, Result};
use crate::rng;

pub const F0_RANGE: (f64, f64) = (80.0, 300.0);
pub const TILT_RANGE: (f64, f64) = (-12.0, -8.0);
pub const JITTER_RANGE: (f64, f64) = (0.01, 0.04);
const FORMANT_RANGES: [(f64, f64); 3] = [(300.0, 900.0), (900.0, 2200.0), (2200.0, 3500.0)];
const FORMANT_GAINS: [f64; 3] = [1.0, 0.7, 0.4];
const BANDWIDTH_RANGE: (f64, f64) = (60.0, 200.0);
const PEAK: f64 = 0.9;
pub const DEFAULT_NOISE_STD: f64 = 0.003;
pub const DEFAULT_NOISE_RANGE: (f64, f64) = (0.003, 0.05);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerParams {
    pub f0: f64,
    pub formants: Vec<Formant>,
    /// Spectral slope in dB per octave (negative).
    pub tilt_db_per_octave: f64,
    /// Relative pitch wobble; also bounds the per-utterance pitch offset.
    pub jitter: f64,
}

fn uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * r.random::<f64>()
}

pub fn make_speaker(seed: u64) -> SpeakerParams {
    let mut r = rng::stream(seed, "speaker", &[]);
    let f0 = uniform(&mut r, F0_RANGE);
    let formants = FORMANT_RANGES
        .iter()
        .map(|&range| Formant {
            center_hz: uniform(&mut r, range),
            bandwidth_hz: uniform(&mut r, BANDWIDTH_RANGE),
        })
        .collect();
    SpeakerParams {
        f0,
        formants,
        tilt_db_per_octave: uniform(&mut r, TILT_RANGE),
        jitter: uniform(&mut r, JITTER_RANGE),
    }
}

fn resonance(freq: f64, formants: &[Formant], shift: f64) -> f64 {
    formants
        .iter()
        .zip(FORMANT_GAINS)
        .map(|(f, gain)| {
            let c = f.center_hz * shift;
            gain / (1.0 + ((freq - c) / (0.5 * f.bandwidth_hz)).powi(2))
        })
        .sum()
}

/// Renders one utterance, peak-normalized to 0.9.
pub fn synth_utterance(
    speaker: &SpeakerParams,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
    noise_std: f64,
) -> Result<Waveform> {
    if duration_s < 0.5 {
        return Err(input_err(format!("duration {duration_s} s is below the 0.5 s minimum")));
    }
    if !(0.0..0.5).contains(&noise_std) {
        return Err(input_err(format!("noise level {noise_std} outside [0, 0.5)")));
    }
    let sr = f64::from(sample_rate);
    let n = (duration_s * sr).round() as usize;
    let mut r = rng::stream(seed, "utterance", &[]);

    let j = speaker.jitter;
    let base_f0 = speaker.f0 * (1.0 + j * (2.0 * r.random::<f64>() - 1.0));
    let vib_rate = uniform(&mut r, (3.0, 7.0));
    let vib_phase = 2.0 * PI * r.random::<f64>();
    let formant_shift = 1.0 + 0.03 * (2.0 * r.random::<f64>() - 1.0);
    let env_rate = uniform(&mut r, (2.0, 5.0));
    let env_phase = PI * r.random::<f64>();

    let nyquist = 0.5 * sr;
    let max_f0 = base_f0 * (1.0 + 0.5 * j);
    let n_harm = ((0.95 * nyquist) / max_f0).floor().max(1.0) as usize;
    let exponent = speaker.tilt_db_per_octave / (20.0 * 2f64.log10());
    let amps: Vec<f64> = (1..=n_harm)
        .map(|h| {
            let hf = h as f64;
            hf.powf(exponent) * (1.0 + resonance(hf * base_f0, &speaker.formants, formant_shift))
        })
        .collect();
    let phases: Vec<f64> = (0..n_harm).map(|_| 2.0 * PI * r.random::<f64>()).collect();

    let mut voiced = vec![0.0; n];
    let mut cycle = 0.0;
    for (i, out) in voiced.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f_inst = base_f0 * (1.0 + 0.5 * j * (2.0 * PI * vib_rate * t + vib_phase).sin());
        let env = 0.6 + 0.4 * (PI * env_rate * t + env_phase).sin().powi(2);
        let mut s = 0.0;
        for (h, (&a, &p)) in amps.iter().zip(&phases).enumerate() {
            s += a * (2.0 * PI * (h + 1) as f64 * cycle + p).sin();
        }
        *out = env * s;
        cycle += f_inst / sr;
    }
    let voiced_peak = voiced.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut samples: Vec<f64> = voiced
        .iter()
        .map(|v| v / voiced_peak + noise_std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r))
        .collect::<Vec<f64>>();
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    samples.iter_mut().for_each(|v| *v *= PEAK / peak);
    Ok(Waveform::new(samples, sample_rate))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Enroll,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Enroll => "enroll",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker: usize,
    pub seed: u64,
    pub split: Split,
    pub wave: Waveform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
    /// Per-utterance background noise level (std before peak normalization),
    /// drawn uniformly from this range.
    pub noise_range: (f64, f64),
    pub master_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_speakers: 20,
            utts_per_speaker: 20,
            duration_s: 1.0,
            sample_rate: 8000,
            noise_range: DEFAULT_NOISE_RANGE,
            master_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub speakers: Vec<SpeakerParams>,
    pub utterances: Vec<Utterance>,
}

/// Per-speaker (train, enroll, test) counts for a 70/10/20 split.
pub fn split_counts(utts_per_speaker: usize) -> (usize, usize, usize) {
    let u = utts_per_speaker as f64;
    let enroll = ((0.1 * u).round() as usize).max(1);
    let test = ((0.2 * u).round() as usize).max(1);
    (utts_per_speaker - enroll - test, enroll, test)
}

pub fn make_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    if cfg.n_speakers < 2 {
        return Err(config_err(format!("corpus needs at least 2 speakers, got {}", cfg.n_speakers)));
    }
    let (lo, hi) = cfg.noise_range;
    if !(0.0 <= lo && lo <= hi && hi < 0.5) {
        return Err(config_err(format!("noise range [{lo}, {hi}] must satisfy 0 <= lo <= hi < 0.5")));
    }
    if cfg.utts_per_speaker < 4 {
        return Err(config_err(format!(
            "corpus needs at least 4 utterances per speaker, got {}",
            cfg.utts_per_speaker
        )));
    }
    let (n_train, n_enroll, _) = split_counts(cfg.utts_per_speaker);
    let speakers: Vec<SpeakerParams> = (0..cfg.n_speakers)
        .map(|s| make_speaker(rng::derive(cfg.master_seed, &[rng::tag("speaker"), s as u64])))
        .collect();
    let mut utterances = Vec::with_capacity(cfg.n_speakers * cfg.utts_per_speaker);
    for (s, params) in speakers.iter().enumerate() {
        for u in 0..cfg.utts_per_speaker {
            let seed = rng::derive(cfg.master_seed, &[rng::tag("utterance"), s as u64, u as u64]);
            let noise_std = uniform(&mut rng::stream(seed, "noise-level", &[]), cfg.noise_range);
            let split = if u < n_train {
                Split::Train
            } else if u < n_train + n_enroll {
                Split::Enroll
            } else {
                Split::Test
            };
            utterances.push(Utterance {
                id: format!("spk{s:03}_utt{u:03}"),
                speaker: s,
                seed,
                split,
                wave: synth_utterance(params, cfg.duration_s, seed, cfg.sample_rate, noise_std)?,
            });
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        speakers,
        utterances,
    })
}

impl Corpus {
    pub fn n_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    /// Writes `<dir>/wav/<id>.wav` and `<dir>/manifest.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let wav_dir = dir.join("wav");
        fs::create_dir_all(&wav_dir)?;
        let mut manifest = String::from("utterance_id,speaker_id,split,seed\n");
        for u in &self.utterances {
            u.wave.write_wav(&wav_dir.join(format!("{}.wav", u.id)))?;
            manifest.push_str(&format!("{},{},{},{}\n", u.id, u.speaker, u.split, u.seed));
        }
        fs::write(dir.join("manifest.csv"), manifest)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn speaker_is_deterministic_and_in_range() {
        assert_eq!(make_speaker(0), make_speaker(0));
        for seed in 0..50 {
            let s = make_speaker(seed);
            assert!((F0_RANGE.0..=F0_RANGE.1).contains(&s.f0));
            assert!((TILT_RANGE.0..=TILT_RANGE.1).contains(&s.tilt_db_per_octave));
            assert!((JITTER_RANGE.0..=JITTER_RANGE.1).contains(&s.jitter));
            assert!(s.formants.iter().all(|f| f.center_hz < 4000.0));
        }
    }

    #[test]
    fn distinct_f0_values() {
        let mut f0s: Vec<i64> = (0..20).map(|s| make_speaker(s).f0.round() as i64).collect();
        f0s.sort_unstable();
        f0s.dedup();
        assert!(f0s.len() >= 15, "{f0s:?}");
    }

    #[test]
    fn utterance_peak_and_determinism() {
        let s = make_speaker(3);
        let a = synth_utterance(&s, 0.5, 9, 8000, DEFAULT_NOISE_STD).unwrap();
        let b = synth_utterance(&s, 0.5, 9, 8000, DEFAULT_NOISE_STD).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4000);
        assert!((a.peak() - 0.9).abs() < 1e-15);
        assert!(synth_utterance(&s, 0.4, 9, 8000, DEFAULT_NOISE_STD).is_err());
    }

    #[test]
    fn split_counts_default() {
        assert_eq!(split_counts(10), (7, 1, 2));
        assert_eq!(split_counts(20), (14, 2, 4));
    }

    #[test]
    fn corpus_rejects_bad_counts() {
        let cfg = CorpusConfig {
            n_speakers: 1,
            ..CorpusConfig::default()
        };
        assert!(make_corpus(&cfg).is_err());
        let cfg = CorpusConfig {
            utts_per_speaker: 2,
            ..CorpusConfig::default()
        };
        assert!(make_corpus(&cfg).is_err());
    }
}

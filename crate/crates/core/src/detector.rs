//! Clean/adversarial classifier. Reuses the encoder network with a two-class
//! ArcFace head over log-mel features.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::encoder::{EmbeddingModel, EncoderConfig, FeatureSample, TrainConfig};
use crate::error::{config_err, input_err, Result};
use crate::features::FeatureConfig;
use crate::params::ParamSet;
use crate::rng;

pub const CLEAN: usize = 0;
pub const ADVERSARIAL: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    pub margin: f64,
    pub scale: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    /// Fraction of each class held out for testing.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32],
            embedding_dim: 16,
            margin: 0.2,
            scale: 32.0,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            lr_end: 1e-5,
            holdout: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub adversarial: bool,
    /// Probability of the adversarial class.
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Detector {
    net: EmbeddingModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub initial_accuracy: f64,
    pub held_out_accuracy: f64,
    pub n_train: usize,
    pub n_held_out: usize,
    pub epoch_losses: Vec<f64>,
}

impl Detector {
    pub fn new(cfg: &DetectorConfig, features: &FeatureConfig) -> Result<Self> {
        let enc = EncoderConfig {
            channels: cfg.channels.clone(),
            kernel: 3,
            embedding_dim: cfg.embedding_dim,
            n_speakers: 2,
            margin: cfg.margin,
            scale: cfg.scale,
        };
        Ok(Self {
            net: EmbeddingModel::new(enc, features, rng::derive(cfg.seed, &[rng::tag("detector")]))?,
        })
    }

    pub fn detect(&self, x: &Waveform) -> Result<Detection> {
        let logits = self.net.logits(&self.net.embed(x)?)?;
        Ok(decide(logits[CLEAN], logits[ADVERSARIAL]))
    }

    pub fn to_params(&self) -> ParamSet {
        self.net.to_params()
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        let net = EmbeddingModel::from_params(p)?;
        if net.config().n_speakers != 2 {
            return Err(input_err("detector checkpoint must have two classes"));
        }
        Ok(Self { net })
    }

    pub fn accuracy(&self, items: &[(&Waveform, usize)]) -> Result<f64> {
        let mut correct = 0usize;
        for (w, l) in items {
            let d = self.detect(w)?;
            correct += usize::from(usize::from(d.adversarial) == *l);
        }
        Ok(correct as f64 / items.len().max(1) as f64)
    }
}

fn decide(clean: f64, adv: f64) -> Detection {
    // two-class softmax, written to avoid overflow
    let score = 1.0 / (1.0 + (clean - adv).exp());
    Detection {
        adversarial: adv > clean,
        score,
    }
}

/// Splits each class 9:1 (by default), trains on balanced batches and
/// reports held-out accuracy.
pub fn train_detector(
    clean: &[&Waveform],
    adversarial: &[&Waveform],
    features: &FeatureConfig,
    cfg: &DetectorConfig,
) -> Result<(Detector, DetectorReport)> {
    if clean.is_empty() || adversarial.is_empty() {
        return Err(input_err("detector training needs both clean and adversarial audio"));
    }
    if !(0.0..1.0).contains(&cfg.holdout) {
        return Err(config_err("holdout fraction must be in [0, 1)"));
    }
    let mut r = rng::stream(cfg.seed, "detector-split", &[]);
    let split = |items: &[&Waveform], label: usize, r: &mut rng::Rng| {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        idx.shuffle(r);
        let n_test = ((items.len() as f64 * cfg.holdout).round() as usize).min(items.len() - 1);
        let test: Vec<(usize, usize)> = idx[..n_test].iter().map(|&i| (i, label)).collect();
        let train: Vec<(usize, usize)> = idx[n_test..].iter().map(|&i| (i, label)).collect();
        (train, test)
    };
    let (clean_train, clean_test) = split(clean, CLEAN, &mut r);
    let (adv_train, adv_test) = split(adversarial, ADVERSARIAL, &mut r);
    let wave = |(i, l): (usize, usize)| if l == CLEAN { clean[i] } else { adversarial[i] };

    let mut det = Detector::new(cfg, features)?;
    let to_sample = |det: &Detector, &(i, l): &(usize, usize)| {
        Ok(FeatureSample {
            features: det.net.features(wave((i, l)))?,
            label: l,
            weight: 1.0,
        })
    };
    let clean_s = clean_train.iter().map(|p| to_sample(&det, p)).collect::<Result<Vec<_>>>()?;
    let adv_s = adv_train.iter().map(|p| to_sample(&det, p)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = clean_s.iter().chain(&adv_s).map(|s| &s.features).collect();
    det.net.fit_input_norm(&refs)?;

    // Balanced order: interleave the classes, recycling the smaller one.
    let n = clean_s.len().max(adv_s.len());
    let mut balanced = Vec::with_capacity(2 * n);
    for i in 0..n {
        balanced.push(clean_s[i % clean_s.len()].clone());
        balanced.push(adv_s[i % adv_s.len()].clone());
    }
    let test: Vec<(&Waveform, usize)> = clean_test.iter().chain(&adv_test).map(|&p| (wave(p), p.1)).collect();
    let all_train: Vec<(&Waveform, usize)> = clean_train.iter().chain(&adv_train).map(|&p| (wave(p), p.1)).collect();
    let initial_accuracy = det.accuracy(if test.is_empty() { &all_train } else { &test })?;

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        lr_end: cfg.lr_end,
        seed: rng::derive(cfg.seed, &[rng::tag("detector-train")]),
        augment_copies: 0,
        augment_noise: 0.0,
    };
    let report = fit_balanced(&mut det.net, &balanced, &train_cfg)?;
    let held_out_accuracy = if test.is_empty() {
        f64::NAN
    } else {
        det.accuracy(&test)?
    };
    Ok((
        det,
        DetectorReport {
            initial_accuracy,
            held_out_accuracy,
            n_train: all_train.len(),
            n_held_out: test.len(),
            epoch_losses: report,
        },
    ))
}

/// Shuffles clean/adversarial pairs as units so every batch stays balanced.
fn fit_balanced(net: &mut EmbeddingModel, pairs: &[FeatureSample], cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut r = rng::stream(cfg.seed, "detector-pairs", &[]);
    let mut idx: Vec<usize> = (0..pairs.len() / 2).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut opt = crate::params::Adam::default();
    let per_batch = (cfg.batch_size / 2).max(1);
    let total = cfg.epochs * idx.len().div_ceil(per_batch);
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut r);
        let mut sum = 0.0;
        for chunk in idx.chunks(per_batch) {
            let batch: Vec<FeatureSample> = chunk
                .iter()
                .flat_map(|&i| [pairs[2 * i].clone(), pairs[2 * i + 1].clone()])
                .collect();
            let lr = crate::params::cosine_lr(cfg.lr, cfg.lr_end, opt.steps() as usize, total);
            sum += net.train_step(&batch, &mut opt, lr)? * batch.len() as f64;
        }
        history.push(sum / pairs.len() as f64);
    }
    Ok(history)
}

/// `utterance_id,label,score` rows.
pub fn detection_csv(rows: &[(String, Detection)]) -> String {
    let mut s = String::from("utterance_id,label,score\n");
    for (id, d) in rows {
        let label = if d.adversarial { "adversarial" } else { "clean" };
        let _ = writeln!(s, "{id},{label},{:.6}", d.score);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decision_and_score_range() {
        let d = decide(3.0, 5.0);
        assert!(d.adversarial && d.score > 0.5 && d.score <= 1.0);
        let d = decide(40.0, -40.0);
        assert!(!d.adversarial && d.score >= 0.0 && d.score < 1e-30);
        let d = decide(1.0, 1.0);
        assert!(!d.adversarial);
        assert_eq!(d.score, 0.5);
    }

    #[test]
    fn rejects_single_class() {
        let w = Waveform::new(vec![0.1; 800], 8000);
        assert!(train_detector(&[&w], &[], &FeatureConfig::default(), &DetectorConfig::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let s = detection_csv(&[(
            "a".into(),
            Detection {
                adversarial: true,
                score: 0.75,
            },
        )]);
        assert_eq!(s, "utterance_id,label,score\na,adversarial,0.750000\n");
    }
}

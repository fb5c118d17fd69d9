//! Miniature residual 1-D convolutional speaker encoder.
//!
//! `waveform -> log-mel -> global feature normalization -> residual conv
//! stages -> statistics pooling (mean ++ std over time) -> affine projection`.
//! Each stage is `h = relu(conv(h)); h = h + relu(conv(h))`. Training uses an
//! additive angular margin (ArcFace) head over L2-normalized embeddings and
//! class weights.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spkguard_autograd::{Graph, Tensor, Var};

use crate::audio::Waveform;
use crate::error::{config_err, input_err, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::params::{average_grads, cosine_lr, Adam, Bound, ParamSet};
use crate::rng;

/// Lower clamp on `1 - cos^2` before the square root in the margin term.
const SIN_SQ_FLOOR: f64 = 1e-12;
const MIN_FRAMES: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub embedding_dim: usize,
    pub n_speakers: usize,
    pub margin: f64,
    pub scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32],
            kernel: 3,
            embedding_dim: 32,
            n_speakers: 20,
            margin: 0.2,
            scale: 32.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(config_err("channel plan must be non-empty and positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(config_err(format!("kernel {} must be odd", self.kernel)));
        }
        if self.embedding_dim < 2 {
            return Err(config_err("embedding_dim must be at least 2"));
        }
        if self.n_speakers < 2 {
            return Err(config_err("need at least 2 classes"));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(config_err(format!("margin {} outside [0, pi/2)", self.margin)));
        }
        if self.scale <= 0.0 {
            return Err(config_err("scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    pub seed: u64,
    /// Noisy copies added per training utterance.
    pub augment_copies: usize,
    /// Upper bound of the uniform noise std used for the copies.
    pub augment_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 2e-3,
            lr_end: 2e-5,
            seed: 0,
            augment_copies: 2,
            augment_noise: 0.04,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// One labelled training item: precomputed log-mel features and a loss weight.
#[derive(Clone, Debug)]
pub struct FeatureSample {
    pub features: Tensor,
    pub label: usize,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    config: EncoderConfig,
    extractor: FeatureExtractor,
    params: ParamSet,
}

impl EmbeddingModel {
    pub fn new(config: EncoderConfig, features: &FeatureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let extractor = FeatureExtractor::new(features)?;
        let mut r = rng::stream(seed, "encoder-init", &[]);
        let mut params = ParamSet::new();
        let k = config.kernel;
        let mut c_prev = features.n_mels;
        for (i, &c) in config.channels.iter().enumerate() {
            params.insert_normal(&format!("stage{i}.conv_in.w"), &[c, c_prev, k], (2.0 / (c_prev * k) as f64).sqrt(), &mut r);
            params.insert(format!("stage{i}.conv_in.b"), Tensor::zeros(vec![c]));
            params.insert_normal(&format!("stage{i}.conv_res.w"), &[c, c, k], (1.0 / (c * k) as f64).sqrt(), &mut r);
            params.insert(format!("stage{i}.conv_res.b"), Tensor::zeros(vec![c]));
            c_prev = c;
        }
        let pooled = 2 * c_prev;
        params.insert_normal("proj.w", &[config.embedding_dim, pooled], (1.0 / pooled as f64).sqrt(), &mut r);
        params.insert("proj.b", Tensor::zeros(vec![config.embedding_dim, 1]));
        params.insert_normal("head.w", &[config.n_speakers, config.embedding_dim], 1.0, &mut r);
        params.insert("frozen.input_mean", Tensor::zeros(vec![features.n_mels, 1]));
        params.insert("frozen.input_std", Tensor::full(vec![features.n_mels, 1], 1.0));
        Ok(Self {
            config,
            extractor,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        self.extractor.config()
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    fn check_length(&self, len: usize) -> Result<()> {
        let frames = self.feature_config().frame_count(len);
        if frames < MIN_FRAMES {
            return Err(input_err(format!(
                "input of {len} samples yields {frames} frames; at least {MIN_FRAMES} are required"
            )));
        }
        Ok(())
    }

    /// Embedding `[embedding_dim, 1]` of log-mel features `[frames, n_mels]`.
    pub fn embed_features(&self, g: &mut Graph, p: &Bound, feats: Var) -> Result<Var> {
        let frames = g.shape(feats)[0];
        let mut h = g.transpose(feats)?;
        let mean = g.expand(p.var("frozen.input_mean"), 1, frames)?;
        let std = g.expand(p.var("frozen.input_std"), 1, frames)?;
        h = g.sub(h, mean)?;
        h = g.div(h, std)?;
        let pad = self.config.kernel / 2;
        for i in 0..self.config.channels.len() {
            let w = p.var(&format!("stage{i}.conv_in.w"));
            let b = p.var(&format!("stage{i}.conv_in.b"));
            h = g.conv1d(h, w, Some(b), pad, 1)?;
            h = g.relu(h)?;
            let w = p.var(&format!("stage{i}.conv_res.w"));
            let b = p.var(&format!("stage{i}.conv_res.b"));
            let r = g.conv1d(h, w, Some(b), pad, 1)?;
            let r = g.relu(r)?;
            h = g.add(h, r)?;
        }
        let mean = g.mean_axis(h, 1)?;
        let std = g.std_axis(h, 1)?;
        let pooled = g.concat(&[mean, std], 0)?;
        let e = g.matmul(p.var("proj.w"), pooled)?;
        Ok(g.add(e, p.var("proj.b"))?)
    }

    /// Embedding of a rank-1 waveform node; differentiable w.r.t. the samples.
    pub fn embed_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        self.check_length(g.value(x).numel())?;
        let feats = self.extractor.log_mel(g, x)?;
        self.embed_features(g, p, feats)
    }

    /// Unnormalized embedding of `wave`.
    pub fn embed(&self, wave: &Waveform) -> Result<Vec<f64>> {
        self.check_length(wave.len())?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(Tensor::vector(wave.samples().to_vec()));
        let e = self.embed_graph(&mut g, &p, x)?;
        Ok(g.value(e).data().to_vec())
    }

    pub fn features(&self, wave: &Waveform) -> Result<Tensor> {
        self.check_length(wave.len())?;
        self.extractor.log_mel_values(wave)
    }

    /// ArcFace cross-entropy of one embedding node against `label`.
    pub fn arcface_loss(&self, g: &mut Graph, p: &Bound, emb: Var, label: usize) -> Result<Var> {
        arcface_loss(g, p.var("head.w"), emb, label, self.config.margin, self.config.scale)
    }

    /// Scaled cosine logits `s * cos(theta_j)` (no margin) for an embedding.
    pub fn logits(&self, emb: &[f64]) -> Result<Vec<f64>> {
        let w = self.params.get("head.w")?;
        let e = self.config.embedding_dim;
        let en = l2_norm(emb);
        if en == 0.0 {
            return Err(input_err("zero embedding"));
        }
        Ok(w.data()
            .chunks(e)
            .map(|row| {
                let dot: f64 = row.iter().zip(emb).map(|(a, b)| a * b).sum();
                self.config.scale * dot / (l2_norm(row) * en)
            })
            .collect())
    }

    /// Sets the frozen per-mel normalization from training features.
    pub fn fit_input_norm(&mut self, feats: &[&Tensor]) -> Result<()> {
        let n_mels = self.feature_config().n_mels;
        let mut sum = vec![0.0; n_mels];
        let mut sq = vec![0.0; n_mels];
        let mut count = 0usize;
        for f in feats {
            for row in f.data().chunks(n_mels) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                count += 1;
            }
        }
        if count == 0 {
            return Err(input_err("no frames to fit normalization"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std: Vec<f64> = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count as f64 - m * m).max(1e-6).sqrt())
            .collect();
        self.params.insert("frozen.input_mean", Tensor::new(vec![n_mels, 1], mean)?);
        self.params.insert("frozen.input_std", Tensor::new(vec![n_mels, 1], std)?);
        Ok(())
    }

    /// One Adam step on the weighted mean ArcFace loss of `batch`; returns the mean loss.
    pub fn train_step(&mut self, batch: &[FeatureSample], opt: &mut Adam, lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(input_err("empty batch"));
        }
        let results: Vec<(f64, BTreeMap<String, Tensor>)> = batch
            .par_iter()
            .map(|s| -> Result<_> {
                let mut g = Graph::new();
                let p = self.bind(&mut g, true);
                let f = g.constant(s.features.clone());
                let e = self.embed_features(&mut g, &p, f)?;
                let l = self.arcface_loss(&mut g, &p, e, s.label)?;
                let value = g.value(l).item()?;
                let weighted = g.scale(l, s.weight)?;
                let mut grads = g.backward(weighted)?;
                Ok((value, p.collect(&mut grads)))
            })
            .collect::<Result<_>>()?;
        let mean_loss = results.iter().map(|r| r.0).sum::<f64>() / batch.len() as f64;
        let grads = average_grads(results.into_iter().map(|r| r.1).collect());
        opt.update(&mut self.params, &grads, lr)?;
        Ok(mean_loss)
    }

    /// Mean ArcFace loss over `samples` without updating parameters.
    pub fn mean_loss(&self, samples: &[FeatureSample]) -> Result<f64> {
        let losses: Vec<f64> = samples
            .par_iter()
            .map(|s| -> Result<f64> {
                let mut g = Graph::new();
                let p = self.bind(&mut g, false);
                let f = g.constant(s.features.clone());
                let e = self.embed_features(&mut g, &p, f)?;
                let l = self.arcface_loss(&mut g, &p, e, s.label)?;
                Ok(g.value(l).item()?)
            })
            .collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
    }

    /// Checkpoint records: parameters plus `meta.*` configuration.
    pub fn to_params(&self) -> ParamSet {
        let mut p = self.params.clone();
        let c = &self.config;
        p.insert("meta.channels", Tensor::vector(c.channels.iter().map(|&v| v as f64).collect()));
        p.insert(
            "meta.encoder",
            Tensor::vector(vec![c.kernel as f64, c.embedding_dim as f64, c.n_speakers as f64, c.margin, c.scale]),
        );
        let f = self.feature_config();
        p.insert(
            "meta.features",
            Tensor::vector(vec![
                f64::from(f.sample_rate),
                f.frame_len as f64,
                f.hop as f64,
                f.n_fft as f64,
                f.n_mels as f64,
                f.fmin,
                f.fmax,
            ]),
        );
        p
    }

    pub fn from_params(all: &ParamSet) -> Result<Self> {
        let channels = all.get("meta.channels")?.data().iter().map(|&v| v as usize).collect();
        let enc = all.get("meta.encoder")?.data().to_vec();
        let feat = all.get("meta.features")?.data().to_vec();
        if enc.len() != 5 || feat.len() != 7 {
            return Err(input_err("malformed encoder metadata"));
        }
        let config = EncoderConfig {
            channels,
            kernel: enc[0] as usize,
            embedding_dim: enc[1] as usize,
            n_speakers: enc[2] as usize,
            margin: enc[3],
            scale: enc[4],
        };
        let features = FeatureConfig {
            sample_rate: feat[0] as u32,
            frame_len: feat[1] as usize,
            hop: feat[2] as usize,
            n_fft: feat[3] as usize,
            n_mels: feat[4] as usize,
            fmin: feat[5],
            fmax: feat[6],
        };
        let mut model = Self::new(config, &features, 0)?;
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
        for name in names {
            let t = all.get(&name)?;
            if t.shape() != model.params.get(&name)?.shape() {
                return Err(input_err(format!("shape mismatch for `{name}`")));
            }
            model.params.insert(name, t.clone());
        }
        Ok(model)
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// ArcFace loss: cross-entropy over `s * cos(theta_j + m * [j == label])`.
///
/// `cos(theta + m)` is expanded as `cos(theta) cos(m) - sin(theta) sin(m)`
/// with `sin(theta) = sqrt(1 - cos^2(theta))` clamped into `[1e-12, 1]`
/// before the root.
pub fn arcface_loss(g: &mut Graph, weight: Var, emb: Var, label: usize, margin: f64, scale: f64) -> Result<Var> {
    let ws = g.shape(weight).to_vec();
    let (n, dim) = (ws[0], ws[1]);
    if label >= n {
        return Err(input_err(format!("label {label} out of range for {n} classes")));
    }
    let e = g.reshape(emb, &[dim, 1])?;
    let en = g.norm(e)?;
    let e = g.div(e, en)?;
    let sq = g.square(weight)?;
    let row = g.sum_axis(sq, 1)?;
    let row = g.sqrt(row)?;
    let row = g.expand(row, 1, dim)?;
    let wn = g.div(weight, row)?;
    let cos = g.matmul(wn, e)?;

    let cos_y = g.slice(cos, 0, label, label + 1)?;
    let c2 = g.square(cos_y)?;
    let s2 = g.scale(c2, -1.0)?;
    let s2 = g.shift(s2, 1.0)?;
    let s2 = g.clamp(s2, SIN_SQ_FLOOR, 1.0)?;
    let sin_y = g.sqrt(s2)?;
    let a = g.scale(cos_y, margin.cos())?;
    let b = g.scale(sin_y, margin.sin())?;
    let phi = g.sub(a, b)?;

    let mut parts = Vec::with_capacity(3);
    if label > 0 {
        parts.push(g.slice(cos, 0, 0, label)?);
    }
    parts.push(phi);
    if label + 1 < n {
        parts.push(g.slice(cos, 0, label + 1, n)?);
    }
    let logits = g.concat(&parts, 0)?;
    let logits = g.scale(logits, scale)?;
    softmax_cross_entropy(g, logits, label)
}

/// `logsumexp(logits) - logits[label]` for a `[n, 1]` logit column.
pub fn softmax_cross_entropy(g: &mut Graph, logits: Var, label: usize) -> Result<Var> {
    let max = g.value(logits).data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted = g.shift(logits, -max)?;
    let ex = g.exp(shifted)?;
    let sum = g.sum(ex)?;
    let lse = g.log(sum)?;
    let lse = g.shift(lse, max)?;
    let target = g.slice(logits, 0, label, label + 1)?;
    let target = g.reshape(target, &[1])?;
    Ok(g.sub(lse, target)?)
}

/// Trains from scratch (after fitting input normalization) on labelled waveforms.
///
/// Requires at least two utterances per label present.
pub fn train(model: &mut EmbeddingModel, data: &[(&Waveform, usize)], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(input_err("empty training corpus"));
    }
    let mut counts = BTreeMap::new();
    for (_, l) in data {
        if *l >= model.config.n_speakers {
            return Err(input_err(format!("label {l} out of range")));
        }
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    if let Some((l, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(input_err(format!("speaker {l} has fewer than 2 utterances")));
    }
    let noisy = augment(data, cfg)?;
    let samples: Vec<FeatureSample> = data
        .iter()
        .copied()
        .chain(noisy.iter().map(|(w, l)| (w, *l)))
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(w, l)| {
            Ok(FeatureSample {
                features: model.features(w)?,
                label: *l,
                weight: 1.0,
            })
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = samples.iter().map(|s| &s.features).collect();
    model.fit_input_norm(&refs)?;
    fit(model, &samples, cfg)
}

/// Noisy copies of `data`: white noise with a std drawn uniformly from
/// `[0, augment_noise)` per copy, clipped to the valid range.
fn augment(data: &[(&Waveform, usize)], cfg: &TrainConfig) -> Result<Vec<(Waveform, usize)>> {
    if cfg.augment_copies == 0 {
        return Ok(Vec::new());
    }
    if !(0.0..0.5).contains(&cfg.augment_noise) {
        return Err(config_err("augment_noise must lie in [0, 0.5)"));
    }
    let mut r = rng::stream(cfg.seed, "encoder-augment", &[]);
    let mut out = Vec::with_capacity(data.len() * cfg.augment_copies);
    for (w, l) in data {
        for _ in 0..cfg.augment_copies {
            let std = cfg.augment_noise * r.random::<f64>();
            let x = w
                .samples()
                .iter()
                .map(|v| (v + std * Distribution::<f64>::sample(&StandardNormal, &mut r)).clamp(-1.0, 1.0))
                .collect();
            out.push((Waveform::new(x, w.sample_rate()), *l));
        }
    }
    Ok(out)
}

/// Mini-batch Adam over precomputed features with a cosine learning-rate decay.
pub fn fit(model: &mut EmbeddingModel, samples: &[FeatureSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(config_err("epochs and batch_size must be positive"));
    }
    let mut r = rng::stream(cfg.seed, "encoder-train", &[]);
    let mut opt = Adam::default();
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches_per_epoch;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<FeatureSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let lr = cosine_lr(cfg.lr, cfg.lr_end, opt.steps() as usize, total);
            sum += model.train_step(&batch, &mut opt, lr)? * batch.len() as f64;
        }
        epoch_losses.push(sum / samples.len() as f64);
    }
    Ok(TrainReport { epoch_losses })
}

/// Per-speaker mean embedding, unit-normalized: `[n_speakers][embedding_dim]`.
pub fn speaker_centroids(model: &EmbeddingModel, enroll: &[(&Waveform, usize)], n_speakers: usize) -> Result<Vec<Vec<f64>>> {
    let embs: Vec<Vec<f64>> = enroll
        .par_iter()
        .map(|(w, _)| model.embed(w))
        .collect::<Result<_>>()?;
    let dim = model.config.embedding_dim;
    let mut sums = vec![vec![0.0; dim]; n_speakers];
    let mut counts = vec![0usize; n_speakers];
    for ((_, l), e) in enroll.iter().zip(&embs) {
        if *l >= n_speakers {
            return Err(input_err(format!("enrollment label {l} out of range")));
        }
        counts[*l] += 1;
        for (s, v) in sums[*l].iter_mut().zip(e) {
            *s += v;
        }
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(input_err(format!("speaker {missing} has no enrollment audio")));
    }
    sums.into_iter()
        .enumerate()
        .map(|(s, mut v)| {
            let n = l2_norm(&v);
            if n == 0.0 {
                return Err(input_err(format!("speaker {s} centroid is zero")));
            }
            v.iter_mut().for_each(|x| *x /= n);
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> EmbeddingModel {
        EmbeddingModel::new(EncoderConfig::default(), &FeatureConfig::default(), 1).unwrap()
    }

    fn tone(len: usize, f: f64) -> Waveform {
        Waveform::new(
            (0..len)
                .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / 8000.0).sin())
                .collect(),
            8000,
        )
    }

    #[test]
    fn embed_is_deterministic_and_sized() {
        let m = model();
        let w = tone(1600, 220.0);
        let a = m.embed(&w).unwrap();
        assert_eq!(a.len(), 32);
        assert_eq!(a, m.embed(&w).unwrap());
    }

    #[test]
    fn too_short_input_rejected() {
        let m = model();
        // 3 frames only
        assert!(m.embed(&tone(360, 100.0)).is_err());
        assert!(m.embed(&tone(440, 100.0)).is_ok());
    }

    #[test]
    fn constant_features_give_finite_embedding() {
        let m = model();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false);
        let f = g.constant(Tensor::full(vec![10, 40], -3.0));
        let e = m.embed_features(&mut g, &p, f).unwrap();
        assert!(g.value(e).all_finite());
    }

    #[test]
    fn zero_margin_equals_scaled_cosine_softmax() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 2.0, -1.0, 1.0]).unwrap());
        let e = g.constant(Tensor::new(vec![2, 1], vec![0.3, 0.8]).unwrap());
        let arc = arcface_loss(&mut g, w, e, 1, 0.0, 32.0).unwrap();
        let arc = g.value(arc).item().unwrap();
        // direct softmax over s * cos
        let en = (0.3f64 * 0.3 + 0.8 * 0.8).sqrt();
        let rows = [(1.0, 0.0), (0.0, 2.0), (-1.0, 1.0)];
        let logits: Vec<f64> = rows
            .iter()
            .map(|(a, b)| 32.0 * (a * 0.3 + b * 0.8) / ((a * a + b * b) as f64).sqrt() / en)
            .collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        assert!((arc - (lse - logits[1])).abs() < 1e-12);
    }

    #[test]
    fn aligned_embedding_true_logit_is_s_cos_m() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let e = g.constant(Tensor::new(vec![2, 1], vec![2.0, 0.0]).unwrap());
        let l = arcface_loss(&mut g, w, e, 0, 0.2, 32.0).unwrap();
        // logits: [32 cos(0.2) (up to the sin floor), 0]
        let expected = (1.0 + (-32.0 * 0.2f64.cos()).exp()).ln();
        assert!((g.value(l).item().unwrap() - expected).abs() < 1e-4);
    }

    #[test]
    fn invalid_label_rejected() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::full(vec![2, 2], 1.0));
        let e = g.constant(Tensor::full(vec![2, 1], 1.0));
        assert!(arcface_loss(&mut g, w, e, 2, 0.2, 32.0).is_err());
    }

    #[test]
    fn checkpoint_params_roundtrip() {
        let m = model();
        let back = EmbeddingModel::from_params(&m.to_params()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn centroids_are_unit_and_match_single_utterance() {
        let m = model();
        let a = tone(1600, 150.0);
        let b = tone(1600, 310.0);
        let c = speaker_centroids(&m, &[(&a, 0), (&b, 1)], 2).unwrap();
        for v in &c {
            assert!((l2_norm(v) - 1.0).abs() < 1e-12);
        }
        let ea = m.embed(&a).unwrap();
        let n = l2_norm(&ea);
        for (x, y) in c[0].iter().zip(&ea) {
            assert!((x - y / n).abs() < 1e-12);
        }
        let dup = speaker_centroids(&m, &[(&a, 0), (&a, 0), (&b, 1)], 2).unwrap();
        for (x, y) in dup[0].iter().zip(&c[0]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(speaker_centroids(&m, &[(&a, 0)], 2).is_err());
    }

    #[test]
    fn train_rejects_empty_and_singletons() {
        let mut m = model();
        assert!(train(&mut m, &[], &TrainConfig::default()).is_err());
        let a = tone(1600, 150.0);
        assert!(train(&mut m, &[(&a, 0)], &TrainConfig::default()).is_err());
    }
}

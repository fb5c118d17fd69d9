//! Adversarial fine-tuning: each mini-batch is attacked against the current
//! weights and the adversarial copies are trained with their source labels
//! next to the clean originals.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attacks::{assign_targets, generate, Attack, AttackSource};
use crate::audio::Waveform;
use crate::encoder::{speaker_centroids, EmbeddingModel, FeatureSample};
use crate::error::{config_err, input_err, Result};
use crate::params::{cosine_lr, Adam};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_end: f64,
    /// Loss weight of the adversarial half; 0 gives a clean-only control run.
    pub adv_weight: f64,
    pub eps_fraction: f64,
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 2,
            lr: 5e-3,
            lr_end: 1e-5,
            adv_weight: 1.0,
            eps_fraction: crate::attacks::DEFAULT_EPS_FRACTION,
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("adversarial training needs epochs >= 1 and batch_size >= 1"));
        }
        if self.adv_weight < 0.0 {
            return Err(config_err("adv_weight must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainReport {
    pub method: String,
    pub epoch_losses: Vec<f64>,
    /// Mean attack loss of the generated examples per epoch.
    pub epoch_attack_losses: Vec<f64>,
    /// Set when the starting model classifies its training data at chance level.
    pub untrained_warning: bool,
}

/// One labelled waveform of a mixed batch.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedItem {
    pub wave: Waveform,
    pub label: usize,
    pub adversarial: bool,
}

/// Attacks every item of `batch` toward a random other speaker and returns
/// the clean items followed by their adversarial copies, all with source labels.
pub fn make_adv_batch(
    model: &EmbeddingModel,
    attack: &dyn Attack,
    batch: &[(&Waveform, usize)],
    references: &[Vec<f64>],
    eps_fraction: f64,
    seed: u64,
) -> Result<(Vec<MixedItem>, f64)> {
    if batch.is_empty() {
        return Err(input_err("empty batch"));
    }
    let labels: Vec<usize> = batch.iter().map(|(_, l)| *l).collect();
    let targets = assign_targets(&labels, references.len(), seed)?;
    let ids: Vec<String> = (0..batch.len()).map(|i| format!("batch{i}")).collect();
    let sources: Vec<AttackSource<'_>> = batch
        .iter()
        .zip(&ids)
        .map(|((w, l), id)| AttackSource { id, wave: w, label: *l })
        .collect();
    let adv = generate(attack, model, &sources, &targets, references, eps_fraction)?;
    let mean_loss = adv.iter().map(|a| a.final_loss).sum::<f64>() / adv.len() as f64;
    let mut out: Vec<MixedItem> = batch
        .iter()
        .map(|(w, l)| MixedItem {
            wave: (*w).clone(),
            label: *l,
            adversarial: false,
        })
        .collect();
    out.extend(adv.iter().map(|a| MixedItem {
        wave: a.adversarial(),
        label: a.source_label,
        adversarial: true,
    }));
    Ok((out, mean_loss))
}

fn training_accuracy(model: &EmbeddingModel, data: &[(&Waveform, usize)]) -> Result<f64> {
    let mut correct = 0usize;
    for (w, l) in data {
        let logits = model.logits(&model.embed(w)?)?;
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
        correct += usize::from(best.0 == *l);
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fine-tunes `model` in place. Attack targets are the centroids of
/// `enroll` under the current weights, recomputed before every batch.
pub fn adversarial_finetune(
    model: &mut EmbeddingModel,
    attack: &dyn Attack,
    train: &[(&Waveform, usize)],
    enroll: &[(&Waveform, usize)],
    cfg: &AdvTrainConfig,
) -> Result<AdvTrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(input_err("empty training set"));
    }
    let n_speakers = model.config().n_speakers;
    let chance = 1.0 / n_speakers as f64;
    let untrained_warning = training_accuracy(model, train)? <= 2.0 * chance;
    if untrained_warning {
        log::warn!("adversarial fine-tuning starts from a model at chance level");
    }

    let mut r = rng::stream(cfg.seed, "adv-train", &[]);
    let mut opt = Adam::default();
    let total = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut epoch_attack_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut sum, mut count, mut atk_sum, mut batches) = (0.0, 0usize, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Waveform, usize)> = chunk.iter().map(|&i| train[i]).collect();
            let references = speaker_centroids(model, enroll, n_speakers)?;
            let seed = rng::derive(cfg.seed, &[rng::tag("adv-batch"), epoch as u64, step]);
            let (items, atk_loss) = make_adv_batch(model, attack, &batch, &references, cfg.eps_fraction, seed)?;
            let samples = items
                .iter()
                .map(|it| {
                    Ok(FeatureSample {
                        features: model.features(&it.wave)?,
                        label: it.label,
                        weight: if it.adversarial { cfg.adv_weight } else { 1.0 },
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = cosine_lr(cfg.lr, cfg.lr_end, step as usize, total);
            sum += model.train_step(&samples, &mut opt, lr)? * samples.len() as f64;
            count += samples.len();
            atk_sum += atk_loss;
            batches += 1;
            step += 1;
        }
        epoch_losses.push(sum / count as f64);
        epoch_attack_losses.push(atk_sum / batches as f64);
        log::info!(
            "adv-train epoch {}: loss {:.4}, attack loss {:.4}",
            epoch + 1,
            epoch_losses[epoch],
            epoch_attack_losses[epoch]
        );
    }
    Ok(AdvTrainReport {
        method: attack.name().to_string(),
        epoch_losses,
        epoch_attack_losses,
        untrained_warning,
    })
}

//! Runs a defense over adversarial and clean audio and aggregates the
//! measurements into report rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AdvExample;
use crate::audio::Waveform;
use crate::defense::Defense;
use crate::encoder::EmbeddingModel;
use crate::error::{input_err, Result};
use crate::metrics::{cosine, eer_trials, judge, pairwise_trials, EvalRow, Outcome, SampleResult};
use crate::rng;

/// What "most similar speaker" is measured against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReferenceMode {
    /// Per-speaker enrollment centroids.
    #[default]
    Centroids,
    /// Clean embeddings of the evaluated sources themselves; the prediction
    /// is the label of the nearest one.
    BatchPeers,
}

fn nearest_label(emb: &[f64], peers: &[(usize, Vec<f64>)]) -> Result<usize> {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (label, e) in peers {
        let c = cosine(emb, e)?;
        if c > best.1 {
            best = (*label, c);
        }
    }
    if peers.is_empty() {
        return Err(input_err("no peer embeddings"));
    }
    Ok(best.0)
}

/// Processes each adversarial example with `defense` and judges the result.
/// `sim_src` compares with the clean source utterance, `sim_tgt` with the
/// target centroid.
pub fn evaluate_adversarial(
    model: &EmbeddingModel,
    defense: &dyn Defense,
    examples: &[AdvExample],
    centroids: &[Vec<f64>],
    mode: ReferenceMode,
    seed: u64,
) -> Result<Vec<SampleResult>> {
    if examples.is_empty() {
        return Err(input_err("empty adversarial set"));
    }
    let clean: Vec<Vec<f64>> = examples.par_iter().map(|e| model.embed(&e.x)).collect::<Result<_>>()?;
    let peers: Vec<(usize, Vec<f64>)> = examples.iter().map(|e| e.source_label).zip(clean.iter().cloned()).collect();
    examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let processed = defense.process(&e.adversarial(), rng::derive(seed, &[rng::tag("eval-adv"), i as u64]))?;
            let emb = model.embed(&processed)?;
            let target = centroids
                .get(e.target_label)
                .ok_or_else(|| input_err(format!("no centroid for target {}", e.target_label)))?;
            let outcome = match mode {
                ReferenceMode::Centroids => judge(&emb, centroids, e.source_label, e.target_label)?,
                ReferenceMode::BatchPeers => {
                    let p = nearest_label(&emb, &peers)?;
                    if p == e.target_label {
                        Outcome::AttackSuccess
                    } else if p == e.source_label {
                        Outcome::DefenseSuccess
                    } else {
                        Outcome::Neither
                    }
                }
            };
            Ok(SampleResult {
                source: e.source_label,
                target: e.target_label,
                outcome,
                sim_src: cosine(&emb, &clean[i])?,
                sim_tgt: cosine(&emb, target)?,
            })
        })
        .collect()
}

/// EER over all pairs of the defended clean utterances.
pub fn clean_trial_eer(model: &EmbeddingModel, defense: &dyn Defense, utterances: &[(usize, &Waveform)], seed: u64) -> Result<f64> {
    let items: Vec<(usize, Vec<f64>)> = utterances
        .par_iter()
        .enumerate()
        .map(|(i, (label, w))| {
            let processed = defense.process(w, rng::derive(seed, &[rng::tag("eval-clean"), i as u64]))?;
            Ok((*label, model.embed(&processed)?))
        })
        .collect::<Result<_>>()?;
    eer_trials(&pairwise_trials(&items)?)
}

/// One report row from a defense applied to an adversarial set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_defense(
    defense_name: &str,
    attack_name: &str,
    model: &EmbeddingModel,
    defense: &dyn Defense,
    examples: &[AdvExample],
    centroids: &[Vec<f64>],
    clean_trials: &[(usize, &Waveform)],
    mode: ReferenceMode,
    seed: u64,
) -> Result<EvalRow> {
    let samples = if examples.is_empty() {
        Vec::new()
    } else {
        evaluate_adversarial(model, defense, examples, centroids, mode, seed)?
    };
    let e = clean_trial_eer(model, defense, clean_trials, seed)?;
    Ok(EvalRow::from_samples(defense_name, attack_name, e, &samples))
}

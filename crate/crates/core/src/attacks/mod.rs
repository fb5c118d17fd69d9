//! Targeted white-box attacks under an L-infinity budget.
//!
//! Every attack minimizes an [`AttackObjective`] over a perturbation `delta`
//! starting from zero, projecting after each step so that `|delta| <= eps`
//! and `x + delta` stays inside `[-1, 1]`. Attacks are registered by name in
//! an [`AttackRegistry`] and selected at runtime.

mod adam;
mod pgd;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use spkguard_autograd::{Graph, Tensor};

use crate::audio::Waveform;
use crate::encoder::EmbeddingModel;
use crate::error::{config_err, input_err, CoreError, Result};
use crate::params::ParamSet;
use crate::rng;

pub use adam::{AdamAttack, AdamAttackConfig};
pub use pgd::{PgdAttack, PgdConfig};

/// Fraction of the per-utterance peak amplitude used as the budget.
pub const DEFAULT_EPS_FRACTION: f64 = 0.05;

/// `end + (start - end) * (1 + cos(pi * t / total)) / 2`.
pub fn cosine_decay(start: f64, end: f64, t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(config_err("cosine_decay needs total >= 1"));
    }
    if t > total {
        return Err(config_err(format!("cosine_decay step {t} beyond total {total}")));
    }
    Ok(end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos()))
}

/// Clamps `delta` into `[-eps, eps]` and then shrinks it so `x + delta` lies
/// in `[-1, 1]` exactly under floating-point addition.
pub fn linf_project(delta: &mut [f64], x: &[f64], eps: f64) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let mut v = d.clamp(-eps, eps);
        v = v.clamp(-1.0 - xi, 1.0 - xi);
        while xi + v > 1.0 {
            v = v.next_down();
        }
        while xi + v < -1.0 {
            v = v.next_up();
        }
        *d = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub epsilon: f64,
}

impl AttackBudget {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) || !epsilon.is_finite() {
            return Err(config_err(format!("epsilon {epsilon} must be positive")));
        }
        Ok(Self { epsilon })
    }

    /// `fraction * max|x|`.
    pub fn from_fraction(x: &[f64], fraction: f64) -> Result<Self> {
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self::new(fraction * peak)
    }
}

/// A differentiable scalar objective over an input vector.
pub trait AttackObjective: Sync {
    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn loss(&self, x: &[f64]) -> Result<f64> {
        Ok(self.loss_and_grad(x)?.0)
    }
}

/// `1 - cos(embed(x), target)`.
pub struct EmbeddingObjective<'a> {
    pub model: &'a EmbeddingModel,
    pub target: &'a [f64],
}

impl AttackObjective for EmbeddingObjective<'_> {
    fn loss_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let p = self.model.bind(&mut g, false);
        let xv = g.variable(Tensor::vector(x.to_vec()));
        let e = self.model.embed_graph(&mut g, &p, xv)?;
        let t = g.constant(Tensor::new(vec![self.target.len(), 1], self.target.to_vec())?);
        let c = g.cosine(e, t)?;
        let neg = g.scale(c, -1.0)?;
        let loss = g.shift(neg, 1.0)?;
        let value = g.value(loss).item()?;
        let mut grads = g.backward(loss)?;
        let grad = grads.take(xv).expect("input requires grad").into_data();
        Ok((value, grad))
    }
}

/// `1 - cos(embed(x), target)` evaluated without gradients.
pub fn attack_loss(model: &EmbeddingModel, x_adv: &Waveform, target: &[f64]) -> Result<f64> {
    let e = model.embed(x_adv)?;
    Ok(1.0 - crate::metrics::cosine(&e, target)?)
}

/// Result of one attack run.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTrace {
    pub delta: Vec<f64>,
    /// Objective at each iterate, `iterations + 1` entries (first is at `delta = 0`).
    pub losses: Vec<f64>,
    pub iterations: usize,
}

impl AttackTrace {
    pub fn final_loss(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }
}

pub trait Attack: Send + Sync {
    fn name(&self) -> &str;

    fn iterations(&self) -> usize;

    /// Runs the attack from `delta = 0` and returns the projected perturbation.
    fn run(&self, x: &[f64], objective: &dyn AttackObjective, budget: AttackBudget) -> Result<AttackTrace>;
}

/// Shared loop: `step` turns the gradient at iterate `t` into an update of
/// `delta`, which is then projected.
pub(crate) fn iterate(
    x: &[f64],
    objective: &dyn AttackObjective,
    budget: AttackBudget,
    iterations: usize,
    mut step: impl FnMut(usize, &[f64], &mut [f64]) -> Result<()>,
) -> Result<AttackTrace> {
    if iterations == 0 {
        return Err(config_err("attack needs at least one iteration"));
    }
    let mut delta = vec![0.0; x.len()];
    let mut xd = x.to_vec();
    let mut losses = Vec::with_capacity(iterations + 1);
    for t in 0..iterations {
        let (loss, grad) = objective.loss_and_grad(&xd)?;
        losses.push(loss);
        step(t, &grad, &mut delta)?;
        linf_project(&mut delta, x, budget.epsilon);
        for ((o, xi), d) in xd.iter_mut().zip(x).zip(&delta) {
            *o = xi + d;
        }
    }
    losses.push(objective.loss(&xd)?);
    Ok(AttackTrace {
        delta,
        losses,
        iterations,
    })
}

/// Attacks selectable by name.
#[derive(Clone, Default)]
pub struct AttackRegistry {
    entries: BTreeMap<String, Arc<dyn Attack>>,
}

impl AttackRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `pgd` and `adam` with their default configurations.
    pub fn with_defaults() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(PgdAttack::new(PgdConfig::default()).expect("valid defaults")));
        r.register(Arc::new(AdamAttack::new(AdamAttackConfig::default()).expect("valid defaults")));
        r
    }

    pub fn register(&mut self, attack: Arc<dyn Attack>) {
        self.entries.insert(attack.name().to_string(), attack);
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Attack>> {
        self.entries.get(name).cloned().ok_or_else(|| CoreError::UnknownStrategy {
            kind: "attack",
            name: name.to_string(),
            available: self.names().join(", "),
        })
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// A generated adversarial example. `x + delta` is the adversarial waveform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvExample {
    pub source_id: String,
    pub source_label: usize,
    pub target_label: usize,
    pub epsilon: f64,
    pub method: String,
    pub iterations: usize,
    pub final_loss: f64,
    #[serde(skip)]
    pub x: Waveform,
    #[serde(skip)]
    pub delta: Vec<f64>,
}

impl AdvExample {
    pub fn adversarial(&self) -> Waveform {
        let s = self.x.samples().iter().zip(&self.delta).map(|(a, b)| a + b).collect();
        Waveform::new(s, self.x.sample_rate())
    }
}

/// Source utterance for attack generation.
#[derive(Clone, Copy, Debug)]
pub struct AttackSource<'a> {
    pub id: &'a str,
    pub wave: &'a Waveform,
    pub label: usize,
}

/// Uniform target per source, never equal to it; deterministic given `seed`.
pub fn assign_targets(labels: &[usize], n_speakers: usize, seed: u64) -> Result<Vec<usize>> {
    if n_speakers < 2 {
        return Err(input_err("target assignment needs at least 2 speakers"));
    }
    let mut r = rng::stream(seed, "assign-targets", &[]);
    labels
        .iter()
        .map(|&y| {
            if y >= n_speakers {
                return Err(input_err(format!("label {y} out of range")));
            }
            let k = r.random_range(0..n_speakers - 1);
            Ok(if k >= y { k + 1 } else { k })
        })
        .collect()
}

/// Attacks each source toward `references[target]` in parallel.
pub fn generate(
    attack: &dyn Attack,
    model: &EmbeddingModel,
    sources: &[AttackSource<'_>],
    targets: &[usize],
    references: &[Vec<f64>],
    eps_fraction: f64,
) -> Result<Vec<AdvExample>> {
    if sources.len() != targets.len() {
        return Err(input_err("sources and targets differ in length"));
    }
    sources
        .par_iter()
        .zip(targets)
        .map(|(s, &t)| {
            if s.label == t {
                return Err(input_err(format!("target equals source label {t} for `{}`", s.id)));
            }
            let target = references
                .get(t)
                .ok_or_else(|| input_err(format!("no reference for target {t}")))?;
            let budget = AttackBudget::from_fraction(s.wave.samples(), eps_fraction)?;
            let objective = EmbeddingObjective { model, target };
            let trace = attack.run(s.wave.samples(), &objective, budget)?;
            Ok(AdvExample {
                source_id: s.id.to_string(),
                source_label: s.label,
                target_label: t,
                epsilon: budget.epsilon,
                method: attack.name().to_string(),
                iterations: trace.iterations,
                final_loss: trace.final_loss(),
                x: s.wave.clone(),
                delta: trace.delta,
            })
        })
        .collect()
}

/// Single-example convenience wrapper around [`generate`].
pub fn attack_one(
    attack: &dyn Attack,
    model: &EmbeddingModel,
    source: AttackSource<'_>,
    target: usize,
    references: &[Vec<f64>],
    eps_fraction: f64,
) -> Result<AdvExample> {
    Ok(generate(attack, model, &[source], &[target], references, eps_fraction)?.remove(0))
}

/// Writes `adv.aemb` (lossless sources and perturbations), `adv.json`
/// (metadata list) and per-example `wav/<n>.wav` plus `wav/<n>.json`.
pub fn save_adv_set(examples: &[AdvExample], dir: &Path) -> Result<()> {
    let wav_dir = dir.join("wav");
    fs::create_dir_all(&wav_dir)?;
    let mut p = ParamSet::new();
    for (i, e) in examples.iter().enumerate() {
        p.insert(format!("{i:05}.x"), Tensor::vector(e.x.samples().to_vec()));
        p.insert(format!("{i:05}.delta"), Tensor::vector(e.delta.clone()));
        p.insert(format!("{i:05}.sample_rate"), Tensor::scalar(f64::from(e.x.sample_rate())));
        e.adversarial().write_wav(&wav_dir.join(format!("{i:05}.wav")))?;
        fs::write(wav_dir.join(format!("{i:05}.json")), serde_json::to_string_pretty(e)?)?;
    }
    crate::checkpoint::save(&p, &dir.join("adv.aemb"))?;
    fs::write(dir.join("adv.json"), serde_json::to_string_pretty(examples)?)?;
    Ok(())
}

pub fn load_adv_set(dir: &Path) -> Result<Vec<AdvExample>> {
    let mut meta: Vec<AdvExample> = serde_json::from_str(&fs::read_to_string(dir.join("adv.json"))?)?;
    let p = crate::checkpoint::load(&dir.join("adv.aemb"))?;
    for (i, e) in meta.iter_mut().enumerate() {
        let sr = p.get(&format!("{i:05}.sample_rate"))?.item()? as u32;
        e.x = Waveform::new(p.get(&format!("{i:05}.x"))?.data().to_vec(), sr);
        e.delta = p.get(&format!("{i:05}.delta"))?.data().to_vec();
        if e.delta.len() != e.x.len() {
            return Err(input_err(format!("example {i}: perturbation length mismatch")));
        }
    }
    Ok(meta)
}

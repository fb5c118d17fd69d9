//! Experiment configuration: TOML file, `key=value` overrides and seed
//! derivation.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spkguard_core::advtrain::AdvTrainConfig;
use spkguard_core::attacks::{AdamAttackConfig, PgdConfig, DEFAULT_EPS_FRACTION};
use spkguard_core::detector::DetectorConfig;
use spkguard_core::diffusion::{DenoiserConfig, DenoiserTrainConfig, ReverseMode};
use spkguard_core::encoder::{EncoderConfig, TrainConfig};
use spkguard_core::eval::ReferenceMode;
use spkguard_core::features::FeatureConfig;
use spkguard_core::rng;
use spkguard_core::synth::CorpusConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub eps_fraction: f64,
    /// Adversarial examples generated per method for evaluation.
    pub n_eval: usize,
    /// Training-split adversarial examples per method, used for tuning
    /// purification and training the detector.
    pub n_train: usize,
    pub target_seed: u64,
    pub pgd: PgdConfig,
    pub adam: AdamAttackConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            eps_fraction: DEFAULT_EPS_FRACTION,
            n_eval: 256,
            n_train: 140,
            target_seed: 0,
            pgd: PgdConfig::default(),
            adam: AdamAttackConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub mode: ReverseMode,
    pub denoiser: DenoiserConfig,
    pub train: DenoiserTrainConfig,
    /// Candidate purification strengths for the validation sweep.
    pub t_grid: Vec<usize>,
    /// Fixed strength; when unset the sweep picks it.
    pub t_star: Option<usize>,
    /// Validation adversarial examples used by the sweep.
    pub sweep_adv: usize,
    /// Validation clean utterances used for the similarity column.
    pub sweep_clean: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.05,
            mode: ReverseMode::Ancestral,
            denoiser: DenoiserConfig::default(),
            train: DenoiserTrainConfig::default(),
            t_grid: vec![0, 1, 2, 3, 4, 6, 8, 12],
            t_star: None,
            sweep_adv: 64,
            sweep_clean: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorSection {
    /// Attack types the detector is trained on.
    pub attacks: Vec<String>,
    #[serde(flatten)]
    pub model: DetectorConfig,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            attacks: vec!["pgd".into(), "adam".into()],
            model: DetectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub reference: ReferenceMode,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// When set, every stage seed is derived from it.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub features: FeatureConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub attacks: AttackSection,
    pub adv_train: AdvTrainConfig,
    pub diffusion: DiffusionSection,
    pub detector: DetectorSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            features: FeatureConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            attacks: AttackSection::default(),
            adv_train: AdvTrainConfig::default(),
            diffusion: DiffusionSection::default(),
            detector: DetectorSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Sets a dotted `key` in a TOML tree; `value` is parsed as a TOML value
/// and falls back to a plain string.
pub fn set_dotted(root: &mut toml::Value, key: &str, value: &str) -> Result<()> {
    let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("malformed key `{key}`");
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("`{key}`: `{part}` is not a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .with_context(|| format!("`{key}` does not address a table entry"))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

impl ExperimentConfig {
    /// Loads defaults, then `path` (if any), then each `key=value` override.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut tree = toml::Value::try_from(Self::default()).context("serializing defaults")?;
        if let Some(p) = path {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let file: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            merge(&mut tree, toml::Value::Table(file));
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not key=value"))?;
            set_dotted(&mut tree, k.trim(), v.trim())?;
        }
        let cfg: Self = tree.clone().try_into().context("invalid configuration")?;
        let canonical = toml::Value::try_from(&cfg).context("serializing configuration")?;
        if let Some(k) = unknown_key(&tree, &canonical, "") {
            bail!("unknown configuration key `{k}`");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.encoder.validate()?;
        self.adv_train.validate()?;
        if self.encoder.n_speakers != self.corpus.n_speakers {
            bail!(
                "encoder.n_speakers ({}) must equal corpus.n_speakers ({})",
                self.encoder.n_speakers,
                self.corpus.n_speakers
            );
        }
        if self.corpus.sample_rate != self.features.sample_rate {
            bail!("corpus and feature sample rates differ");
        }
        if self.attacks.n_eval == 0 || self.attacks.n_train == 0 {
            bail!("attacks.n_eval and attacks.n_train must be positive");
        }
        if let Some(t) = self.diffusion.t_star {
            if t > self.diffusion.steps {
                bail!("diffusion.t_star {t} exceeds diffusion.steps");
            }
        }
        if self.diffusion.t_grid.iter().any(|&t| t > self.diffusion.steps) {
            bail!("diffusion.t_grid contains steps beyond diffusion.steps");
        }
        Ok(())
    }

    /// Copy with every stage seed derived from the master seed, if one is set.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            let d = |label: &str| rng::derive(s, &[rng::tag(label)]);
            c.corpus.master_seed = d("corpus");
            c.train.seed = d("train");
            c.attacks.target_seed = d("targets");
            c.adv_train.seed = d("adv-train");
            c.diffusion.train.seed = d("denoiser");
            c.detector.model.seed = d("detector");
            c.eval.seed = d("eval");
        }
        c
    }
}

/// First key present in `given` but absent from `known`.
fn unknown_key(given: &toml::Value, known: &toml::Value, prefix: &str) -> Option<String> {
    let (toml::Value::Table(g), toml::Value::Table(k)) = (given, known) else {
        return None;
    };
    g.iter().find_map(|(name, v)| {
        let path = if prefix.is_empty() { name.clone() } else { format!("{prefix}.{name}") };
        match k.get(name) {
            Some(kv) => unknown_key(v, kv, &path),
            None => Some(path),
        }
    })
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(existing) => merge(existing, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::load(
            None,
            &[
                "train.epochs=3".into(),
                "attacks.pgd.alpha_start=0.01".into(),
                "out_dir=/tmp/x".into(),
                "encoder.channels=[4, 8]".into(),
                "eval.reference=batch-peers".into(),
                "diffusion.t_star=2".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.attacks.pgd.alpha_start, 0.01);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.encoder.channels, vec![4, 8]);
        assert_eq!(cfg.eval.reference, ReferenceMode::BatchPeers);
        assert_eq!(cfg.diffusion.t_star, Some(2));
    }

    #[test]
    fn rejects_unknown_and_inconsistent_keys() {
        assert!(ExperimentConfig::load(None, &["train.epochz=3".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["corpus.n_speakers=5".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn master_seed_derives_stage_seeds() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolved(), cfg);
        cfg.seed = Some(7);
        let r = cfg.resolved();
        assert_ne!(r.train.seed, r.adv_train.seed);
        assert_eq!(r, cfg.resolved());
    }
}

//! The experiment stages and how they feed each other.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, OnceLock};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use spkguard_core::advtrain::adversarial_finetune;
use spkguard_core::attacks::{
    assign_targets, generate, load_adv_set, save_adv_set, AdamAttack, AdvExample, AttackRegistry, AttackSource, PgdAttack,
};
use spkguard_core::audio::Waveform;
use spkguard_core::checkpoint;
use spkguard_core::defense::{DefenseParts, DefenseRegistry, Purification};
use spkguard_core::detector::{detection_csv, train_detector, Detector};
use spkguard_core::diffusion::{
    select_t_star, sweep_csv, train_denoiser, Denoiser, DiffusionSchedule, Purifier, SweepRow,
};
use spkguard_core::encoder::{self, speaker_centroids, EmbeddingModel};
use spkguard_core::eval::{evaluate_adversarial, evaluate_defense};
use spkguard_core::metrics::{cosine, EvalReport, EvalRow, Outcome};
use spkguard_core::rng;
use spkguard_core::synth::{make_corpus, Corpus, Split};

use crate::config::ExperimentConfig;
use crate::store::{Stage, StageSpec, Store};

/// Which encoder a stage works with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Baseline,
    /// Fine-tuned with adversarial examples from the named attack.
    AdvTrained(String),
}

impl ModelKind {
    pub fn parse(s: &str) -> Self {
        match s {
            "baseline" | "none" => Self::Baseline,
            other => Self::AdvTrained(other.strip_prefix("at-").unwrap_or(other).to_string()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Baseline => "baseline".into(),
            Self::AdvTrained(m) => format!("at-{m}"),
        }
    }
}

/// Which utterances an adversarial set is built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvSplit {
    /// Test-split sources, used for reporting.
    Eval,
    /// Training-split sources, used to tune t* and train the detector.
    Train,
}

/// A loaded encoder together with its stage and speaker centroids.
#[derive(Clone)]
pub struct LoadedModel {
    pub stage: Stage,
    pub model: EmbeddingModel,
    pub centroids: Vec<Vec<f64>>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub store: Store,
    corpus: OnceLock<Corpus>,
}

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn pct(n: usize, total: usize) -> f64 {
    100.0 * n as f64 / total as f64
}

/// Evenly strided (or cyclic, when `n` exceeds the pool) selection.
fn pick<T: Copy>(pool: &[T], n: usize) -> Vec<T> {
    (0..n)
        .map(|i| if n <= pool.len() { pool[i * pool.len() / n] } else { pool[i % pool.len()] })
        .collect()
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Self {
        let cfg = cfg.resolved();
        let store = Store::new(cfg.out_dir.clone());
        Self {
            cfg,
            store,
            corpus: OnceLock::new(),
        }
    }

    pub fn attack_registry(&self) -> Result<AttackRegistry> {
        let mut r = AttackRegistry::empty();
        r.register(Arc::new(PgdAttack::new(self.cfg.attacks.pgd.clone())?));
        r.register(Arc::new(AdamAttack::new(self.cfg.attacks.adam.clone())?));
        Ok(r)
    }

    fn attack_config(&self, method: &str) -> Result<serde_json::Value> {
        Ok(match method {
            "pgd" => serde_json::to_value(&self.cfg.attacks.pgd)?,
            "adam" => serde_json::to_value(&self.cfg.attacks.adam)?,
            other => bail!("unknown attack `{other}` (available: {})", self.attack_registry()?.names().join(", ")),
        })
    }

    /// The corpus, regenerated from its configuration.
    pub fn corpus(&self) -> Result<&Corpus> {
        if let Some(c) = self.corpus.get() {
            return Ok(c);
        }
        let c = make_corpus(&self.cfg.corpus)?;
        Ok(self.corpus.get_or_init(|| c))
    }

    fn labelled(&self, split: Split) -> Result<Vec<(&Waveform, usize)>> {
        Ok(self.corpus()?.split(split).into_iter().map(|u| (&u.wave, u.speaker)).collect())
    }

    /// Enrollment and test utterances, scored pairwise for the clean EER.
    fn clean_trials(&self) -> Result<Vec<(usize, &Waveform)>> {
        Ok(self
            .corpus()?
            .utterances
            .iter()
            .filter(|u| u.split != Split::Train)
            .map(|u| (u.speaker, &u.wave))
            .collect())
    }

    pub fn data(&self) -> Result<Stage> {
        let spec = StageSpec {
            name: "data",
            config: serde_json::to_value(&self.cfg.corpus)?,
            seeds: seeds(&[("corpus", self.cfg.corpus.master_seed)]),
            inputs: vec![],
        };
        self.store.run(spec, |dir| Ok(self.corpus()?.write(dir)?))
    }

    fn load_model(&self, stage: Stage) -> Result<LoadedModel> {
        let model = EmbeddingModel::from_params(&checkpoint::load(&stage.path("encoder.aemb"))?)?;
        let enroll = self.labelled(Split::Enroll)?;
        let centroids = speaker_centroids(&model, &enroll, self.cfg.corpus.n_speakers)?;
        Ok(LoadedModel { stage, model, centroids })
    }

    pub fn encoder(&self) -> Result<LoadedModel> {
        let data = self.data()?;
        let spec = StageSpec {
            name: "encoder",
            config: json!({
                "features": self.cfg.features,
                "encoder": self.cfg.encoder,
                "train": self.cfg.train,
            }),
            seeds: seeds(&[("train", self.cfg.train.seed)]),
            inputs: vec![("data", &data)],
        };
        let stage = self.store.run(spec, |dir| {
            let mut model = EmbeddingModel::new(
                self.cfg.encoder.clone(),
                &self.cfg.features,
                rng::derive(self.cfg.train.seed, &[rng::tag("encoder-init")]),
            )?;
            let report = encoder::train(&mut model, &self.labelled(Split::Train)?, &self.cfg.train)?;
            checkpoint::save(&model.to_params(), &dir.join("encoder.aemb"))?;
            write_json(&dir.join("train_report.json"), &report)
        })?;
        self.load_model(stage)
    }

    pub fn adv_trained(&self, method: &str) -> Result<LoadedModel> {
        let base = self.encoder()?;
        let attack = self.attack_registry()?.get(method)?;
        let spec = StageSpec {
            name: "adv-train",
            config: json!({
                "method": method,
                "attack": self.attack_config(method)?,
                "adv_train": self.cfg.adv_train,
            }),
            seeds: seeds(&[("adv_train", self.cfg.adv_train.seed)]),
            inputs: vec![("encoder", &base.stage)],
        };
        let stage = self.store.run(spec, |dir| {
            let mut model = base.model.clone();
            let report = adversarial_finetune(
                &mut model,
                attack.as_ref(),
                &self.labelled(Split::Train)?,
                &self.labelled(Split::Enroll)?,
                &self.cfg.adv_train,
            )?;
            checkpoint::save(&model.to_params(), &dir.join("encoder.aemb"))?;
            write_json(&dir.join("adv_train_report.json"), &report)
        })?;
        self.load_model(stage)
    }

    pub fn model(&self, kind: &ModelKind) -> Result<LoadedModel> {
        match kind {
            ModelKind::Baseline => self.encoder(),
            ModelKind::AdvTrained(m) => self.adv_trained(m),
        }
    }

    /// Adversarial examples crafted against `model`.
    pub fn adv_set(&self, method: &str, split: AdvSplit, model: &LoadedModel) -> Result<(Stage, Vec<AdvExample>)> {
        let attack = self.attack_registry()?.get(method)?;
        let n = match split {
            AdvSplit::Eval => self.cfg.attacks.n_eval,
            AdvSplit::Train => self.cfg.attacks.n_train,
        };
        let spec = StageSpec {
            name: "attack",
            config: json!({
                "method": method,
                "attack": self.attack_config(method)?,
                "eps_fraction": self.cfg.attacks.eps_fraction,
                "split": split,
                "n": n,
            }),
            seeds: seeds(&[("targets", self.cfg.attacks.target_seed)]),
            inputs: vec![("encoder", &model.stage)],
        };
        let stage = self.store.run(spec, |dir| {
            let pool = self.corpus()?.split(match split {
                AdvSplit::Eval => Split::Test,
                AdvSplit::Train => Split::Train,
            });
            let chosen = pick(&pool, n);
            let ids: Vec<String> = chosen.iter().enumerate().map(|(i, u)| format!("{i:05}_{}", u.id)).collect();
            let sources: Vec<AttackSource<'_>> = chosen
                .iter()
                .zip(&ids)
                .map(|(u, id)| AttackSource {
                    id,
                    wave: &u.wave,
                    label: u.speaker,
                })
                .collect();
            let labels: Vec<usize> = chosen.iter().map(|u| u.speaker).collect();
            let split_tag = match split {
                AdvSplit::Eval => "eval",
                AdvSplit::Train => "train",
            };
            let targets = assign_targets(
                &labels,
                self.cfg.corpus.n_speakers,
                rng::derive(self.cfg.attacks.target_seed, &[rng::tag(split_tag)]),
            )?;
            let examples = generate(
                attack.as_ref(),
                &model.model,
                &sources,
                &targets,
                &model.centroids,
                self.cfg.attacks.eps_fraction,
            )?;
            Ok(save_adv_set(&examples, dir)?)
        })?;
        let examples = load_adv_set(&stage.dir)?;
        Ok((stage, examples))
    }

    pub fn purifier(&self) -> Result<(Stage, Purifier)> {
        let data = self.data()?;
        let d = &self.cfg.diffusion;
        let spec = StageSpec {
            name: "purifier",
            config: json!({
                "steps": d.steps,
                "beta_min": d.beta_min,
                "beta_max": d.beta_max,
                "denoiser": d.denoiser,
                "train": d.train,
            }),
            seeds: seeds(&[("denoiser", d.train.seed)]),
            inputs: vec![("data", &data)],
        };
        let schedule = DiffusionSchedule::linear(d.steps, d.beta_min, d.beta_max)?;
        let stage = self.store.run(spec, |dir| {
            let mut den = Denoiser::new(
                d.denoiser.clone(),
                rng::derive(d.train.seed, &[rng::tag("denoiser-init")]),
            )?;
            let clean: Vec<&Waveform> = self.corpus()?.split(Split::Train).into_iter().map(|u| &u.wave).collect();
            let losses = train_denoiser(&mut den, &clean, &schedule, &d.train)?;
            checkpoint::save(&den.to_params(), &dir.join("denoiser.aemb"))?;
            write_json(&dir.join("losses.json"), &losses)
        })?;
        let denoiser = Denoiser::from_params(&checkpoint::load(&stage.path("denoiser.aemb"))?)?;
        Ok((
            stage,
            Purifier {
                denoiser,
                schedule,
                mode: d.mode,
            },
        ))
    }

    /// Validation sweep over purification strengths on training-split
    /// adversarial examples; writes `sweep.csv` and `t_star.json`.
    pub fn sweep(&self) -> Result<(Stage, Vec<SweepRow>, usize)> {
        let base = self.encoder()?;
        let (pur_stage, purifier) = self.purifier()?;
        let purifier = Arc::new(purifier);
        let methods = self.attack_registry()?.names();
        let mut sets = Vec::new();
        for m in &methods {
            sets.push(self.adv_set(m, AdvSplit::Train, &base)?);
        }
        let d = &self.cfg.diffusion;
        let per_method = d.sweep_adv.div_ceil(methods.len()).max(1);
        let examples: Vec<AdvExample> = sets
            .iter()
            .flat_map(|(_, ex)| pick(&ex.iter().collect::<Vec<_>>(), per_method.min(ex.len())))
            .cloned()
            .collect();
        let mut inputs: Vec<(&str, &Stage)> = vec![("encoder", &base.stage), ("purifier", &pur_stage)];
        let names: Vec<String> = methods.iter().map(|m| format!("attack-{m}")).collect();
        for (n, (s, _)) in names.iter().zip(&sets) {
            inputs.push((n.as_str(), s));
        }
        let spec = StageSpec {
            name: "sweep",
            config: json!({
                "t_grid": d.t_grid,
                "sweep_adv": d.sweep_adv,
                "sweep_clean": d.sweep_clean,
                "mode": d.mode,
                "reference": self.cfg.eval.reference,
            }),
            seeds: seeds(&[("eval", self.cfg.eval.seed)]),
            inputs,
        };
        let stage = self.store.run(spec, |dir| {
            let train = self.corpus()?.split(Split::Train);
            let clean: Vec<&Waveform> = pick(&train, d.sweep_clean.min(train.len())).into_iter().map(|u| &u.wave).collect();
            let clean_emb: Vec<Vec<f64>> = clean.par_iter().map(|w| base.model.embed(w)).collect::<Result<_, _>>()?;
            let mut rows = Vec::with_capacity(d.t_grid.len());
            for &t in &d.t_grid {
                let defense = Purification {
                    purifier: purifier.clone(),
                    t_star: t,
                };
                let samples = evaluate_adversarial(
                    &base.model,
                    &defense,
                    &examples,
                    &base.centroids,
                    self.cfg.eval.reference,
                    self.cfg.eval.seed,
                )?;
                let count = |o: Outcome| samples.iter().filter(|s| s.outcome == o).count();
                let clean_sim: Vec<f64> = clean
                    .par_iter()
                    .zip(&clean_emb)
                    .enumerate()
                    .map(|(i, (w, e))| {
                        let seed = rng::derive(self.cfg.eval.seed, &[rng::tag("sweep-clean"), i as u64]);
                        let p = purifier.purify(w, t, seed)?;
                        Ok(cosine(&base.model.embed(&p)?, e)?)
                    })
                    .collect::<Result<_>>()?;
                let n = samples.len() as f64;
                let row = SweepRow {
                    t,
                    attack_success: pct(count(Outcome::AttackSuccess), samples.len()),
                    defense_success: pct(count(Outcome::DefenseSuccess), samples.len()),
                    sim_src: samples.iter().map(|s| s.sim_src).sum::<f64>() / n,
                    sim_tgt: samples.iter().map(|s| s.sim_tgt).sum::<f64>() / n,
                    clean_sim: clean_sim.iter().sum::<f64>() / clean_sim.len().max(1) as f64,
                };
                log::info!(
                    "sweep t={t}: attack {:.1}% defense {:.1}% clean sim {:.3}",
                    row.attack_success,
                    row.defense_success,
                    row.clean_sim
                );
                rows.push(row);
            }
            let t_star = select_t_star(&rows)?;
            fs::write(dir.join("sweep.csv"), sweep_csv(&rows))?;
            write_json(&dir.join("sweep.json"), &rows)?;
            write_json(&dir.join("t_star.json"), &json!({ "t_star": t_star }))
        })?;
        let rows: Vec<SweepRow> = serde_json::from_str(&fs::read_to_string(stage.path("sweep.json"))?)?;
        let t_star: serde_json::Value = serde_json::from_str(&fs::read_to_string(stage.path("t_star.json"))?)?;
        let t_star = t_star["t_star"].as_u64().context("malformed t_star.json")? as usize;
        Ok((stage, rows, t_star))
    }

    /// Configured t* if set, otherwise the sweep's choice.
    pub fn t_star(&self) -> Result<usize> {
        match self.cfg.diffusion.t_star {
            Some(t) => Ok(t),
            None => Ok(self.sweep()?.2),
        }
    }

    pub fn detector(&self) -> Result<(Stage, Detector)> {
        let base = self.encoder()?;
        let methods = &self.cfg.detector.attacks;
        if methods.is_empty() {
            bail!("detector.attacks must name at least one attack");
        }
        let mut sets = Vec::new();
        for m in methods {
            sets.push(self.adv_set(m, AdvSplit::Train, &base)?);
        }
        let names: Vec<String> = methods.iter().map(|m| format!("attack-{m}")).collect();
        let inputs: Vec<(&str, &Stage)> = names.iter().map(String::as_str).zip(sets.iter().map(|(s, _)| s)).collect();
        let spec = StageSpec {
            name: "detector",
            config: json!({
                "detector": self.cfg.detector.model,
                "attacks": methods,
                "features": self.cfg.features,
            }),
            seeds: seeds(&[("detector", self.cfg.detector.model.seed)]),
            inputs,
        };
        let stage = self.store.run(spec, |dir| {
            let train = self.corpus()?.split(Split::Train);
            let clean: Vec<&Waveform> = train.iter().map(|u| &u.wave).collect();
            let adv_waves: Vec<(String, Waveform)> = methods
                .iter()
                .zip(&sets)
                .flat_map(|(m, (_, ex))| ex.iter().map(move |e| (format!("{m}/{}", e.source_id), e.adversarial())))
                .collect();
            let adv: Vec<&Waveform> = adv_waves.iter().map(|(_, w)| w).collect();
            let (det, report) = train_detector(&clean, &adv, &self.cfg.features, &self.cfg.detector.model)?;
            log::info!(
                "detector held-out accuracy {:.4} ({} items)",
                report.held_out_accuracy,
                report.n_held_out
            );
            checkpoint::save(&det.to_params(), &dir.join("detector.aemb"))?;
            write_json(&dir.join("detector_report.json"), &report)?;
            let mut rows = Vec::new();
            for u in &train {
                rows.push((format!("clean/{}", u.id), det.detect(&u.wave)?));
            }
            for (id, w) in &adv_waves {
                rows.push((id.clone(), det.detect(w)?));
            }
            Ok(fs::write(dir.join("detection.csv"), detection_csv(&rows))?)
        })?;
        let det = Detector::from_params(&checkpoint::load(&stage.path("detector.aemb"))?)?;
        Ok((stage, det))
    }

    /// Components for an input defense; only what the defense needs is trained.
    fn defense_parts(&self, defense: &str) -> Result<(DefenseParts, Vec<Stage>)> {
        let mut parts = DefenseParts::default();
        let mut stages = Vec::new();
        if defense.contains("purification") {
            let (s, p) = self.purifier()?;
            parts.purifier = Some(Arc::new(p));
            parts.t_star = self.t_star()?;
            stages.push(s);
        }
        if defense.starts_with("gated") {
            let (s, d) = self.detector()?;
            parts.detector = Some(Arc::new(d));
            stages.push(s);
        }
        Ok((parts, stages))
    }

    /// One report row: `defense` is an input defense from the registry,
    /// `attack` is `none` or an attack name, and `model` selects the encoder.
    pub fn evaluate(&self, defense: &str, attack: &str, model: &ModelKind) -> Result<(Stage, EvalRow)> {
        let loaded = self.model(model)?;
        let registry = DefenseRegistry::with_defaults();
        let (parts, part_stages) = self.defense_parts(defense)?;
        let def = registry.build(defense, &parts)?;
        let adv = if attack == "none" {
            None
        } else {
            Some(self.adv_set(attack, AdvSplit::Eval, &loaded)?)
        };
        let mut inputs: Vec<(&str, &Stage)> = vec![("encoder", &loaded.stage)];
        let part_names: Vec<String> = part_stages.iter().map(|s| s.name.clone()).collect();
        for (n, s) in part_names.iter().zip(&part_stages) {
            inputs.push((n.as_str(), s));
        }
        if let Some((s, _)) = &adv {
            inputs.push(("attack", s));
        }
        let spec = StageSpec {
            name: "evaluate",
            config: json!({
                "defense": defense,
                "attack": attack,
                "model": model.label(),
                "t_star": parts.t_star,
                "reference": self.cfg.eval.reference,
            }),
            seeds: seeds(&[("eval", self.cfg.eval.seed)]),
            inputs,
        };
        let stage = self.store.run(spec, |dir| {
            let examples: &[AdvExample] = adv.as_ref().map_or(&[], |(_, e)| e.as_slice());
            let row = evaluate_defense(
                defense,
                attack,
                &loaded.model,
                def.as_ref(),
                examples,
                &loaded.centroids,
                &self.clean_trials()?,
                self.cfg.eval.reference,
                self.cfg.eval.seed,
            )?;
            write_json(&dir.join("row.json"), &row)
        })?;
        let row: EvalRow = serde_json::from_str(&fs::read_to_string(stage.path("row.json"))?)?;
        Ok((stage, row))
    }

    /// The full comparison: undefended, adversarially trained and purified
    /// models under each attack.
    pub fn reproduce_table(&self) -> Result<(Stage, EvalReport)> {
        let attacks = [("adam", "Adam"), ("pgd", "PGD")];
        let mut cells: Vec<(String, String, &str, &str, ModelKind)> =
            vec![("None".into(), "None".into(), "none", "none", ModelKind::Baseline)];
        for (a, label) in attacks {
            cells.push(("None".into(), label.into(), "none", a, ModelKind::Baseline));
        }
        for (trained, tlabel) in attacks {
            for (a, label) in attacks {
                cells.push((
                    format!("AT ({tlabel})"),
                    label.into(),
                    "none",
                    a,
                    ModelKind::AdvTrained(trained.into()),
                ));
            }
        }
        for (d, dlabel) in [("purification", "Purification"), ("gated-purification", "Purification (gated)")] {
            for (a, label) in attacks {
                cells.push((dlabel.into(), label.into(), d, a, ModelKind::Baseline));
            }
        }
        let mut rows = Vec::with_capacity(cells.len());
        let mut stages = Vec::with_capacity(cells.len());
        for (dlabel, alabel, defense, attack, model) in &cells {
            let (stage, mut row) = self.evaluate(defense, attack, model)?;
            row.defense = dlabel.clone();
            row.attack = alabel.clone();
            rows.push(row);
            stages.push(stage);
        }
        let report = EvalReport { rows };
        let names: Vec<String> = (0..stages.len()).map(|i| format!("row{i:02}")).collect();
        let inputs: Vec<(&str, &Stage)> = names.iter().map(String::as_str).zip(&stages).collect();
        let spec = StageSpec {
            name: "table",
            config: json!({ "rows": cells.iter().map(|c| [&c.0, &c.1]).collect::<Vec<_>>() }),
            seeds: BTreeMap::new(),
            inputs,
        };
        let stage = self.store.run(spec, |dir| {
            fs::write(dir.join("report.json"), report.to_json()? + "\n")?;
            Ok(fs::write(dir.join("table.txt"), report.to_table())?)
        })?;
        let report = EvalReport::from_json(&fs::read_to_string(stage.path("report.json"))?)?;
        Ok((stage, report))
    }
}

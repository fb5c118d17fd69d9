//! Cosine scoring, per-sample attack/defense outcomes, equal error rate and
//! aggregate evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

/// Cosine similarity; errors when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(input_err(format!("cosine of lengths {} and {}", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(input_err("cosine with a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Index of the most similar reference; ties go to the lowest index.
pub fn predicted_label(emb: &[f64], references: &[Vec<f64>]) -> Result<usize> {
    let mut best = (0usize, f64::NEG_INFINITY);
    for (i, r) in references.iter().enumerate() {
        let c = cosine(emb, r)?;
        if c > best.1 {
            best = (i, c);
        }
    }
    if references.is_empty() {
        return Err(input_err("no reference embeddings"));
    }
    Ok(best.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    AttackSuccess,
    DefenseSuccess,
    Neither,
}

/// Classifies a processed adversarial sample by its predicted speaker.
pub fn judge(emb: &[f64], references: &[Vec<f64>], source: usize, target: usize) -> Result<Outcome> {
    let p = predicted_label(emb, references)?;
    Ok(if p == target {
        Outcome::AttackSuccess
    } else if p == source {
        Outcome::DefenseSuccess
    } else {
        Outcome::Neither
    })
}

/// One verification trial score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Trial {
    pub score: f64,
    pub genuine: bool,
}

/// Equal error rate in percent of target (same-speaker) and nontarget scores.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> Result<f64> {
    if targets.is_empty() || nontargets.is_empty() {
        return Err(input_err("EER needs nonempty target and nontarget scores"));
    }
    let trials: Vec<Trial> = targets
        .iter()
        .map(|&score| Trial { score, genuine: true })
        .chain(nontargets.iter().map(|&score| Trial { score, genuine: false }))
        .collect();
    eer_trials(&trials)
}

/// Equal error rate in percent over labelled trials.
///
/// Candidate thresholds are the sorted unique scores plus `+inf`; a trial is
/// accepted when `score >= threshold`. `FAR - FRR` is non-increasing in the
/// threshold, so the first threshold where it reaches zero or below brackets
/// the crossing; the EER is linearly interpolated between that threshold and
/// the previous one.
pub fn eer_trials(trials: &[Trial]) -> Result<f64> {
    let n_gen = trials.iter().filter(|t| t.genuine).count();
    let n_imp = trials.len() - n_gen;
    if n_gen == 0 || n_imp == 0 {
        return Err(input_err("EER needs both genuine and impostor trials"));
    }
    if trials.iter().any(|t| !t.score.is_finite()) {
        return Err(input_err("non-finite trial score"));
    }
    let mut sorted: Vec<Trial> = trials.to_vec();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Sweep thresholds upward; `below_*` counts trials with score < threshold.
    let mut rates = Vec::with_capacity(sorted.len() + 1);
    let (mut below_gen, mut below_imp) = (0usize, 0usize);
    let mut i = 0;
    loop {
        let far = (n_imp - below_imp) as f64 / n_imp as f64;
        let frr = below_gen as f64 / n_gen as f64;
        rates.push((far, frr));
        if i == sorted.len() {
            break;
        }
        let s = sorted[i].score;
        while i < sorted.len() && sorted[i].score == s {
            if sorted[i].genuine {
                below_gen += 1;
            } else {
                below_imp += 1;
            }
            i += 1;
        }
    }
    let first = rates
        .iter()
        .position(|(far, frr)| far - frr <= 0.0)
        .expect("FAR - FRR reaches -1 at the infinite threshold");
    let (far, frr) = rates[first];
    let d = far - frr;
    let rate = if d == 0.0 || first == 0 {
        far
    } else {
        let (far0, frr0) = rates[first - 1];
        let d0 = far0 - frr0;
        let lambda = d0 / (d0 - d);
        let far_i = far0 + lambda * (far - far0);
        let frr_i = frr0 + lambda * (frr - frr0);
        0.5 * (far_i + frr_i)
    };
    Ok(100.0 * rate)
}

/// All unordered pairs of `(label, embedding)` scored by cosine.
pub fn pairwise_trials(items: &[(usize, Vec<f64>)]) -> Result<Vec<Trial>> {
    let mut out = Vec::with_capacity(items.len() * items.len().saturating_sub(1) / 2);
    for i in 0..items.len() {
        for j in i + 1..items.len() {
            out.push(Trial {
                score: cosine(&items[i].1, &items[j].1)?,
                genuine: items[i].0 == items[j].0,
            });
        }
    }
    Ok(out)
}

/// Per-sample record of a processed adversarial example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub source: usize,
    pub target: usize,
    pub outcome: Outcome,
    pub sim_src: f64,
    pub sim_tgt: f64,
}

/// One row of the method comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub defense: String,
    pub attack: String,
    pub eer: f64,
    pub attack_success_rate: Option<f64>,
    pub defense_success_rate: Option<f64>,
    pub sim_src: Option<f64>,
    pub sim_tgt: Option<f64>,
    pub samples: usize,
}

impl EvalRow {
    /// Aggregates per-sample results (rates in percent, similarities averaged).
    pub fn from_samples(defense: &str, attack: &str, eer: f64, samples: &[SampleResult]) -> Self {
        let n = samples.len();
        let pct = |o: Outcome| 100.0 * samples.iter().filter(|s| s.outcome == o).count() as f64 / n as f64;
        let mean = |f: fn(&SampleResult) -> f64| samples.iter().map(f).sum::<f64>() / n as f64;
        let some = |v: f64| if n == 0 { None } else { Some(v) };
        Self {
            defense: defense.to_string(),
            attack: attack.to_string(),
            eer,
            attack_success_rate: some(pct(Outcome::AttackSuccess)),
            defense_success_rate: some(pct(Outcome::DefenseSuccess)),
            sim_src: some(mean(|s| s.sim_src)),
            sim_tgt: some(mean(|s| s.sim_tgt)),
            samples: n,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Plain-text table with aligned columns.
    pub fn to_table(&self) -> String {
        let header = ["Defense", "Attack", "EER(%)", "Attack(%)", "Defense(%)", "Sim.Src", "Sim.Tgt"];
        let opt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
        let rows: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.defense.clone(),
                    r.attack.clone(),
                    format!("{:.2}", r.eer),
                    opt(r.attack_success_rate, 2),
                    opt(r.defense_success_rate, 2),
                    opt(r.sim_src, 4),
                    opt(r.sim_tgt, 4),
                ]
            })
            .collect();
        let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for r in &rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[&str]| {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", parts.join("  ").trim_end());
        };
        line(&mut out, &header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        let rule_refs: Vec<&str> = rule.iter().map(String::as_str).collect();
        line(&mut out, &rule_refs);
        for r in &rows {
            let refs: Vec<&str> = r.iter().map(String::as_str).collect();
            line(&mut out, &refs);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(score: f64, genuine: bool) -> Trial {
        Trial { score, genuine }
    }

    #[test]
    fn cosine_basics() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[2.0, 0.0], &[3.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn perfect_separation_is_zero() {
        let trials = [t(0.9, true), t(0.8, true), t(0.1, false), t(0.2, false)];
        assert_eq!(eer_trials(&trials).unwrap(), 0.0);
    }

    #[test]
    fn identical_distributions_are_fifty() {
        let trials = [t(0.5, true), t(0.5, false), t(0.5, true), t(0.5, false)];
        assert!((eer_trials(&trials).unwrap() - 50.0).abs() < 1e-12);
    }

    #[test]
    fn reversed_scores_are_hundred() {
        let trials = [t(0.1, true), t(0.2, true), t(0.8, false), t(0.9, false)];
        assert!((eer_trials(&trials).unwrap() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn eer_needs_both_classes() {
        assert!(eer_trials(&[t(0.1, true)]).is_err());
        assert!(eer_trials(&[t(0.1, false)]).is_err());
    }

    #[test]
    fn judge_ties_to_lowest_index() {
        let refs = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(predicted_label(&[1.0, 0.1], &refs).unwrap(), 0);
        assert_eq!(judge(&[0.0, 1.0], &refs, 0, 2).unwrap(), Outcome::AttackSuccess);
        assert_eq!(judge(&[1.0, 0.0], &refs, 0, 2).unwrap(), Outcome::DefenseSuccess);
        assert_eq!(judge(&[1.0, 0.0], &refs, 1, 2).unwrap(), Outcome::Neither);
    }

    #[test]
    fn report_roundtrip_and_table() {
        let samples = vec![
            SampleResult {
                source: 0,
                target: 1,
                outcome: Outcome::AttackSuccess,
                sim_src: 0.2,
                sim_tgt: 0.8,
            },
            SampleResult {
                source: 1,
                target: 0,
                outcome: Outcome::DefenseSuccess,
                sim_src: 0.6,
                sim_tgt: 0.4,
            },
        ];
        let report = EvalReport {
            rows: vec![
                EvalRow::from_samples("None", "None", 1.25, &[]),
                EvalRow::from_samples("None", "PGD", 1.25, &samples),
            ],
        };
        assert_eq!(report.rows[1].attack_success_rate, Some(50.0));
        assert!((report.rows[1].sim_src.unwrap() - 0.4).abs() < 1e-15);
        let back = EvalReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
        let table = report.to_table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("50.00"));
    }
}

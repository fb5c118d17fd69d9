use proptest::prelude::*;
use spkguard_core::metrics::{cosine, eer, eer_trials, judge, pairwise_trials, Outcome, Trial};
use spkguard_core::rng;

/// Operating point at threshold `th`: accept when `score >= th`.
fn rates(targets: &[f64], nontargets: &[f64], th: f64) -> (f64, f64) {
    let far = nontargets.iter().filter(|&&s| s >= th).count() as f64 / nontargets.len() as f64;
    let frr = targets.iter().filter(|&&s| s < th).count() as f64 / targets.len() as f64;
    (far, frr)
}

/// Enumerates every candidate threshold, counts errors from scratch at each
/// and intersects FAR and FRR on the segment where their order flips.
fn eer_oracle(targets: &[f64], nontargets: &[f64]) -> f64 {
    let mut ths: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    ths.sort_by(f64::total_cmp);
    ths.dedup();
    ths.push(f64::INFINITY);
    let points: Vec<(f64, f64)> = ths.iter().map(|&t| rates(targets, nontargets, t)).collect();
    for i in 0..points.len() {
        let (far, frr) = points[i];
        if far == frr {
            return 100.0 * far;
        }
        if far < frr {
            if i == 0 {
                return 100.0 * far;
            }
            let (far0, frr0) = points[i - 1];
            // far0 + l (far - far0) = frr0 + l (frr - frr0)
            let l = (far0 - frr0) / ((far0 - frr0) - (far - frr));
            return 100.0 * (far0 + l * (far - far0));
        }
    }
    unreachable!("FRR reaches 1 at the infinite threshold")
}

#[test]
fn small_example_matches_oracle() {
    let t = [0.9, 0.8, 0.4];
    let n = [0.5, 0.3, 0.2];
    let e = eer(&t, &n).unwrap();
    assert!((e - eer_oracle(&t, &n)).abs() < 1e-9);
    assert!((e - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn trivial_cases() {
    assert_eq!(eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 0.0);
    assert!((eer(&[0.5, 0.5], &[0.5, 0.5]).unwrap() - 50.0).abs() < 1e-12);
    assert!(eer(&[], &[0.1]).is_err());
    assert!(eer(&[0.1], &[]).is_err());
    assert!(eer(&[f64::NAN], &[0.1]).is_err());
}

#[test]
fn interpolates_between_operating_points() {
    // FAR - FRR steps from 1/6 to -1/3 between thresholds 0.4 and 0.5
    let (t, n) = ([0.9, 0.5, 0.3], [0.4, 0.1]);
    let e = eer(&t, &n).unwrap();
    assert!((e - eer_oracle(&t, &n)).abs() < 1e-9);
    assert!((e - 100.0 / 3.0).abs() < 1e-9);
}

#[test]
fn hundred_random_sets_match_oracle() {
    let mut r = rng::rng(2024);
    for case in 0..100 {
        let nt = rand::Rng::random_range(&mut r, 1..200);
        let nn = rand::Rng::random_range(&mut r, 1..800);
        // coarse grid forces ties
        let grid = if case % 3 == 0 { 20.0 } else { 1e6 };
        let mut draw = |shift: f64| ((rand::Rng::random::<f64>(&mut r) + shift) * grid).round() / grid;
        let t: Vec<f64> = (0..nt).map(|_| draw(0.3)).collect();
        let n: Vec<f64> = (0..nn).map(|_| draw(0.0)).collect();
        let got = eer(&t, &n).unwrap();
        let want = eer_oracle(&t, &n);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn pairwise_trials_label_genuine_pairs() {
    let items = vec![(0, vec![1.0, 0.0]), (0, vec![0.9, 0.1]), (1, vec![0.0, 1.0])];
    let trials = pairwise_trials(&items).unwrap();
    assert_eq!(trials.len(), 3);
    assert_eq!(trials.iter().filter(|t| t.genuine).count(), 1);
    assert_eq!(eer_trials(&trials).unwrap(), 0.0);
}

#[test]
fn cosine_examples() {
    let v = [0.3, -1.2, 2.0];
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
    assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
    assert!(cosine(&[0.0; 3], &v).is_err());
}

#[test]
fn judge_examples() {
    let c = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    assert_eq!(judge(&c[0], &c, 0, 1).unwrap(), Outcome::DefenseSuccess);
    assert_eq!(judge(&c[1], &c, 0, 1).unwrap(), Outcome::AttackSuccess);
    assert_eq!(judge(&c[2], &c, 0, 1).unwrap(), Outcome::Neither);
}

fn vec_strategy(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, dim).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn eer_matches_oracle(
        t in prop::collection::vec(-1.0f64..1.0, 1..300),
        n in prop::collection::vec(-1.0f64..1.0, 1..700),
    ) {
        let got = eer(&t, &n).unwrap();
        prop_assert!((got - eer_oracle(&t, &n)).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn judge_is_scale_invariant(
        emb in vec_strategy(6),
        refs in prop::collection::vec(vec_strategy(6), 3..8),
        c in 1e-3f64..1e3,
    ) {
        let scaled: Vec<f64> = emb.iter().map(|x| x * c).collect();
        prop_assert_eq!(judge(&emb, &refs, 0, 1).unwrap(), judge(&scaled, &refs, 0, 1).unwrap());
    }

    #[test]
    fn outcome_rates_sum_to_hundred(
        embs in prop::collection::vec(vec_strategy(4), 1..40),
        refs in prop::collection::vec(vec_strategy(4), 3..6),
    ) {
        let n = refs.len();
        let outcomes: Vec<Outcome> = embs
            .iter()
            .enumerate()
            .map(|(i, e)| judge(e, &refs, i % n, (i + 1) % n).unwrap())
            .collect();
        let pct = |o: Outcome| 100.0 * outcomes.iter().filter(|&&x| x == o).count() as f64 / outcomes.len() as f64;
        let total = pct(Outcome::AttackSuccess) + pct(Outcome::DefenseSuccess) + pct(Outcome::Neither);
        prop_assert!((total - 100.0).abs() < 1e-9);
    }

    #[test]
    fn eer_ignores_trial_order(mut trials in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 2..100)) {
        trials[0].1 = true;
        trials[1].1 = false;
        let a: Vec<Trial> = trials.iter().map(|&(score, genuine)| Trial { score, genuine }).collect();
        let mut b = a.clone();
        b.reverse();
        prop_assert_eq!(eer_trials(&a).unwrap(), eer_trials(&b).unwrap());
    }
}

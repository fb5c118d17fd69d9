use spkguard_core::audio::Waveform;
use spkguard_core::diffusion::{
    draw_crop, eps_loss, gaussian, q_sample, train_denoiser, Denoiser, DenoiserConfig, DenoiserTrainConfig,
    DiffusionSchedule, Purifier, ReverseMode,
};
use spkguard_core::rng;
use spkguard_core::synth::{make_speaker, synth_utterance};

fn schedule() -> DiffusionSchedule {
    DiffusionSchedule::linear(50, 1e-4, 0.05).unwrap()
}

#[test]
fn alpha_bar_matches_running_product() {
    let s = schedule();
    let mut prod = 1.0;
    for t in 1..=50 {
        let beta = 1e-4 + (0.05 - 1e-4) * (t - 1) as f64 / 49.0;
        assert!((s.beta(t) - beta).abs() < 1e-15);
        prod *= 1.0 - beta;
        assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
    }
}

#[test]
fn forward_variance_matches_monte_carlo() {
    let s = schedule();
    let mut r = rng::rng(77);
    let x0 = [0.0];
    for t in [1, 25, 50] {
        let draws: Vec<f64> = (0..10_000)
            .map(|_| q_sample(&s, &x0, t, &gaussian(1, &mut r)).unwrap()[0])
            .collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
        let want = 1.0 - s.alpha_bar(t);
        assert!(((var - want) / want).abs() < 0.05, "t={t}: {var} vs {want}");
    }
}

fn voices(n: usize) -> Vec<Waveform> {
    (0..n)
        .map(|i| synth_utterance(&make_speaker(i as u64), 0.5, 100 + i as u64, 8000, 0.01).unwrap())
        .collect()
}

#[test]
fn training_lowers_held_out_loss() {
    let s = schedule();
    let train = voices(6);
    let held = voices(8)[6..].to_vec();
    let train_refs: Vec<&Waveform> = train.iter().collect();
    let held_refs: Vec<&Waveform> = held.iter().collect();
    let mut r = rng::rng(3);
    let batch: Vec<_> = (0..24).map(|_| draw_crop(&held_refs, &s, 400, &mut r).unwrap()).collect();

    let cfg = DenoiserConfig {
        channels: 16,
        ..DenoiserConfig::default()
    };
    let mut den = Denoiser::new(cfg, 0).unwrap();
    let before = eps_loss(&den, &batch).unwrap();
    let tc = DenoiserTrainConfig {
        steps: 80,
        batch_size: 8,
        lr: 1e-3,
        crop_len: 400,
        seed: 0,
    };
    let history = train_denoiser(&mut den, &train_refs, &s, &tc).unwrap();
    assert_eq!(history.len(), 80);
    let after = eps_loss(&den, &batch).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn purification_is_seeded_and_bounded() {
    let purifier = Purifier {
        denoiser: Denoiser::new(DenoiserConfig::default(), 1).unwrap(),
        schedule: schedule(),
        mode: ReverseMode::Ancestral,
    };
    let x = voices(1).remove(0);
    assert_eq!(purifier.purify(&x, 0, 5).unwrap(), x);
    let a = purifier.purify(&x, 4, 5).unwrap();
    assert_eq!(a, purifier.purify(&x, 4, 5).unwrap());
    assert_ne!(a, purifier.purify(&x, 4, 6).unwrap());
    assert!(a.samples().iter().all(|v| v.abs() <= 1.0));
    assert!(purifier.purify(&x, 51, 5).is_err());

    let det = Purifier {
        mode: ReverseMode::Deterministic,
        ..purifier
    };
    // no fresh noise on the way down, so only the forward draw differs
    assert_eq!(det.purify(&x, 3, 9).unwrap(), det.purify(&x, 3, 9).unwrap());
}

use std::f64::consts::PI;

use proptest::prelude::*;
use spkguard_autograd::{grad_check, Graph, Tensor};
use spkguard_core::features::{hz_to_mel, mel_edge_bins, mel_to_hz, FeatureConfig, FeatureExtractor};
use spkguard_core::rng;

fn magnitudes(ex: &FeatureExtractor, frame: &[f64]) -> Vec<f64> {
    let mut g = Graph::new();
    let f = g.constant(Tensor::new(vec![1, frame.len()], frame.to_vec()).unwrap());
    let m = ex.dft_magnitude(&mut g, f).unwrap();
    g.value(m).data().to_vec()
}

/// Zero-padded DFT magnitude by direct summation.
fn dft_oracle(frame: &[f64], n_fft: usize) -> Vec<f64> {
    (0..=n_fft / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, x) in frame.iter().enumerate() {
                let w = 2.0 * PI * (k * n) as f64 / n_fft as f64;
                re += x * w.cos();
                im -= x * w.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

#[test]
fn bin_center_cosine_concentrates_energy() {
    let cfg = FeatureConfig {
        frame_len: 256,
        ..FeatureConfig::default()
    };
    let ex = FeatureExtractor::new(&cfg).unwrap();
    let k0 = 20;
    let frame: Vec<f64> = (0..256).map(|n| (2.0 * PI * (k0 * n) as f64 / 256.0).cos()).collect();
    let mag = magnitudes(&ex, &frame);
    let oracle = dft_oracle(&frame, 256);
    for (a, b) in mag.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-9);
    }
    let argmax = mag.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(argmax, k0);
    assert!((mag[k0] - 128.0).abs() < 1e-9);
    let elsewhere: f64 = mag.iter().enumerate().filter(|(k, _)| *k != k0).map(|(_, m)| m).sum();
    assert!(elsewhere < 1e-8);
}

#[test]
fn parseval_on_random_frames() {
    let cfg = FeatureConfig::default();
    let ex = FeatureExtractor::new(&cfg).unwrap();
    let mut r = rng::rng(5);
    for _ in 0..8 {
        let frame: Vec<f64> = (0..cfg.frame_len).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let mag = magnitudes(&ex, &frame);
        let n = cfg.n_fft;
        // one-sided spectrum: DC and Nyquist once, the rest twice
        let spectral: f64 = mag
            .iter()
            .enumerate()
            .map(|(k, m)| if k == 0 || k == n / 2 { m * m } else { 2.0 * m * m })
            .sum::<f64>()
            / n as f64;
        let energy: f64 = frame.iter().map(|x| x * x).sum();
        assert!(((spectral - energy) / energy).abs() < 1e-8, "{spectral} vs {energy}");
    }
}

#[test]
fn mel_filter_center_spot_check() {
    let cfg = FeatureConfig {
        sample_rate: 8000,
        n_fft: 256,
        n_mels: 40,
        fmin: 50.0,
        fmax: 4000.0,
        ..FeatureConfig::default()
    };
    let edges = mel_edge_bins(&cfg);
    assert_eq!(edges.len(), 42);
    // filter 10 is centred on edge point 11
    let lo = 2595.0 * (1.0f64 + 50.0 / 700.0).log10();
    let hi = 2595.0 * (1.0f64 + 4000.0 / 700.0).log10();
    let mel = lo + (hi - lo) * 11.0 / 41.0;
    let hz = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
    assert_eq!(edges[11], (hz * 256.0 / 8000.0).round() as usize);
    assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
}

#[test]
fn mean_log_mel_gradient_matches_finite_differences() {
    let cfg = FeatureConfig::default();
    let ex = FeatureExtractor::new(&cfg).unwrap();
    let mut r = rng::rng(9);
    let x: Vec<f64> = (0..400).map(|_| rand::Rng::random_range(&mut r, -0.5..0.5)).collect();
    let report = grad_check(
        |g, v| {
            let lm = ex.log_mel(g, v).expect("log-mel graph");
            g.mean(lm)
        },
        &Tensor::vector(x),
        1e-5,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mel_conversion_roundtrips(hz in 0.0f64..8000.0) {
        prop_assert!((mel_to_hz(hz_to_mel(hz)) - hz).abs() < 1e-8);
    }

    #[test]
    fn features_are_finite_for_any_bounded_signal(seed in 0u64..1000, len in 200usize..1200) {
        let ex = FeatureExtractor::new(&FeatureConfig::default()).unwrap();
        let mut r = rng::rng(seed);
        let x: Vec<f64> = (0..len).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let w = spkguard_core::audio::Waveform::new(x, 8000);
        let lm = ex.log_mel_values(&w).unwrap();
        prop_assert!(lm.all_finite());
        prop_assert_eq!(lm.shape()[0], ex.config().frame_count(len));
    }
}

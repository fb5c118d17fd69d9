use std::collections::HashSet;
use std::f64::consts::PI;

use proptest::prelude::*;
use spkguard_core::synth::{make_corpus, make_speaker, split_counts, synth_utterance, CorpusConfig, Split};

#[test]
fn jitter_free_speaker_peaks_at_f0() {
    let mut s = make_speaker(4);
    s.jitter = 0.0;
    // steepest tilt so the fundamental dominates
    s.tilt_db_per_octave = -12.0;
    let w = synth_utterance(&s, 1.0, 11, 8000, 0.0).unwrap();
    let x = w.samples();
    let n = x.len();
    let bins = n / 2;
    let power: Vec<f64> = (0..bins)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (i, v) in x.iter().enumerate() {
                let a = 2.0 * PI * (k * i) as f64 / n as f64;
                re += v * a.cos();
                im -= v * a.sin();
            }
            re * re + im * im
        })
        .collect();
    let peak = (1..bins).max_by(|&a, &b| power[a].total_cmp(&power[b])).unwrap();
    let f0_bin = s.f0 * n as f64 / 8000.0;
    assert!((peak as f64 - f0_bin).abs() <= 2.0, "peak bin {peak}, f0 bin {f0_bin}");
}

#[test]
fn spec_sized_corpus_split() {
    let c = make_corpus(&CorpusConfig {
        utts_per_speaker: 10,
        ..CorpusConfig::default()
    })
    .unwrap();
    assert_eq!(c.utterances.len(), 200);
    assert_eq!(c.split(Split::Train).len(), 140);
    assert_eq!(c.split(Split::Enroll).len(), 20);
    assert_eq!(c.split(Split::Test).len(), 40);
    let ids: HashSet<&str> = c.utterances.iter().map(|u| u.id.as_str()).collect();
    assert_eq!(ids.len(), 200);
    for s in 0..20 {
        for split in [Split::Enroll, Split::Test] {
            assert!(c.split(split).iter().any(|u| u.speaker == s));
        }
    }
}

#[test]
fn corpus_regenerates_bit_identically_and_writes() {
    let cfg = CorpusConfig {
        n_speakers: 3,
        utts_per_speaker: 5,
        ..CorpusConfig::default()
    };
    let a = make_corpus(&cfg).unwrap();
    assert_eq!(a, make_corpus(&cfg).unwrap());
    let b = make_corpus(&CorpusConfig { master_seed: 1, ..cfg }).unwrap();
    assert_ne!(a.utterances[0].wave, b.utterances[0].wave);

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let mut lines = manifest.lines();
    assert_eq!(lines.next(), Some("utterance_id,speaker_id,split,seed"));
    assert_eq!(lines.count(), 15);
    let back = spkguard_core::audio::Waveform::read_wav(&dir.path().join("wav/spk000_utt000.wav")).unwrap();
    assert_eq!(back.sample_rate(), 8000);
    assert!(back
        .samples()
        .iter()
        .zip(a.utterances[0].wave.samples())
        .all(|(p, q)| (p - q).abs() <= 1.0 / 32767.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn utterances_are_normalized(seed in 0u64..10_000, dur in 0.5f64..1.5, noise in 0.0f64..0.1) {
        let w = synth_utterance(&make_speaker(seed), dur, seed ^ 0x55, 8000, noise).unwrap();
        let peak = w.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assert!((peak - 0.9).abs() < 1e-12);
        prop_assert_eq!(w.len(), (dur * 8000.0).round() as usize);
    }

    #[test]
    fn splits_partition_each_speaker(u in 4usize..40) {
        let (tr, en, te) = split_counts(u);
        prop_assert_eq!(tr + en + te, u);
        prop_assert!(en >= 1 && te >= 1 && tr >= 1);
    }
}

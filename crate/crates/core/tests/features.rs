use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use waveformer::features::{
    compute_wide_features, detect_r_peaks, extract_wide_features, FeatureConfig, RPeakTrain, FEATURE_NAMES,
};
use waveformer::record_io::{EcgRecord, Sex};

/// Gaussian QRS complexes at `beats` plus a slow wave and noise.
fn ecg(fs: f64, seconds: f64, beats: &[f64], seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.02).unwrap();
    (0..(fs * seconds) as usize)
        .map(|i| {
            let t = i as f64 / fs;
            let qrs: f64 = beats
                .iter()
                .map(|&b| (-((t - b) / 0.012).powi(2) / 2.0).exp() - 0.2 * (-((t - b - 0.03) / 0.01).powi(2) / 2.0).exp())
                .sum();
            let twave: f64 = beats.iter().map(|&b| 0.25 * (-((t - b - 0.25) / 0.04).powi(2) / 2.0).exp()).sum();
            qrs + twave + 0.1 * (2.0 * std::f64::consts::PI * 0.3 * t).sin() + noise.sample(&mut rng)
        })
        .collect()
}

fn beat_times(seconds: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = 0.4;
    let mut out = Vec::new();
    while t < seconds - 0.4 {
        out.push(t);
        t += rng.random_range(0.6..1.1);
    }
    out
}

#[test]
fn detects_every_beat_at_several_rates() {
    for (seed, fs) in [(1u64, 250.0), (2, 500.0), (3, 1000.0)] {
        let beats = beat_times(12.0, seed);
        let lead = ecg(fs, 12.0, &beats, seed);
        let train = detect_r_peaks(&lead, fs).unwrap();
        assert_eq!(train.peak_indices.len(), beats.len(), "fs {fs}");
        for (&i, &b) in train.peak_indices.iter().zip(&beats) {
            assert!((i as f64 / fs - b).abs() <= 0.01, "fs {fs}: peak {i} vs beat {b}");
        }
    }
}

#[test]
fn detection_ignores_amplitude_scale() {
    let beats = beat_times(10.0, 7);
    let lead = ecg(500.0, 10.0, &beats, 7);
    let doubled: Vec<f64> = lead.iter().map(|v| 2.0 * v).collect();
    let shrunk: Vec<f64> = lead.iter().map(|v| 0.01 * v).collect();
    let base = detect_r_peaks(&lead, 500.0).unwrap();
    assert_eq!(base.peak_indices, detect_r_peaks(&doubled, 500.0).unwrap().peak_indices);
    assert_eq!(base.peak_indices, detect_r_peaks(&shrunk, 500.0).unwrap().peak_indices);
}

fn record(lead: Vec<f64>, fs: f64) -> EcgRecord {
    EcgRecord {
        record_id: "F1".into(),
        sampling_rate_hz: fs,
        signal: vec![lead.iter().map(|v| -v).collect(), lead],
        lead_names: vec!["I".into(), "II".into()],
        age_years: Some(47.0),
        sex: Sex::Female,
        dx_codes: BTreeSet::new(),
    }
}

#[test]
fn statistics_match_direct_computation() {
    let fs = 400.0;
    let beats = beat_times(10.0, 11);
    let lead = ecg(fs, 10.0, &beats, 11);
    let idx: Vec<usize> = beats.iter().map(|b| (b * fs).round() as usize).collect();
    let rec = record(lead.clone(), fs);
    let peaks = RPeakTrain {
        peak_indices: idx.clone(),
        sampling_rate_hz: fs,
    };
    let cfg = FeatureConfig::default();
    let got = compute_wide_features(&rec, &peaks, &cfg).values;

    let rr: Vec<f64> = idx.windows(2).map(|w| (w[1] - w[0]) as f64 / fs).collect();
    let n = rr.len() as f64;
    let mean = rr.iter().sum::<f64>() / n;
    let mut sorted = rr.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let sd = (rr.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = (sorted[0], sorted[sorted.len() - 1]);
    let diffs: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
    let rmssd = (diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64).sqrt();
    let pnn50 = diffs.iter().filter(|d| d.abs() > 0.05).count() as f64 / diffs.len() as f64;
    let amps: Vec<f64> = idx.iter().map(|&i| lead[i]).collect();
    let am = amps.iter().sum::<f64>() / amps.len() as f64;
    let asd = (amps.iter().map(|a| (a - am).powi(2)).sum::<f64>() / amps.len() as f64).sqrt();
    let m = lead.len() as f64;
    let mu = lead.iter().sum::<f64>() / m;
    let var = lead.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / m;
    let skew = lead.iter().map(|x| (x - mu).powi(3)).sum::<f64>() / m / var.powf(1.5);
    let kurt = lead.iter().map(|x| (x - mu).powi(4)).sum::<f64>() / m / (var * var) - 3.0;
    let expected = [
        0.47,
        0.0,
        mean,
        median,
        sd,
        lo,
        hi,
        hi - lo,
        60.0 / mean / 300.0,
        rmssd,
        pnn50,
        idx.len() as f64 / 10.0,
        am,
        asd,
        amps.iter().copied().fold(f64::INFINITY, f64::min),
        amps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mu,
        var.sqrt(),
        skew,
        kurt,
        lead.iter().copied().fold(f64::INFINITY, f64::min),
        lead.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    ];
    for ((name, g), e) in FEATURE_NAMES.iter().zip(&got).zip(expected) {
        assert!((g - e).abs() <= 1e-9 * e.abs().max(1.0), "{name}: {g} vs {e}");
    }
}

#[test]
fn extraction_uses_lead_two_and_recovers_the_rate() {
    let fs = 500.0;
    let beats: Vec<f64> = (0..12).map(|i| 0.5 + 0.8 * i as f64).collect();
    let rec = record(ecg(fs, 10.0, &beats, 5), fs);
    let f = extract_wide_features(&rec, &FeatureConfig::default()).values;
    let hr = f[8] * 300.0;
    assert!((hr - 75.0).abs() < 1.0, "{hr}");
    assert!(f[12] > 0.5, "R amplitude on lead II is positive: {}", f[12]);
}

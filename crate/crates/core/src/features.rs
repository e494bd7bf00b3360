//! Static ("wide") per-record features: demographics plus rhythm and
//! amplitude statistics from one lead.

use std::fmt::Write as _;

use crate::dsp::{bandpass_taps, filter_lead};
use crate::record_io::{EcgRecord, Sex};

pub const NUM_WIDE_FEATURES: usize = 22;

pub const FEATURE_NAMES: [&str; NUM_WIDE_FEATURES] = [
    "age",
    "sex_male",
    "rr_mean",
    "rr_median",
    "rr_std",
    "rr_min",
    "rr_max",
    "rr_range",
    "heart_rate",
    "rmssd",
    "pnn50",
    "peak_rate",
    "r_amp_mean",
    "r_amp_std",
    "r_amp_min",
    "r_amp_max",
    "signal_mean",
    "signal_std",
    "signal_skewness",
    "signal_kurtosis",
    "signal_min",
    "signal_max",
];

/// Refractory period between accepted beats.
pub const REFRACTORY_S: f64 = 0.2;
const INTEGRATION_S: f64 = 0.15;
const LEARNING_WINDOW_S: f64 = 2.0;
const R_SEARCH_S: f64 = 0.1;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least 1 s of signal, got {samples} samples at {fs_hz} Hz")]
    TooShort { samples: usize, fs_hz: f64 },
    #[error("sampling rate {0} Hz too low for the 5-15 Hz QRS band")]
    RateTooLow(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RPeakTrain {
    pub peak_indices: Vec<usize>,
    pub sampling_rate_hz: f64,
}

impl RPeakTrain {
    pub fn empty(sampling_rate_hz: f64) -> Self {
        Self {
            peak_indices: Vec::new(),
            sampling_rate_hz,
        }
    }

    /// Successive peak-to-peak intervals in seconds.
    pub fn rr_intervals(&self) -> Vec<f64> {
        self.peak_indices
            .windows(2)
            .map(|w| (w[1] - w[0]) as f64 / self.sampling_rate_hz)
            .collect()
    }
}

/// QRS detection: 5-15 Hz bandpass, first difference, squaring, 150 ms
/// moving-window integration, then an adaptive threshold
/// `noise + 0.25·(signal − noise)` with a 200 ms refractory period.
///
/// Every stage is homogeneous in the input amplitude, so scaling the lead by
/// a power of two leaves the detections bit-for-bit unchanged.
pub fn detect_r_peaks(lead: &[f64], fs_hz: f64) -> Result<RPeakTrain, FeatureError> {
    if (lead.len() as f64) < fs_hz {
        return Err(FeatureError::TooShort {
            samples: lead.len(),
            fs_hz,
        });
    }
    if fs_hz <= 30.0 {
        return Err(FeatureError::RateTooLow(fs_hz));
    }
    let n = lead.len();
    let taps = bandpass_taps(fs_hz, 5.0, 15.0, (fs_hz.round() as usize) | 1)
        .map_err(|_| FeatureError::RateTooLow(fs_hz))?;
    let band = filter_lead(lead, &taps);

    let mut energy = vec![0.0; n];
    for i in 1..n {
        let d = band[i] - band[i - 1];
        energy[i] = d * d;
    }
    let half = ((INTEGRATION_S * fs_hz).round() as usize / 2).max(1);
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + energy[i];
    }
    let integrated: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect();

    let learn = ((LEARNING_WINDOW_S * fs_hz) as usize).clamp(1, n);
    let head = &integrated[..learn];
    let mut signal_level = 0.25 * head.iter().copied().fold(0.0, f64::max);
    let mut noise_level = 0.5 * head.iter().sum::<f64>() / learn as f64;
    let refractory = (REFRACTORY_S * fs_hz).ceil() as usize;

    // (index into `integrated`, value)
    let mut beats: Vec<(usize, f64)> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        let v = integrated[i];
        if !(v > 0.0 && v > integrated[i - 1] && v >= integrated[i + 1]) {
            continue;
        }
        let threshold = noise_level + 0.25 * (signal_level - noise_level);
        if v > threshold {
            match beats.last_mut() {
                Some(last) if i - last.0 < refractory => {
                    if v > last.1 {
                        *last = (i, v);
                        signal_level = 0.125 * v + 0.875 * signal_level;
                    }
                }
                _ => {
                    beats.push((i, v));
                    signal_level = 0.125 * v + 0.875 * signal_level;
                }
            }
        } else {
            noise_level = 0.125 * v + 0.875 * noise_level;
        }
    }

    let search = (R_SEARCH_S * fs_hz).round() as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(beats.len());
    for (i, _) in beats {
        let lo = i.saturating_sub(search);
        let hi = (i + search + 1).min(n);
        let mut best = lo;
        for j in lo..hi {
            if band[j].abs() > band[best].abs() {
                best = j;
            }
        }
        if peaks.last().is_none_or(|&p| best >= p + refractory) {
            peaks.push(best);
        }
    }
    Ok(RPeakTrain {
        peak_indices: peaks,
        sampling_rate_hz: fs_hz,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub age_impute_years: f64,
    pub age_scale: f64,
    pub heart_rate_scale: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            age_impute_years: 60.0,
            age_scale: 100.0,
            heart_rate_scale: 300.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WideFeatures {
    pub values: Vec<f64>,
}

impl WideFeatures {
    pub fn names() -> &'static [&'static str; NUM_WIDE_FEATURES] {
        &FEATURE_NAMES
    }
}

/// Lead II when present, otherwise the first lead.
pub fn feature_lead(record: &EcgRecord) -> &[f64] {
    record.lead("II").unwrap_or(&record.signal[0])
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
fn std_dev(xs: &[f64], mu: f64) -> f64 {
    (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    if s.len().is_multiple_of(2) {
        0.5 * (s[m - 1] + s[m])
    } else {
        s[m]
    }
}

fn min_max(xs: &[f64]) -> (f64, f64) {
    xs.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Builds the 22-value feature vector. See [`FEATURE_NAMES`] for the order.
/// Rhythm and R-amplitude features are zero when fewer than two peaks exist.
pub fn compute_wide_features(record: &EcgRecord, peaks: &RPeakTrain, config: &FeatureConfig) -> WideFeatures {
    let mut v = Vec::with_capacity(NUM_WIDE_FEATURES);
    v.push(record.age_years.unwrap_or(config.age_impute_years) / config.age_scale);
    v.push(if record.sex == Sex::Male { 1.0 } else { 0.0 });

    let lead = feature_lead(record);
    let rr = peaks.rr_intervals();
    if rr.is_empty() {
        v.extend([0.0; 14]);
    } else {
        let rr_mean = mean(&rr);
        let (rr_min, rr_max) = min_max(&rr);
        v.extend([rr_mean, median(&rr), std_dev(&rr, rr_mean), rr_min, rr_max, rr_max - rr_min]);
        v.push(60.0 / rr_mean / config.heart_rate_scale);
        let successive: Vec<f64> = rr.windows(2).map(|w| w[1] - w[0]).collect();
        if successive.is_empty() {
            v.extend([0.0, 0.0]);
        } else {
            v.push(mean(&successive.iter().map(|d| d * d).collect::<Vec<_>>()).sqrt());
            v.push(successive.iter().filter(|d| d.abs() > 0.05).count() as f64 / successive.len() as f64);
        }
        v.push(peaks.peak_indices.len() as f64 / record.duration_s());
        let amps: Vec<f64> = peaks.peak_indices.iter().map(|&i| lead[i]).collect();
        let amp_mean = mean(&amps);
        let (amp_min, amp_max) = min_max(&amps);
        v.extend([amp_mean, std_dev(&amps, amp_mean), amp_min, amp_max]);
    }

    let mu = mean(lead);
    let sigma = std_dev(lead, mu);
    let (skew, kurt) = if sigma > 0.0 {
        let m3 = lead.iter().map(|x| ((x - mu) / sigma).powi(3)).sum::<f64>() / lead.len() as f64;
        let m4 = lead.iter().map(|x| ((x - mu) / sigma).powi(4)).sum::<f64>() / lead.len() as f64;
        (m3, m4 - 3.0)
    } else {
        (0.0, 0.0)
    };
    let (lo, hi) = min_max(lead);
    v.extend([mu, sigma, skew, kurt, lo, hi]);
    debug_assert_eq!(v.len(), NUM_WIDE_FEATURES);
    WideFeatures { values: v }
}

/// Detects peaks on the feature lead and computes the feature vector.
/// Recordings too short for detection yield zero rhythm features.
pub fn extract_wide_features(record: &EcgRecord, config: &FeatureConfig) -> WideFeatures {
    let lead = feature_lead(record);
    let peaks = detect_r_peaks(lead, record.sampling_rate_hz)
        .unwrap_or_else(|_| RPeakTrain::empty(record.sampling_rate_hz));
    compute_wide_features(record, &peaks, config)
}

/// Per-feature z-scoring fitted on a training partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStandardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStandardizer {
    pub fn fit(rows: &[&[f64]]) -> Self {
        let width = rows.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        if rows.is_empty() {
            return Self { mean, std };
        }
        for (j, (m, s)) in mean.iter_mut().zip(&mut std).enumerate() {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            *m = self::mean(&col);
            let sd = std_dev(&col, *m);
            *s = if sd > 1e-12 { sd } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

pub fn features_csv(rows: &[(String, WideFeatures)]) -> String {
    let mut out = format!("record_id,{}\n", FEATURE_NAMES.join(","));
    for (id, f) in rows {
        let vals: Vec<String> = f.values.iter().map(|v| format!("{v:.9e}")).collect();
        let _ = writeln!(out, "{id},{}", vals.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse_train(fs: f64, seconds: f64, period_s: f64, first_s: f64) -> (Vec<f64>, Vec<usize>) {
        let n = (fs * seconds) as usize;
        let mut x = vec![0.0; n];
        let mut truth = Vec::new();
        let mut t = first_s;
        while ((t * fs).round() as usize) < n {
            let i = (t * fs).round() as usize;
            x[i] = 1.0;
            truth.push(i);
            t += period_s;
        }
        (x, truth)
    }

    fn record_with(lead: Vec<f64>, fs: f64) -> EcgRecord {
        EcgRecord {
            record_id: "t".into(),
            sampling_rate_hz: fs,
            signal: vec![lead],
            lead_names: vec!["II".into()],
            age_years: None,
            sex: Sex::Unknown,
            dx_codes: Default::default(),
        }
    }

    #[test]
    fn impulse_train_peaks_are_found() {
        let (x, truth) = impulse_train(500.0, 15.0, 1.0, 0.5);
        let peaks = detect_r_peaks(&x, 500.0).unwrap();
        assert!((14..=15).contains(&peaks.peak_indices.len()), "{:?}", peaks.peak_indices);
        for p in &peaks.peak_indices {
            let nearest = truth.iter().map(|t| t.abs_diff(*p)).min().unwrap();
            assert!(nearest as f64 / 500.0 <= 0.025, "peak {p} off by {nearest}");
        }
    }

    #[test]
    fn flat_signal_has_no_peaks() {
        assert!(detect_r_peaks(&vec![0.0; 5000], 500.0).unwrap().peak_indices.is_empty());
    }

    #[test]
    fn short_signal_is_rejected() {
        assert!(matches!(detect_r_peaks(&[0.0; 100], 500.0), Err(FeatureError::TooShort { .. })));
    }

    #[test]
    fn constant_rr_arithmetic() {
        let fs = 500.0;
        let rec = record_with(vec![0.0; 5000], fs);
        let peaks = RPeakTrain {
            peak_indices: (0..12).map(|i| 100 + i * 400).collect(),
            sampling_rate_hz: fs,
        };
        let f = compute_wide_features(&rec, &peaks, &FeatureConfig::default()).values;
        assert_eq!(f.len(), NUM_WIDE_FEATURES);
        for (got, want) in [(f[2], 0.8), (f[3], 0.8), (f[4], 0.0), (f[7], 0.0)] {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!((f[8] - 0.25).abs() < 1e-12);
        assert_eq!(f[10], 0.0);
    }

    #[test]
    fn demographic_imputation() {
        let rec = record_with(vec![0.0; 500], 500.0);
        let f = extract_wide_features(&rec, &FeatureConfig::default()).values;
        assert_eq!((f[0], f[1]), (0.6, 0.0));
        assert!(f.iter().all(|v| v.is_finite()));
        assert!(f[2..16].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn standardizer_centres_columns() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let s = FeatureStandardizer::fit(&refs);
        assert_eq!(s.apply(&rows[0]), vec![-1.0, 0.0]);
        assert_eq!(s.apply(&rows[1]), vec![1.0, 0.0]);
    }

    #[test]
    fn csv_header_names_all_features() {
        let csv = features_csv(&[("r".into(), WideFeatures { values: vec![0.0; 22] })]);
        let header = csv.lines().next().unwrap();
        assert_eq!(header.split(',').count(), 23);
        assert!(header.starts_with("record_id,age,sex_male,rr_mean"));
    }
}

//! Signal preprocessing: resample, bandpass, normalise, window.
//!
//! The fixed order is resample → filter → normalise → window. Signals are
//! `signal[lead][sample]` matrices.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Leads whose peak magnitude falls below this are treated as flat.
pub const DEGENERATE_LEAD_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DspError {
    #[error("signal is empty")]
    EmptySignal,
    #[error("leads have different lengths")]
    RaggedSignal,
    #[error("sampling rates must be positive, got {from} -> {to}")]
    BadRate { from: f64, to: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizeScope {
    /// Normalise the whole filtered recording, then cut windows from it.
    #[default]
    Recording,
    /// Normalise each extracted window on its own.
    Window,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub target_rate_hz: f64,
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    pub window_samples: usize,
    /// Odd filter length.
    pub fir_taps: usize,
    pub normalize_scope: NormalizeScope,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate_hz: 500.0,
            band_low_hz: 3.0,
            band_high_hz: 45.0,
            window_samples: 7680,
            fir_taps: 513,
            normalize_scope: NormalizeScope::Recording,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), DspError> {
        let nyquist = self.target_rate_hz / 2.0;
        if !(self.target_rate_hz > 0.0 && self.target_rate_hz.is_finite()) {
            return Err(DspError::Config(format!("target rate {} must be positive", self.target_rate_hz)));
        }
        if !(0.0 < self.band_low_hz && self.band_low_hz < self.band_high_hz && self.band_high_hz < nyquist) {
            return Err(DspError::Config(format!(
                "band edges must satisfy 0 < {} < {} < {nyquist} (Nyquist)",
                self.band_low_hz, self.band_high_hz
            )));
        }
        if self.fir_taps.is_multiple_of(2) {
            return Err(DspError::Config(format!("fir_taps {} must be odd", self.fir_taps)));
        }
        if self.window_samples == 0 {
            return Err(DspError::Config("window_samples must be positive".into()));
        }
        Ok(())
    }

    pub fn validate_for_patch(&self, d_patch: usize) -> Result<(), DspError> {
        self.validate()?;
        if d_patch == 0 || !self.window_samples.is_multiple_of(d_patch) {
            return Err(DspError::Config(format!(
                "window_samples {} not divisible by patch size {d_patch}",
                self.window_samples
            )));
        }
        Ok(())
    }
}

fn check_matrix(signal: &[Vec<f64>]) -> Result<usize, DspError> {
    let n = signal.first().map_or(0, Vec::len);
    if n == 0 {
        return Err(DspError::EmptySignal);
    }
    if signal.iter().any(|row| row.len() != n) {
        return Err(DspError::RaggedSignal);
    }
    Ok(n)
}

/// Linear-interpolation resampling. Output length is
/// `round(n · to_hz / from_hz)` (at least 1); equal rates return the input.
pub fn resample(signal: &[Vec<f64>], from_hz: f64, to_hz: f64) -> Result<Vec<Vec<f64>>, DspError> {
    if !(from_hz > 0.0 && to_hz > 0.0 && from_hz.is_finite() && to_hz.is_finite()) {
        return Err(DspError::BadRate { from: from_hz, to: to_hz });
    }
    let n = check_matrix(signal)?;
    if from_hz == to_hz {
        return Ok(signal.to_vec());
    }
    let out_len = ((n as f64 * to_hz / from_hz).round() as usize).max(1);
    let last = (n - 1) as f64;
    let positions: Vec<(usize, f64)> = (0..out_len)
        .map(|j| {
            let x = (j as f64 * from_hz / to_hz).min(last);
            let i = x.floor() as usize;
            (i, x - i as f64)
        })
        .collect();
    Ok(signal
        .iter()
        .map(|row| {
            positions
                .iter()
                .map(|&(i, frac)| {
                    if frac == 0.0 || i + 1 >= n {
                        row[i]
                    } else {
                        row[i] + frac * (row[i + 1] - row[i])
                    }
                })
                .collect()
        })
        .collect())
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

fn hamming(n: usize, len: usize) -> f64 {
    if len == 1 {
        return 1.0;
    }
    0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos()
}

/// Linear-phase bandpass taps: the difference of two Hamming-windowed
/// low-pass sincs with cutoffs `high_hz` and `low_hz`.
pub fn bandpass_taps(fs_hz: f64, low_hz: f64, high_hz: f64, taps: usize) -> Result<Vec<f64>, DspError> {
    if taps.is_multiple_of(2) {
        return Err(DspError::Config(format!("tap count {taps} must be odd")));
    }
    if !(fs_hz > 0.0 && 0.0 < low_hz && low_hz < high_hz && high_hz < fs_hz / 2.0) {
        return Err(DspError::Config(format!(
            "band {low_hz}..{high_hz} Hz invalid at {fs_hz} Hz sampling (Nyquist {})",
            fs_hz / 2.0
        )));
    }
    let center = (taps / 2) as isize;
    let fh = high_hz / fs_hz;
    let fl = low_hz / fs_hz;
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let m = (k as isize - center) as f64;
            hamming(k, taps) * (2.0 * fh * sinc(2.0 * fh * m) - 2.0 * fl * sinc(2.0 * fl * m))
        })
        .collect();
    // Floating-point evaluation of cos/sin is not exactly mirror-symmetric.
    for k in 0..taps / 2 {
        let avg = 0.5 * (h[k] + h[taps - 1 - k]);
        h[k] = avg;
        h[taps - 1 - k] = avg;
    }
    Ok(h)
}

pub fn design_bandpass(config: &PreprocessConfig) -> Result<Vec<f64>, DspError> {
    config.validate()?;
    bandpass_taps(
        config.target_rate_hz,
        config.band_low_hz,
        config.band_high_hz,
        config.fir_taps,
    )
}

/// Zero-phase FIR filtering of one lead: centred convolution with the input
/// zero-extended at both ends. Output length equals input length.
pub fn filter_lead(x: &[f64], taps: &[f64]) -> Vec<f64> {
    let len = x.len() as isize;
    let half = (taps.len() / 2) as isize;
    (0..len)
        .map(|n| {
            // y[n] = Σ_k h[k] · x[n + half − k]
            let k_lo = (n + half - len + 1).max(0);
            let k_hi = (n + half).min(taps.len() as isize - 1);
            let mut acc = 0.0;
            for k in k_lo..=k_hi {
                acc += taps[k as usize] * x[(n + half - k) as usize];
            }
            acc
        })
        .collect()
}

pub fn filter_signal(signal: &[Vec<f64>], taps: &[f64]) -> Result<Vec<Vec<f64>>, DspError> {
    check_matrix(signal)?;
    if taps.is_empty() || taps.len().is_multiple_of(2) {
        return Err(DspError::Config(format!("tap count {} must be odd", taps.len())));
    }
    Ok(signal.iter().map(|row| filter_lead(row, taps)).collect())
}

/// Scales a lead into `[-1, 1]` by its peak magnitude; flat leads become zeros.
pub fn normalize_lead(row: &[f64]) -> Vec<f64> {
    let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak < DEGENERATE_LEAD_EPS {
        vec![0.0; row.len()]
    } else {
        row.iter().map(|v| v / peak).collect()
    }
}

pub fn normalize(signal: &[Vec<f64>]) -> Vec<Vec<f64>> {
    signal.iter().map(|row| normalize_lead(row)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetPolicy {
    /// Uniform over all valid offsets, seeded.
    Random(u64),
    Start,
    Center,
}

/// A fixed-width, zero-padded slice of a preprocessed recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedWindow {
    /// `signal[lead][sample]`, every row exactly `window_samples` long.
    pub signal: Vec<Vec<f64>>,
    /// First padded position; equals the window width when nothing is padded.
    pub pad_start: usize,
    pub source_offset: usize,
}

impl ProcessedWindow {
    pub fn num_leads(&self) -> usize {
        self.signal.len()
    }

    pub fn window_samples(&self) -> usize {
        self.signal.first().map_or(0, Vec::len)
    }
}

pub fn choose_offset(num_samples: usize, window: usize, policy: OffsetPolicy) -> usize {
    if num_samples <= window {
        return 0;
    }
    let span = num_samples - window;
    match policy {
        OffsetPolicy::Start => 0,
        OffsetPolicy::Center => span / 2,
        OffsetPolicy::Random(seed) => ChaCha8Rng::seed_from_u64(seed).random_range(0..=span),
    }
}

pub fn extract_window(
    signal: &[Vec<f64>],
    config: &PreprocessConfig,
    policy: OffsetPolicy,
) -> Result<ProcessedWindow, DspError> {
    let n = check_matrix(signal)?;
    let width = config.window_samples;
    let offset = choose_offset(n, width, policy);
    let copy = width.min(n);
    let rows = signal
        .iter()
        .map(|row| {
            let mut out = vec![0.0; width];
            out[..copy].copy_from_slice(&row[offset..offset + copy]);
            out
        })
        .collect();
    Ok(ProcessedWindow {
        signal: rows,
        pad_start: copy,
        source_offset: offset,
    })
}

/// Resample → filter → (recording-scope) normalise. The result is ready for
/// [`window_from_prepared`].
pub fn prepare_signal(
    signal: &[Vec<f64>],
    sampling_rate_hz: f64,
    config: &PreprocessConfig,
    taps: &[f64],
) -> Result<Vec<Vec<f64>>, DspError> {
    let resampled = resample(signal, sampling_rate_hz, config.target_rate_hz)?;
    let filtered = filter_signal(&resampled, taps)?;
    Ok(match config.normalize_scope {
        NormalizeScope::Recording => normalize(&filtered),
        NormalizeScope::Window => filtered,
    })
}

pub fn window_from_prepared(
    prepared: &[Vec<f64>],
    config: &PreprocessConfig,
    policy: OffsetPolicy,
) -> Result<ProcessedWindow, DspError> {
    let mut window = extract_window(prepared, config, policy)?;
    if config.normalize_scope == NormalizeScope::Window {
        window.signal = normalize(&window.signal);
    }
    Ok(window)
}

/// The full chain for one recording.
pub fn preprocess(
    signal: &[Vec<f64>],
    sampling_rate_hz: f64,
    config: &PreprocessConfig,
    policy: OffsetPolicy,
) -> Result<ProcessedWindow, DspError> {
    let taps = design_bandpass(config)?;
    let prepared = prepare_signal(signal, sampling_rate_hz, config, &taps)?;
    window_from_prepared(&prepared, config, policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// |H(f)| by direct DTFT summation, centred on the middle tap.
    fn dtft_magnitude(taps: &[f64], f_hz: f64, fs_hz: f64) -> f64 {
        let w = 2.0 * PI * f_hz / fs_hz;
        let (re, im) = taps.iter().enumerate().fold((0.0, 0.0), |(re, im), (k, h)| {
            (re + h * (w * k as f64).cos(), im - h * (w * k as f64).sin())
        });
        (re * re + im * im).sqrt()
    }

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn resample_length_and_identity() {
        let x = vec![(0..5000).map(|i| i as f64).collect::<Vec<_>>()];
        assert_eq!(resample(&x, 1000.0, 500.0).unwrap()[0].len(), 2500);
        let same = resample(&x, 500.0, 500.0).unwrap();
        assert_eq!(same, x);
        assert_eq!(resample(&[vec![]], 250.0, 500.0), Err(DspError::EmptySignal));
    }

    #[test]
    fn resampled_sinusoid_tracks_analytic_curve() {
        let (fs_in, fs_out, n) = (257.0, 500.0, 2570);
        let x = vec![sine(5.0, fs_in, n)];
        let y = resample(&x, fs_in, fs_out).unwrap();
        let span_end = (n - 1) as f64 / fs_in;
        let mut worst: f64 = 0.0;
        for (j, v) in y[0].iter().enumerate() {
            let t = j as f64 / fs_out;
            if t <= span_end {
                worst = worst.max((v - (2.0 * PI * 5.0 * t).sin()).abs());
            }
        }
        assert!(worst < 0.01, "max deviation {worst}");
    }

    #[test]
    fn bandpass_is_symmetric_with_expected_response() {
        let taps = design_bandpass(&PreprocessConfig::default()).unwrap();
        assert_eq!(taps.len(), 513);
        for k in 0..taps.len() {
            assert_eq!(taps[k], taps[taps.len() - 1 - k]);
        }
        assert!(taps.iter().sum::<f64>().abs() < 0.01);
        let g20 = dtft_magnitude(&taps, 20.0, 500.0);
        assert!((20.0 * g20.log10()).abs() <= 1.0, "20 Hz gain {g20}");
        assert!(dtft_magnitude(&taps, 100.0, 500.0) < 0.01);
    }

    #[test]
    fn band_edges_beyond_nyquist_are_rejected() {
        let cfg = PreprocessConfig {
            band_high_hz: 260.0,
            ..PreprocessConfig::default()
        };
        assert!(design_bandpass(&cfg).is_err());
        let even = PreprocessConfig {
            fir_taps: 512,
            ..PreprocessConfig::default()
        };
        assert!(design_bandpass(&even).is_err());
    }

    #[test]
    fn filter_zero_dc_and_passband() {
        let taps = design_bandpass(&PreprocessConfig::default()).unwrap();
        let n = 5000;
        let zero = filter_signal(&[vec![0.0; n]], &taps).unwrap();
        assert!(zero[0].iter().all(|v| *v == 0.0));

        // Interior samples, away from the zero-extended edges.
        let half = taps.len() / 2;
        let interior = half..n - half;
        let dc = filter_signal(&[vec![1.0; n]], &taps).unwrap();
        let dc_max = dc[0][interior.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(dc_max < 0.01, "dc leakage {dc_max}");

        let tone = filter_signal(&[sine(20.0, 500.0, n)], &taps).unwrap();
        let amp = tone[0][interior].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((0.89..=1.12).contains(&amp), "20 Hz amplitude ratio {amp}");
    }

    #[test]
    fn filter_is_linear() {
        let taps = bandpass_taps(500.0, 3.0, 45.0, 101).unwrap();
        let x: Vec<f64> = (0..800).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let y: Vec<f64> = (0..800).map(|i| ((i * 53) % 89) as f64 / 44.0 - 1.0).collect();
        let (a, b) = (2.5, -0.75);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
        let fx = filter_lead(&x, &taps);
        let fy = filter_lead(&y, &taps);
        let fc = filter_lead(&combo, &taps);
        for i in 0..800 {
            let expected = a * fx[i] + b * fy[i];
            assert!((fc[i] - expected).abs() <= 1e-9 * expected.abs().max(1.0));
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_lead(&[0.5, -2.0, 1.0]), vec![0.25, -1.0, 0.5]);
        assert_eq!(normalize_lead(&[0.0; 4]), vec![0.0; 4]);
        assert_eq!(normalize_lead(&[1e-9, -1e-9]), vec![0.0; 2]);
    }

    proptest! {
        #[test]
        fn normalized_peak_is_zero_or_one(rows in proptest::collection::vec(
            proptest::collection::vec(-100.0f64..100.0, 1..50), 1..4)
        ) {
            let n = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(n, 0.0); r }).collect();
            let out = normalize(&rows);
            for row in &out {
                let peak = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(peak == 0.0 || peak == 1.0);
            }
            let twice = normalize(&out);
            for (a, b) in twice.iter().flatten().zip(out.iter().flatten()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn window_start_and_padding() {
        let cfg = PreprocessConfig::default();
        let long = vec![(0..10_000).map(|i| i as f64).collect::<Vec<_>>()];
        let w = extract_window(&long, &cfg, OffsetPolicy::Start).unwrap();
        assert_eq!(w.signal[0], long[0][..7680].to_vec());
        assert_eq!(w.pad_start, 7680);

        let short = vec![(1..=5000).map(|i| i as f64).collect::<Vec<_>>()];
        let w = extract_window(&short, &cfg, OffsetPolicy::Center).unwrap();
        assert_eq!(w.signal[0][..5000], short[0][..]);
        assert!(w.signal[0][5000..].iter().all(|v| *v == 0.0));
        assert_eq!((w.pad_start, w.source_offset), (5000, 0));

        let w = extract_window(&long, &cfg, OffsetPolicy::Center).unwrap();
        assert_eq!(w.source_offset, (10_000 - 7680) / 2);
    }

    #[test]
    fn random_offsets_are_seeded_and_in_range() {
        for seed in 0..1000 {
            let a = choose_offset(9000, 7680, OffsetPolicy::Random(seed));
            assert_eq!(a, choose_offset(9000, 7680, OffsetPolicy::Random(seed)));
            assert!(a <= 9000 - 7680);
        }
    }

    #[test]
    fn start_window_of_exact_length_is_identity() {
        let cfg = PreprocessConfig {
            window_samples: 64,
            ..PreprocessConfig::default()
        };
        let x = vec![(0..64).map(|i| (i as f64).sin()).collect::<Vec<_>>(); 2];
        let w = extract_window(&x, &cfg, OffsetPolicy::Start).unwrap();
        assert_eq!(w.signal, x);
    }

    #[test]
    fn window_scope_normalises_after_cutting() {
        let cfg = PreprocessConfig {
            normalize_scope: NormalizeScope::Window,
            window_samples: 4,
            ..PreprocessConfig::default()
        };
        let prepared = vec![vec![0.1, 0.2, 0.4, 0.2, 8.0, 8.0]];
        let w = window_from_prepared(&prepared, &cfg, OffsetPolicy::Start).unwrap();
        assert_eq!(w.signal[0], vec![0.25, 0.5, 1.0, 0.5]);
    }
}

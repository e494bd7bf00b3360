//! Labeled synthetic ECG-like recordings for offline runs.
//!
//! Each beat is a sum of Gaussian P, Q, R, S and T waves placed on a beat
//! train whose rate and regularity depend on the rhythm label. Morphology
//! labels scale the QRS complex or invert the T wave. Baseline wander and
//! white noise are added per lead.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::metrics::{MetricError, WeightMatrix, NORMAL_CLASS_CODE};
use crate::record_io::{write_record, ClassMap, EcgRecord, RecordError, Sex, WriteOptions, STANDARD_LEADS};

pub const SINUS_RHYTHM: &str = NORMAL_CLASS_CODE;
pub const SINUS_TACHYCARDIA: &str = "427084000";
pub const SINUS_BRADYCARDIA: &str = "426177001";
pub const LOW_QRS_VOLTAGE: &str = "251146004";
pub const T_WAVE_ABNORMAL: &str = "164934002";
pub const ATRIAL_FIBRILLATION: &str = "164889003";

/// Labels the generator can produce, in class order.
pub const SYNTH_CODES: [&str; 6] = [
    SINUS_RHYTHM,
    SINUS_TACHYCARDIA,
    SINUS_BRADYCARDIA,
    LOW_QRS_VOLTAGE,
    T_WAVE_ABNORMAL,
    ATRIAL_FIBRILLATION,
];

const BUNDLED_CLASS_MAP: &str = include_str!("../data/class_map_2021.csv");
const LEAD_GAINS: [f64; 12] = [0.7, 1.0, 0.4, -0.85, 0.3, 0.7, -0.4, -0.2, 0.5, 1.1, 1.0, 0.8];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The 26 scored classes of the 2021 challenge, with equivalent codes
/// sharing a class.
pub fn bundled_class_map() -> ClassMap {
    ClassMap::from_csv_str(BUNDLED_CLASS_MAP).expect("bundled class map is valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClasses {
    /// The bundled 26-class map.
    Full,
    /// The first `k` entries of [`SYNTH_CODES`].
    First(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub records: usize,
    pub seed: u64,
    pub sampling_rate_hz: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub noise_std: f64,
    pub wander_amplitude: f64,
    /// Probability of each morphology label.
    pub morphology_rate: f64,
    pub classes: SynthClasses,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            records: 8,
            seed: 0,
            sampling_rate_hz: 500.0,
            min_duration_s: 10.0,
            max_duration_s: 20.0,
            noise_std: 0.01,
            wander_amplitude: 0.05,
            morphology_rate: 0.3,
            classes: SynthClasses::Full,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if self.records == 0 {
            return bad("records must be at least 1");
        }
        if !(self.sampling_rate_hz > 30.0 && self.sampling_rate_hz.is_finite()) {
            return bad("sampling rate must exceed 30 Hz");
        }
        if !(self.min_duration_s >= 1.0 && self.max_duration_s >= self.min_duration_s) {
            return bad("durations must satisfy 1 <= min <= max");
        }
        if !(self.noise_std >= 0.0 && self.wander_amplitude >= 0.0) {
            return bad("noise and wander must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.morphology_rate) {
            return bad("morphology_rate outside [0, 1]");
        }
        if let SynthClasses::First(k) = self.classes {
            if k == 0 || k > SYNTH_CODES.len() {
                return Err(SynthError::Config(format!("classes must be full or 1..={}", SYNTH_CODES.len())));
            }
        }
        Ok(())
    }

    pub fn class_map(&self) -> ClassMap {
        match self.classes {
            SynthClasses::Full => bundled_class_map(),
            SynthClasses::First(k) => ClassMap::identity(SYNTH_CODES[..k].iter().map(|c| c.to_string()).collect()),
        }
    }

    fn available(&self) -> &'static [&'static str] {
        match self.classes {
            SynthClasses::Full => &SYNTH_CODES,
            SynthClasses::First(k) => &SYNTH_CODES[..k],
        }
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Wave {
    amplitude: f64,
    centre_s: f64,
    width_s: f64,
}

fn beat_waves(low_voltage: bool, t_inverted: bool, with_p: bool) -> Vec<Wave> {
    let qrs = if low_voltage { 0.3 } else { 1.0 };
    let mut waves = vec![
        Wave { amplitude: -0.1 * qrs, centre_s: -0.03, width_s: 0.008 },
        Wave { amplitude: 1.0 * qrs, centre_s: 0.0, width_s: 0.01 },
        Wave { amplitude: -0.25 * qrs, centre_s: 0.035, width_s: 0.01 },
        Wave { amplitude: if t_inverted { -0.25 } else { 0.3 }, centre_s: 0.28, width_s: 0.045 },
    ];
    if with_p {
        waves.push(Wave { amplitude: 0.12, centre_s: -0.18, width_s: 0.025 });
    }
    waves
}

/// Generates record `index` (0-based) of the dataset described by `config`.
pub fn synth_record(config: &SynthConfig, index: usize) -> EcgRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, index as u64));
    let available = config.available();
    let rhythms: Vec<&str> = [SINUS_RHYTHM, SINUS_TACHYCARDIA, SINUS_BRADYCARDIA, ATRIAL_FIBRILLATION]
        .into_iter()
        .filter(|c| available.contains(c))
        .collect();
    let rhythm = rhythms[rng.random_range(0..rhythms.len())];
    let low_voltage = available.contains(&LOW_QRS_VOLTAGE) && rng.random::<f64>() < config.morphology_rate;
    let t_inverted = available.contains(&T_WAVE_ABNORMAL) && rng.random::<f64>() < config.morphology_rate;

    let fs = config.sampling_rate_hz;
    let duration = if config.max_duration_s > config.min_duration_s {
        rng.random_range(config.min_duration_s..=config.max_duration_s)
    } else {
        config.min_duration_s
    };
    let n = (duration * fs).round() as usize;
    let heart_rate: f64 = match rhythm {
        SINUS_TACHYCARDIA => rng.random_range(110.0..150.0),
        SINUS_BRADYCARDIA => rng.random_range(40.0..55.0),
        _ => rng.random_range(60.0..95.0),
    };
    let base_rr = 60.0 / heart_rate;
    let jitter = Normal::new(0.0, 0.02 * base_rr).expect("positive std");
    let mut beats = Vec::new();
    let mut t = rng.random_range(0.1..0.5);
    let end = n as f64 / fs;
    while t < end {
        beats.push(t);
        t += if rhythm == ATRIAL_FIBRILLATION {
            rng.random_range(0.35..1.0)
        } else {
            (base_rr + jitter.sample(&mut rng)).max(0.25)
        };
    }
    let waves = beat_waves(low_voltage, t_inverted, rhythm != ATRIAL_FIBRILLATION);
    let mut template = vec![0.0; n];
    for (k, slot) in template.iter_mut().enumerate() {
        let time = k as f64 / fs;
        let start = beats.partition_point(|&b| b < time - 0.6);
        for &b in beats[start..].iter().take_while(|&&b| b <= time + 0.3) {
            for w in &waves {
                let z = (time - b - w.centre_s) / w.width_s;
                *slot += w.amplitude * (-0.5 * z * z).exp();
            }
        }
    }
    let fib_phase = rng.random_range(0.0..2.0 * PI);
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("positive std");
    let signal: Vec<Vec<f64>> = LEAD_GAINS
        .iter()
        .map(|&gain| {
            let phase = rng.random_range(0.0..2.0 * PI);
            let wander_hz = rng.random_range(0.15..0.4);
            template
                .iter()
                .enumerate()
                .map(|(k, &v)| {
                    let time = k as f64 / fs;
                    let mut x = gain * v + config.wander_amplitude * (2.0 * PI * wander_hz * time + phase).sin();
                    if rhythm == ATRIAL_FIBRILLATION {
                        x += 0.04 * (2.0 * PI * 6.0 * time + fib_phase).sin();
                    }
                    if config.noise_std > 0.0 {
                        x += noise.sample(&mut rng);
                    }
                    x
                })
                .collect()
        })
        .collect();

    let mut dx_codes = BTreeSet::from([rhythm.to_string()]);
    if low_voltage {
        dx_codes.insert(LOW_QRS_VOLTAGE.to_string());
    }
    if t_inverted {
        dx_codes.insert(T_WAVE_ABNORMAL.to_string());
    }
    EcgRecord {
        record_id: format!("S{:04}", index + 1),
        sampling_rate_hz: fs,
        signal,
        lead_names: STANDARD_LEADS.iter().map(|s| s.to_string()).collect(),
        age_years: Some(f64::from(rng.random_range(20u32..=90))),
        sex: if rng.random::<bool>() { Sex::Male } else { Sex::Female },
        dx_codes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub record_ids: Vec<String>,
    pub class_map_path: PathBuf,
    pub weights_path: PathBuf,
}

/// Writes every record plus `class_map.csv` and a non-official
/// `weights.csv` into `dir`.
pub fn write_dataset(config: &SynthConfig, dir: &Path) -> Result<SynthSummary, SynthError> {
    config.validate()?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut record_ids = Vec::with_capacity(config.records);
    for i in 0..config.records {
        let record = synth_record(config, i);
        write_record(&record, dir, WriteOptions::default())?;
        record_ids.push(record.record_id);
    }
    let class_map = config.class_map();
    let class_map_path = dir.join("class_map.csv");
    std::fs::write(&class_map_path, class_map.to_csv_string()).map_err(io(&class_map_path))?;
    let codes = class_map.class_codes().to_vec();
    let normal = class_map
        .index_of_class(SINUS_RHYTHM)
        .ok_or_else(|| SynthError::Config("class list lacks sinus rhythm".into()))?;
    let weights = WeightMatrix::synthetic(codes, normal)?;
    let weights_path = dir.join("weights.csv");
    std::fs::write(&weights_path, weights.to_csv_string()).map_err(io(&weights_path))?;
    Ok(SynthSummary {
        record_ids,
        class_map_path,
        weights_path,
    })
}

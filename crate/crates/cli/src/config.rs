//! Layered run configuration: built-in defaults, then an INI file, then
//! `--set section.key=value` overrides. Every key is checked against the
//! schema below.

use std::path::Path;

use ini::Ini;
use waveformer::dsp::{NormalizeScope, PreprocessConfig};
use waveformer::features::{FeatureConfig, NUM_WIDE_FEATURES};
use waveformer::model::ModelConfig;
use waveformer::record_io::LeadSubset;
use waveformer::train::{Holdout, TrainConfig};

use crate::error::CliError;

/// Keys derived from the data or other sections.
const DERIVED_MODEL_KEYS: [&str; 3] = ["num_leads", "window_samples", "d_class"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        };
        c.sync();
        c
    }
}

fn parse<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::usage(format!("{section}.{key}: cannot parse {value:?}")))
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut entries: Vec<(String, String, String)> = Vec::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            let ini = Ini::load_from_str(&text)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            for (section, props) in ini.iter() {
                let section = section.unwrap_or("");
                for (k, v) in props.iter() {
                    entries.push((section.to_string(), k.to_string(), v.to_string()));
                }
            }
        }
        for o in overrides {
            let (lhs, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("--set {o:?}: expected section.key=value")))?;
            let (section, key) = lhs
                .split_once('.')
                .ok_or_else(|| CliError::usage(format!("--set {o:?}: expected section.key=value")))?;
            entries.push((section.trim().into(), key.trim().into(), value.trim().into()));
        }
        let mut config = Self::default();
        // A preset replaces the whole model section, so it applies first.
        for (section, key, value) in &entries {
            if section == "model" && key == "preset" {
                config.model = match value.as_str() {
                    "default" => ModelConfig::default(),
                    "toy" => ModelConfig {
                        d_wide: NUM_WIDE_FEATURES,
                        d_class: ModelConfig::default().d_class,
                        ..ModelConfig::toy()
                    },
                    _ => return Err(CliError::usage(format!("model.preset: unknown preset {value:?}"))),
                };
            }
        }
        for (section, key, value) in &entries {
            config.set(section, key, value)?;
        }
        config.sync();
        config.model.validate().map_err(|e| CliError::usage(e.to_string()))?;
        config
            .train
            .preprocess
            .validate_for_patch(config.model.d_patch)
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(config)
    }

    /// Copies the derived model dimensions from the other sections.
    fn sync(&mut self) {
        self.model.num_leads = self.train.lead_subset.len();
        self.model.window_samples = self.train.preprocess.window_samples;
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let t = &mut self.train;
        match (section, key) {
            ("model", "preset") => {}
            ("model", k) if DERIVED_MODEL_KEYS.contains(&k) => {
                return Err(CliError::usage(format!(
                    "model.{k} is derived (leads from train.leads, window from preprocess.window_samples, classes from the data)"
                )));
            }
            ("model", k) => self.model.set(k, value).map_err(|e| CliError::usage(e.to_string()))?,
            ("preprocess", "target_rate_hz") => t.preprocess.target_rate_hz = parse(section, key, value)?,
            ("preprocess", "band_low_hz") => t.preprocess.band_low_hz = parse(section, key, value)?,
            ("preprocess", "band_high_hz") => t.preprocess.band_high_hz = parse(section, key, value)?,
            ("preprocess", "window_samples") => t.preprocess.window_samples = parse(section, key, value)?,
            ("preprocess", "fir_taps") => t.preprocess.fir_taps = parse(section, key, value)?,
            ("preprocess", "normalize_scope") => {
                t.preprocess.normalize_scope = match value {
                    "recording" => NormalizeScope::Recording,
                    "window" => NormalizeScope::Window,
                    _ => return Err(CliError::usage(format!("preprocess.normalize_scope: unknown value {value:?}"))),
                }
            }
            ("train", "batch_size_train") => t.batch_size_train = parse(section, key, value)?,
            ("train", "batch_size_val") => t.batch_size_val = parse(section, key, value)?,
            ("train", "learning_rate") => t.learning_rate = parse(section, key, value)?,
            ("train", "max_steps") => t.max_steps = parse(section, key, value)?,
            ("train", "seed") => t.seed = parse(section, key, value)?,
            ("train", "folds") => t.folds = parse(section, key, value)?,
            ("train", "eval_every") => t.eval_every = parse(section, key, value)?,
            ("train", "standardize_wide") => t.standardize_wide = parse(section, key, value)?,
            ("train", "leads") => {
                t.lead_subset = LeadSubset::parse(value).map_err(|e| CliError::usage(format!("train.leads: {e}")))?
            }
            ("train", "holdout") => {
                t.holdout = match value {
                    "fold" => Holdout::Fold,
                    "none" => Holdout::None,
                    _ => return Err(CliError::usage(format!("train.holdout: unknown value {value:?}"))),
                }
            }
            ("features", "age_impute_years") => t.features.age_impute_years = parse(section, key, value)?,
            ("features", "age_scale") => t.features.age_scale = parse(section, key, value)?,
            ("features", "heart_rate_scale") => t.features.heart_rate_scale = parse(section, key, value)?,
            _ => return Err(CliError::usage(format!("unknown config key {section}.{key}"))),
        }
        Ok(())
    }

    /// Resolved configuration in the same INI schema `load` accepts, with
    /// derived keys omitted.
    pub fn to_ini_string(&self) -> String {
        let mut ini = Ini::new();
        let p: &PreprocessConfig = &self.train.preprocess;
        ini.with_section(Some("preprocess"))
            .set("target_rate_hz", p.target_rate_hz.to_string())
            .set("band_low_hz", p.band_low_hz.to_string())
            .set("band_high_hz", p.band_high_hz.to_string())
            .set("window_samples", p.window_samples.to_string())
            .set("fir_taps", p.fir_taps.to_string())
            .set(
                "normalize_scope",
                match p.normalize_scope {
                    NormalizeScope::Recording => "recording",
                    NormalizeScope::Window => "window",
                },
            );
        {
            let mut model = ini.with_section(Some("model"));
            for line in self.model.to_kv_string().lines() {
                if let Some((k, v)) = line.split_once(" = ") {
                    if !DERIVED_MODEL_KEYS.contains(&k) {
                        model.set(k, v);
                    }
                }
            }
        }
        let t = &self.train;
        let leads = t.lead_subset.label();
        ini.with_section(Some("train"))
            .set("batch_size_train", t.batch_size_train.to_string())
            .set("batch_size_val", t.batch_size_val.to_string())
            .set("learning_rate", t.learning_rate.to_string())
            .set("max_steps", t.max_steps.to_string())
            .set("seed", t.seed.to_string())
            .set("leads", leads)
            .set("folds", t.folds.to_string())
            .set("eval_every", t.eval_every.to_string())
            .set(
                "holdout",
                match t.holdout {
                    Holdout::Fold => "fold",
                    Holdout::None => "none",
                },
            )
            .set("standardize_wide", t.standardize_wide.to_string());
        let f: &FeatureConfig = &t.features;
        ini.with_section(Some("features"))
            .set("age_impute_years", f.age_impute_years.to_string())
            .set("age_scale", f.age_scale.to_string())
            .set("heart_rate_scale", f.heart_rate_scale.to_string());
        let mut buf = Vec::new();
        ini.write_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ini output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_round_trip() {
        let c = RunConfig::load(
            None,
            &[
                "model.preset=toy".into(),
                "preprocess.window_samples=64".into(),
                "train.leads=2".into(),
                "train.max_steps=7".into(),
            ],
        )
        .unwrap();
        assert_eq!((c.model.d_model, c.model.num_leads, c.model.window_samples), (16, 2, 64));
        assert_eq!(c.train.max_steps, 7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ini");
        std::fs::write(&path, c.to_ini_string()).unwrap();
        assert_eq!(RunConfig::load(Some(&path), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_and_derived_keys_are_rejected() {
        assert!(RunConfig::load(None, &["train.bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["model.d_class=3".into()]).is_err());
        assert!(RunConfig::load(None, &["nosection=1".into()]).is_err());
    }
}

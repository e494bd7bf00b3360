//! Mini-batch training, per-class threshold fitting and cross-validation.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Adam, AdamConfig, Tensor, TensorError};
use crate::dsp::{design_bandpass, prepare_signal, window_from_prepared, DspError, OffsetPolicy, PreprocessConfig};
use crate::features::{extract_wide_features, FeatureConfig, FeatureStandardizer};
use crate::metrics::{apply_thresholds, challenge_metric, macro_auroc, per_class_auroc, MetricError, WeightMatrix};
use crate::model::{
    bce, forward_tokens, init_params, loss_and_gradients, patchify, ForwardInput, ForwardOptions, ModelConfig,
    ModelError, ModelParams,
};
use crate::record_io::{parse_record, select_leads, DatasetManifest, LeadSubset, RecordError};
use crate::stratify::FoldAssignment;

const TAG_SHUFFLE: u64 = 0x5348_5546;
const TAG_DROPOUT: u64 = 0x4452_4f50;
const TIE_EPS: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("fold {fold} out of range for {k} folds")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("{0} partition is empty")]
    EmptyPartition(&'static str),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("record {record_id}: {source}")]
    Record {
        record_id: String,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("thresholds file: {0}")]
    Thresholds(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Dsp(#[from] DspError),
}

/// Which records evaluate a fold's model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Holdout {
    /// The fold itself is held out; the remaining folds train.
    #[default]
    Fold,
    /// Every record trains and is also used for validation.
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size_train: usize,
    pub batch_size_val: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub lead_subset: LeadSubset,
    pub folds: usize,
    /// Validation period in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub holdout: Holdout,
    pub standardize_wide: bool,
    pub preprocess: PreprocessConfig,
    pub features: FeatureConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size_train: 128,
            batch_size_val: 64,
            learning_rate: 1e-4,
            max_steps: 1000,
            seed: 0,
            lead_subset: LeadSubset::twelve(),
            folds: 10,
            eval_every: 0,
            threads: 0,
            holdout: Holdout::Fold,
            standardize_wide: false,
            preprocess: PreprocessConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<(), TrainError> {
        if self.batch_size_train == 0 || self.batch_size_val == 0 {
            return Err(TrainError::Config("batch sizes must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.folds < 2 {
            return Err(TrainError::Config("at least 2 folds are required".into()));
        }
        if self.preprocess.window_samples != model.window_samples {
            return Err(TrainError::Config(format!(
                "preprocessing window {} differs from model window {}",
                self.preprocess.window_samples, model.window_samples
            )));
        }
        if self.lead_subset.len() != model.num_leads {
            return Err(TrainError::Config(format!(
                "lead subset has {} leads, model expects {}",
                self.lead_subset.len(),
                model.num_leads
            )));
        }
        model.validate()?;
        self.preprocess.validate_for_patch(model.d_patch)?;
        Ok(())
    }
}

pub(crate) fn mix3(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ c.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, TrainError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| TrainError::Config(format!("thread pool: {e}")))
}

/// A recording after lead selection, resampling and filtering, with its
/// wide features and label row.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRecord {
    pub record_id: String,
    pub signal: Vec<Vec<f64>>,
    pub wide: Vec<f64>,
    pub labels: Vec<bool>,
}

impl PreparedRecord {
    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| f64::from(u8::from(y))).collect()
    }
}

fn record_error<E: std::error::Error + Send + Sync + 'static>(id: &str) -> impl FnOnce(E) -> TrainError + '_ {
    move |e| TrainError::Record {
        record_id: id.to_string(),
        source: Box::new(e),
    }
}

/// Loads one recording and prepares it for windowing. `taps` must come
/// from [`design_bandpass`] on `config.preprocess`.
pub fn prepare_record(
    header_path: &Path,
    labels: Vec<bool>,
    config: &TrainConfig,
    taps: &[f64],
) -> Result<PreparedRecord, TrainError> {
    let display = header_path.display().to_string();
    let record = parse_record(header_path).map_err(record_error::<RecordError>(&display))?;
    let id = record.record_id.as_str();
    let wide = extract_wide_features(&record, &config.features).values;
    let selected = select_leads(&record, &config.lead_subset).map_err(record_error::<RecordError>(id))?;
    let signal = prepare_signal(&selected.signal, selected.sampling_rate_hz, &config.preprocess, taps)
        .map_err(record_error::<DspError>(id))?;
    Ok(PreparedRecord {
        record_id: record.record_id.clone(),
        signal,
        wide,
        labels,
    })
}

/// Loads and preprocesses every manifest entry, in manifest order.
pub fn prepare_records(
    manifest: &DatasetManifest,
    config: &TrainConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<PreparedRecord>, TrainError> {
    let taps = design_bandpass(&config.preprocess)?;
    let labels = manifest.label_matrix();
    pool.install(|| {
        manifest
            .entries
            .par_iter()
            .zip(labels.par_iter())
            .map(|(entry, row)| prepare_record(&entry.header_path, row.clone(), config, &taps))
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdFit {
    pub thresholds: Vec<f64>,
    /// Challenge metric at the returned thresholds; `None` when undefined.
    pub metric: Option<f64>,
    /// Classes with no positive example; their thresholds stay at 0.5.
    pub degenerate_classes: Vec<usize>,
}

/// Candidate thresholds `0.02, 0.04, ..., 0.98`.
pub fn threshold_grid() -> Vec<f64> {
    (1..=49).map(|k| k as f64 / 50.0).collect()
}

/// Coordinate ascent on the challenge metric: thresholds start at 0.5 and
/// each class is grid-searched in turn with the others fixed, for two full
/// passes. Among candidates scoring within `1e-12` of the best (and no
/// worse than the current value) the one nearest 0.5 wins.
pub fn fit_thresholds(
    probabilities: &[Vec<f64>],
    labels: &[Vec<bool>],
    weights: &WeightMatrix,
) -> Result<ThresholdFit, TrainError> {
    let c = weights.num_classes();
    if probabilities.len() != labels.len() || probabilities.iter().any(|r| r.len() != c) {
        return Err(MetricError::Shape("probabilities and labels disagree".into()).into());
    }
    let mut thresholds = vec![0.5; c];
    let degenerate_classes: Vec<usize> = (0..c).filter(|&j| !labels.iter().any(|r| r[j])).collect();
    // colsum[r][j] = sum of w[i][j] over the true classes i of record r.
    let colsum: Vec<Vec<f64>> = labels
        .iter()
        .map(|t| (0..c).map(|j| (0..c).filter(|&i| t[i]).map(|i| weights.w[i][j]).sum()).collect())
        .collect();
    let mut preds = apply_thresholds(probabilities, &thresholds);
    let mut numer: Vec<f64> = preds
        .iter()
        .zip(&colsum)
        .map(|(p, s)| (0..c).filter(|&j| p[j]).map(|j| s[j]).sum())
        .collect();
    let mut union: Vec<usize> = preds
        .iter()
        .zip(labels)
        .map(|(p, t)| p.iter().zip(t).filter(|(a, b)| **a || **b).count())
        .collect();

    let grid = threshold_grid();
    for _pass in 0..2 {
        for j in 0..c {
            if degenerate_classes.contains(&j) {
                continue;
            }
            let score_at = |t: f64| -> f64 {
                let mut total = 0.0;
                for r in 0..probabilities.len() {
                    let new = probabilities[r][j] >= t;
                    let (mut n, mut u) = (numer[r], union[r]);
                    if new != preds[r][j] {
                        let sign = if new { 1.0 } else { -1.0 };
                        n += sign * colsum[r][j];
                        if !labels[r][j] {
                            u = if new { u + 1 } else { u - 1 };
                        }
                    }
                    total += n / u.max(1) as f64;
                }
                total
            };
            let current = score_at(thresholds[j]);
            let scores: Vec<f64> = grid.iter().map(|&t| score_at(t)).collect();
            let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let floor = (best - TIE_EPS).max(current);
            let mut chosen = thresholds[j];
            let mut chosen_dist = f64::INFINITY;
            for (&t, &s) in grid.iter().zip(&scores) {
                let dist = (t - 0.5).abs();
                if s >= floor && dist < chosen_dist {
                    chosen = t;
                    chosen_dist = dist;
                }
            }
            thresholds[j] = chosen;
            for r in 0..probabilities.len() {
                let new = probabilities[r][j] >= chosen;
                if new != preds[r][j] {
                    let sign = if new { 1.0 } else { -1.0 };
                    numer[r] += sign * colsum[r][j];
                    if !labels[r][j] {
                        union[r] = if new { union[r] + 1 } else { union[r] - 1 };
                    }
                    preds[r][j] = new;
                }
            }
        }
    }
    let metric = match challenge_metric(labels, &preds, weights) {
        Ok(m) => Some(m),
        Err(MetricError::Degenerate(_)) => None,
        Err(e) => return Err(e.into()),
    };
    Ok(ThresholdFit {
        thresholds,
        metric,
        degenerate_classes,
    })
}

pub fn thresholds_to_csv(class_codes: &[String], thresholds: &[f64]) -> String {
    let mut s = String::from("class_code,threshold\n");
    for (c, t) in class_codes.iter().zip(thresholds) {
        let _ = writeln!(s, "{c},{t}");
    }
    s
}

pub fn thresholds_from_csv(text: &str, class_codes: &[String]) -> Result<Vec<f64>, TrainError> {
    let mut out = Vec::with_capacity(class_codes.len());
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        if i == 0 && line.trim() == "class_code,threshold" {
            continue;
        }
        let (code, t) = line
            .split_once(',')
            .ok_or_else(|| TrainError::Thresholds(format!("line {}: expected class_code,threshold", i + 1)))?;
        let expected = class_codes
            .get(out.len())
            .ok_or_else(|| TrainError::Thresholds("more thresholds than classes".into()))?;
        if code.trim() != expected {
            return Err(TrainError::Thresholds(format!("expected class {expected}, found {code}")));
        }
        let t: f64 = t
            .trim()
            .parse()
            .map_err(|_| TrainError::Thresholds(format!("bad threshold {t:?}")))?;
        if !(t > 0.0 && t < 1.0) {
            return Err(TrainError::Thresholds(format!("threshold {t} outside (0, 1)")));
        }
        out.push(t);
    }
    if out.len() != class_codes.len() {
        return Err(TrainError::Thresholds(format!(
            "{} thresholds for {} classes",
            out.len(),
            class_codes.len()
        )));
    }
    Ok(out)
}

/// Scores of one partition under fixed parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionEval {
    pub probabilities: Vec<Vec<f64>>,
    pub bce: f64,
    pub per_class_auroc: Vec<Option<f64>>,
    pub auroc_macro: Option<f64>,
}

fn wide_for(record: &PreparedRecord, standardizer: Option<&FeatureStandardizer>) -> Vec<f64> {
    match standardizer {
        Some(s) => s.apply(&record.wide),
        None => record.wide.clone(),
    }
}

/// Eval-mode probabilities on centred windows.
pub fn predict(
    params: &ModelParams,
    records: &[&PreparedRecord],
    standardizer: Option<&FeatureStandardizer>,
    model: &ModelConfig,
    config: &TrainConfig,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(config.batch_size_val) {
        let part: Result<Vec<Vec<f64>>, TrainError> = pool.install(|| {
            chunk
                .par_iter()
                .map(|r| {
                    let window = window_from_prepared(&r.signal, &config.preprocess, OffsetPolicy::Center)?;
                    let tokens = patchify(&window.signal, model)?;
                    let wide = wide_for(r, standardizer);
                    let input = ForwardInput {
                        tokens: &tokens,
                        wide: &wide,
                        pad_start: window.pad_start,
                    };
                    Ok(forward_tokens(params, &input, model, &ForwardOptions::eval())?.probabilities)
                })
                .collect()
        });
        out.extend(part?);
    }
    Ok(out)
}

pub fn evaluate_partition(
    params: &ModelParams,
    records: &[&PreparedRecord],
    standardizer: Option<&FeatureStandardizer>,
    model: &ModelConfig,
    config: &TrainConfig,
    pool: &rayon::ThreadPool,
) -> Result<PartitionEval, TrainError> {
    let probabilities = predict(params, records, standardizer, model, config, pool)?;
    let labels: Vec<Vec<bool>> = records.iter().map(|r| r.labels.clone()).collect();
    let bce_total: f64 = probabilities
        .iter()
        .zip(records)
        .map(|(p, r)| bce(p, &r.targets()))
        .sum();
    let per_class = per_class_auroc(&probabilities, &labels);
    Ok(PartitionEval {
        bce: bce_total / records.len() as f64,
        auroc_macro: macro_auroc(&per_class),
        per_class_auroc: per_class,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    /// `None` when validation reused the training data.
    pub fold: Option<usize>,
    pub best_step: usize,
    pub challenge_metric: Option<f64>,
    pub per_class_auroc: Vec<Option<f64>>,
    pub auroc_macro: Option<f64>,
    pub validation_bce: f64,
    /// Mean batch loss of every step.
    pub loss_curve: Vec<f64>,
    pub degenerate_classes: Vec<usize>,
    /// Record indices contributing gradients at each step.
    pub audit: Vec<Vec<usize>>,
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FoldOutput {
    pub params: ModelParams,
    pub thresholds: Vec<f64>,
    pub standardizer: Option<FeatureStandardizer>,
    pub report: FoldReport,
}

pub fn partition(
    folds: &FoldAssignment,
    fold_id: usize,
    holdout: Holdout,
) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if fold_id >= folds.k {
        return Err(TrainError::FoldOutOfRange { fold: fold_id, k: folds.k });
    }
    let all: Vec<usize> = (0..folds.fold_of.len()).collect();
    let (train, val) = match holdout {
        Holdout::Fold => (
            all.iter().copied().filter(|&i| folds.fold_of[i] != fold_id).collect::<Vec<_>>(),
            folds.members(fold_id),
        ),
        Holdout::None => (all.clone(), all),
    };
    if train.is_empty() {
        return Err(TrainError::EmptyPartition("training"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptyPartition("validation"));
    }
    Ok((train, val))
}

/// Yields training record indices epoch by epoch, reshuffled per epoch.
struct EpochStream {
    indices: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl EpochStream {
    fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            order: Vec::new(),
            indices,
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order = self.indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix3(self.seed, TAG_SHUFFLE, self.epoch));
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// (record index, epoch)
    fn next(&mut self) -> (usize, u64) {
        if self.cursor == self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let i = self.order[self.cursor];
        self.cursor += 1;
        (i, self.epoch)
    }
}

fn diverged(step: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => TrainError::Diverged {
            step,
            reason: format!("non-finite value in {op}"),
        },
        other => TrainError::Model(other),
    }
}

/// Ranks validation outcomes: higher metric first, then lower BCE.
fn better(candidate: (Option<f64>, f64), incumbent: (Option<f64>, f64)) -> bool {
    let m = |x: Option<f64>| x.unwrap_or(f64::NEG_INFINITY);
    match m(candidate.0).partial_cmp(&m(incumbent.0)) {
        Some(std::cmp::Ordering::Greater) => true,
        Some(std::cmp::Ordering::Equal) => candidate.1 < incumbent.1,
        _ => false,
    }
}

pub fn train_fold(
    records: &[PreparedRecord],
    folds: &FoldAssignment,
    fold_id: usize,
    model: &ModelConfig,
    config: &TrainConfig,
    weights: &WeightMatrix,
) -> Result<FoldOutput, TrainError> {
    config.validate(model)?;
    if folds.fold_of.len() != records.len() {
        return Err(TrainError::Config(format!(
            "fold file covers {} records, dataset has {}",
            folds.fold_of.len(),
            records.len()
        )));
    }
    if weights.num_classes() != model.d_class {
        return Err(TrainError::Config(format!(
            "weight matrix has {} classes, model outputs {}",
            weights.num_classes(),
            model.d_class
        )));
    }
    let pool = thread_pool(config.threads)?;
    let (train_idx, val_idx) = partition(folds, fold_id, config.holdout)?;

    let standardizer = config.standardize_wide.then(|| {
        let rows: Vec<&[f64]> = train_idx.iter().map(|&i| records[i].wide.as_slice()).collect();
        FeatureStandardizer::fit(&rows)
    });
    let val_records: Vec<&PreparedRecord> = val_idx.iter().map(|&i| &records[i]).collect();
    let val_labels: Vec<Vec<bool>> = val_records.iter().map(|r| r.labels.clone()).collect();

    let mut params = init_params(model, config.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    });
    let mut stream = EpochStream::new(train_idx.clone(), config.seed);
    let mut loss_curve = Vec::with_capacity(config.max_steps);
    let mut audit = Vec::with_capacity(config.max_steps);

    let mut best: Option<(ModelParams, ThresholdFit, PartitionEval, usize)> = None;
    let evaluate = |params: &ModelParams, step: usize, best: &mut Option<(ModelParams, ThresholdFit, PartitionEval, usize)>| -> Result<(), TrainError> {
        let mut snapshot = params.clone();
        snapshot.quantize_f32();
        let eval = evaluate_partition(&snapshot, &val_records, standardizer.as_ref(), model, config, &pool)?;
        let fit = fit_thresholds(&eval.probabilities, &val_labels, weights)?;
        let replace = match best {
            None => true,
            Some((_, bf, be, _)) => better((fit.metric, eval.bce), (bf.metric, be.bce)),
        };
        if replace {
            *best = Some((snapshot, fit, eval, step));
        }
        Ok(())
    };

    for step in 0..config.max_steps {
        let batch: Vec<(usize, u64)> = (0..config.batch_size_train).map(|_| stream.next()).collect();
        audit.push(batch.iter().map(|b| b.0).collect::<Vec<_>>());
        let results: Vec<Result<(f64, ModelParams), TrainError>> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(pos, &(ri, epoch))| {
                    let r = &records[ri];
                    let policy = OffsetPolicy::Random(mix3(config.seed, epoch, ri as u64));
                    let window = window_from_prepared(&r.signal, &config.preprocess, policy)?;
                    let tokens = patchify(&window.signal, model)?;
                    let wide = wide_for(r, standardizer.as_ref());
                    let input = ForwardInput {
                        tokens: &tokens,
                        wide: &wide,
                        pad_start: window.pad_start,
                    };
                    let options = ForwardOptions::train(mix3(config.seed ^ TAG_DROPOUT, step as u64, pos as u64));
                    loss_and_gradients(&params, &input, &r.targets(), model, &options).map_err(diverged(step))
                })
                .collect()
        });
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for result in results {
            let (l, g) = result?;
            loss += l;
            let acc = sum.get_or_insert_with(|| g.values().iter().map(|t| vec![0.0; t.numel()]).collect());
            for (a, t) in acc.iter_mut().zip(g.values()) {
                for (x, y) in a.iter_mut().zip(t.data()) {
                    *x += y;
                }
            }
        }
        let loss = loss * scale;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: format!("loss {loss}"),
            });
        }
        loss_curve.push(loss);
        let grads: Vec<Tensor> = sum
            .expect("batch is non-empty")
            .into_iter()
            .zip(params.values())
            .map(|(g, p)| Tensor::new(p.shape().to_vec(), g.into_iter().map(|v| v * scale).collect()))
            .collect::<Result<_, _>>()
            .map_err(ModelError::from)?;
        adam.step(&mut params.values_mut(), &grads).map_err(ModelError::from)?;
        if !params.all_finite() {
            return Err(TrainError::Diverged {
                step,
                reason: "non-finite parameter after update".into(),
            });
        }
        let done = step + 1;
        if config.eval_every > 0 && done % config.eval_every == 0 && done != config.max_steps {
            evaluate(&params, done, &mut best)?;
        }
    }
    evaluate(&params, config.max_steps, &mut best)?;

    let (params, fit, eval, best_step) = best.expect("evaluated at least once");
    Ok(FoldOutput {
        params,
        thresholds: fit.thresholds,
        standardizer,
        report: FoldReport {
            fold: (config.holdout == Holdout::Fold).then_some(fold_id),
            best_step,
            challenge_metric: fit.metric,
            per_class_auroc: eval.per_class_auroc,
            auroc_macro: eval.auroc_macro,
            validation_bce: eval.bce,
            loss_curve,
            degenerate_classes: fit.degenerate_classes,
            audit,
            train_indices: train_idx,
            validation_indices: val_idx,
        },
    })
}

/// One row of a cross-validation report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub challenge_metric: Option<f64>,
    pub auroc_macro: Option<f64>,
    pub per_class_auroc: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub class_codes: Vec<String>,
    pub folds: Vec<ReportRow>,
}

fn mean_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), sd)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.6}"))
}

impl CvReport {
    pub fn from_reports(class_codes: Vec<String>, reports: &[FoldReport]) -> Self {
        let folds = reports
            .iter()
            .map(|r| ReportRow {
                label: r.fold.map_or_else(|| "all".into(), |f| f.to_string()),
                challenge_metric: r.challenge_metric,
                auroc_macro: r.auroc_macro,
                per_class_auroc: r.per_class_auroc.clone(),
            })
            .collect();
        Self { class_codes, folds }
    }

    /// Sample mean and standard deviation of the fold metrics.
    pub fn metric_summary(&self) -> (Option<f64>, Option<f64>) {
        let v: Vec<f64> = self.folds.iter().filter_map(|r| r.challenge_metric).collect();
        mean_sd(&v)
    }

    fn aggregate_rows(&self) -> (ReportRow, ReportRow) {
        let column = |f: &dyn Fn(&ReportRow) -> Option<f64>| {
            mean_sd(&self.folds.iter().filter_map(f).collect::<Vec<_>>())
        };
        let (m_metric, s_metric) = column(&|r| r.challenge_metric);
        let (m_macro, s_macro) = column(&|r| r.auroc_macro);
        let mut m_class = Vec::new();
        let mut s_class = Vec::new();
        for j in 0..self.class_codes.len() {
            let (m, s) = column(&|r| r.per_class_auroc.get(j).copied().flatten());
            m_class.push(m);
            s_class.push(s);
        }
        (
            ReportRow {
                label: "mean".into(),
                challenge_metric: m_metric,
                auroc_macro: m_macro,
                per_class_auroc: m_class,
            },
            ReportRow {
                label: "sd".into(),
                challenge_metric: s_metric,
                auroc_macro: s_macro,
                per_class_auroc: s_class,
            },
        )
    }

    /// `fold,challenge_metric,auroc_macro,<per-class auroc>` plus mean and
    /// sd rows; undefined values are `NA`.
    pub fn to_csv_string(&self) -> String {
        let mut s = format!("fold,challenge_metric,auroc_macro,{}\n", self.class_codes.join(","));
        let (mean, sd) = self.aggregate_rows();
        for row in self.folds.iter().chain([&mean, &sd]) {
            let per: Vec<String> = row.per_class_auroc.iter().map(|v| cell(*v)).collect();
            let _ = writeln!(
                s,
                "{},{},{},{}",
                row.label,
                cell(row.challenge_metric),
                cell(row.auroc_macro),
                per.join(",")
            );
        }
        s
    }

    /// Human-readable per-fold table ending in `mean ± sd`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("fold  challenge_metric  auroc_macro\n");
        for row in &self.folds {
            let _ = writeln!(s, "{:<5} {:>16} {:>12}", row.label, cell(row.challenge_metric), cell(row.auroc_macro));
        }
        let (mean, sd) = self.metric_summary();
        let _ = writeln!(s, "challenge metric: {} ± {}", cell(mean).trim(), cell(sd).trim());
        s
    }
}

/// Trains every fold in order.
pub fn run_cv(
    records: &[PreparedRecord],
    folds: &FoldAssignment,
    model: &ModelConfig,
    config: &TrainConfig,
    weights: &WeightMatrix,
) -> Result<(Vec<FoldOutput>, CvReport), TrainError> {
    let fold_ids: Vec<usize> = match config.holdout {
        Holdout::Fold => (0..folds.k).collect(),
        Holdout::None => vec![0],
    };
    let mut outputs = Vec::with_capacity(fold_ids.len());
    for f in fold_ids {
        outputs.push(train_fold(records, folds, f, model, config, weights)?);
    }
    let reports: Vec<FoldReport> = outputs.iter().map(|o| o.report.clone()).collect();
    let report = CvReport::from_reports(weights.class_codes.clone(), &reports);
    Ok((outputs, report))
}

/// Writes `model.wft`, `model.cfg`, `thresholds.csv` and, when present,
/// `wide_stats.wft` into `dir`.
pub fn save_fold(
    dir: &Path,
    output: &FoldOutput,
    model: &ModelConfig,
    class_codes: &[String],
) -> Result<(), TrainError> {
    let io = |source: std::io::Error| TrainError::Io {
        path: dir.display().to_string(),
        source,
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    crate::autograd::save_checkpoint(&dir.join("model.wft"), &output.params.to_named()).map_err(ModelError::from)?;
    std::fs::write(dir.join("model.cfg"), model.to_kv_string()).map_err(io)?;
    std::fs::write(dir.join("thresholds.csv"), thresholds_to_csv(class_codes, &output.thresholds)).map_err(io)?;
    if let Some(s) = &output.standardizer {
        let n = s.mean.len();
        let named = vec![
            ("wide.mean".to_string(), Tensor::new(vec![n], s.mean.clone()).map_err(ModelError::from)?),
            ("wide.std".to_string(), Tensor::new(vec![n], s.std.clone()).map_err(ModelError::from)?),
        ];
        crate::autograd::save_checkpoint(&dir.join("wide_stats.wft"), &named).map_err(ModelError::from)?;
    }
    Ok(())
}

/// A trained fold loaded back from [`save_fold`] output.
#[derive(Debug, Clone)]
pub struct LoadedFold {
    pub model: ModelConfig,
    pub params: ModelParams,
    pub thresholds: Vec<f64>,
    pub standardizer: Option<FeatureStandardizer>,
}

pub fn load_fold(dir: &Path, class_codes: &[String]) -> Result<LoadedFold, TrainError> {
    let read = |name: &str| {
        std::fs::read_to_string(dir.join(name)).map_err(|source| TrainError::Io {
            path: dir.join(name).display().to_string(),
            source,
        })
    };
    let model = ModelConfig::from_kv_str(&read("model.cfg")?)?;
    let named = crate::autograd::load_checkpoint(&dir.join("model.wft")).map_err(ModelError::from)?;
    let params = ModelParams::from_named(&model, named)?;
    let thresholds = thresholds_from_csv(&read("thresholds.csv")?, class_codes)?;
    let stats_path = dir.join("wide_stats.wft");
    let standardizer = if stats_path.exists() {
        let named = crate::autograd::load_checkpoint(&stats_path).map_err(ModelError::from)?;
        let get = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t.data().to_vec());
        match (get("wide.mean"), get("wide.std")) {
            (Some(mean), Some(std)) => Some(FeatureStandardizer { mean, std }),
            _ => return Err(TrainError::Config("wide_stats.wft lacks wide.mean or wide.std".into())),
        }
    } else {
        None
    };
    Ok(LoadedFold {
        model,
        params,
        thresholds,
        standardizer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights(c: usize) -> WeightMatrix {
        let mut codes: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        codes[0] = crate::metrics::NORMAL_CLASS_CODE.into();
        WeightMatrix::synthetic(codes, 0).unwrap()
    }

    #[test]
    fn separated_class_picks_half() {
        let labels: Vec<Vec<bool>> = (0..10).map(|i| vec![i % 2 == 0, i % 2 == 1]).collect();
        let probs: Vec<Vec<f64>> = labels
            .iter()
            .map(|r| r.iter().map(|&y| if y { 0.9 } else { 0.1 }).collect())
            .collect();
        let fit = fit_thresholds(&probs, &labels, &weights(2)).unwrap();
        assert_eq!(fit.thresholds, vec![0.5, 0.5]);
        assert_eq!(fit.metric, Some(1.0));
    }

    #[test]
    fn probabilities_equal_to_labels_score_one() {
        let labels = vec![vec![true, false, true], vec![false, true, false], vec![true, true, false]];
        let probs: Vec<Vec<f64>> = labels.iter().map(|r| r.iter().map(|&y| f64::from(u8::from(y))).collect()).collect();
        assert_eq!(fit_thresholds(&probs, &labels, &weights(3)).unwrap().metric, Some(1.0));
    }

    #[test]
    fn never_positive_class_is_reported() {
        let labels = vec![vec![true, false], vec![true, false]];
        let probs = vec![vec![0.7, 0.9], vec![0.2, 0.1]];
        let fit = fit_thresholds(&probs, &labels, &weights(2)).unwrap();
        assert_eq!(fit.degenerate_classes, vec![1]);
        assert_eq!(fit.thresholds[1], 0.5);
    }

    #[test]
    fn grid_contains_half_exactly() {
        let g = threshold_grid();
        assert_eq!(g.len(), 49);
        assert!(g.contains(&0.5));
        assert_eq!((g[0], g[48]), (0.02, 0.98));
    }

    #[test]
    fn thresholds_csv_round_trip() {
        let codes = vec!["a".to_string(), "b".to_string()];
        let t = vec![0.34, 0.5];
        assert_eq!(thresholds_from_csv(&thresholds_to_csv(&codes, &t), &codes).unwrap(), t);
        assert!(thresholds_from_csv("class_code,threshold\nb,0.3\na,0.2\n", &codes).is_err());
    }

    #[test]
    fn partition_respects_holdout() {
        let f = FoldAssignment {
            fold_of: vec![0, 1, 0, 1, 2],
            k: 3,
        };
        assert_eq!(partition(&f, 1, Holdout::Fold).unwrap(), (vec![0, 2, 4], vec![1, 3]));
        assert_eq!(partition(&f, 0, Holdout::None).unwrap().1.len(), 5);
        assert!(matches!(partition(&f, 3, Holdout::Fold), Err(TrainError::FoldOutOfRange { fold: 3, k: 3 })));
    }

    #[test]
    fn report_has_fold_mean_and_sd_rows() {
        let row = |f: usize, m: f64| FoldReport {
            fold: Some(f),
            best_step: 1,
            challenge_metric: Some(m),
            per_class_auroc: vec![Some(0.5), None],
            auroc_macro: Some(0.5),
            validation_bce: 0.1,
            loss_curve: vec![],
            degenerate_classes: vec![],
            audit: vec![],
            train_indices: vec![],
            validation_indices: vec![],
        };
        let r = CvReport::from_reports(vec!["a".into(), "b".into()], &[row(0, 0.2), row(1, 0.4)]);
        let csv = r.to_csv_string();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("mean,0.300000,0.500000,0.500000,NA"));
        let (m, s) = r.metric_summary();
        assert!((m.unwrap() - 0.3).abs() < 1e-12 && (s.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
    }
}

use std::collections::BTreeSet;

use waveformer::features::NUM_WIDE_FEATURES;
use waveformer::metrics::{apply_thresholds, challenge_metric, WeightMatrix};
use waveformer::model::ModelConfig;
use waveformer::record_io::{build_manifest_with, ClassMap, LeadSubset};
use waveformer::stratify::{stratified_folds, FoldAssignment};
use waveformer::synth::{write_dataset, SynthClasses, SynthConfig};
use waveformer::train::{
    load_fold, predict, prepare_records, run_cv, save_fold, thread_pool, train_fold, Holdout, PreparedRecord,
    TrainConfig, TrainError,
};

struct Fixture {
    records: Vec<PreparedRecord>,
    folds: FoldAssignment,
    weights: WeightMatrix,
    model: ModelConfig,
    train: TrainConfig,
}

fn fixture(records: usize, k: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        records,
        seed: 9,
        max_duration_s: 12.0,
        classes: SynthClasses::First(4),
        ..SynthConfig::default()
    };
    let summary = write_dataset(&synth, dir.path()).unwrap();
    let class_map = ClassMap::load(&summary.class_map_path).unwrap();
    let manifest = build_manifest_with(dir.path(), &class_map).unwrap();
    let weights = WeightMatrix::load(&summary.weights_path)
        .unwrap()
        .aligned_to(&manifest.class_list)
        .unwrap();
    let mut train = TrainConfig {
        batch_size_train: 3,
        batch_size_val: 4,
        learning_rate: 1e-3,
        max_steps: 6,
        eval_every: 3,
        seed: 13,
        lead_subset: LeadSubset::two(),
        ..TrainConfig::default()
    };
    train.preprocess.window_samples = 64;
    train.preprocess.fir_taps = 65;
    let model = ModelConfig {
        d_wide: NUM_WIDE_FEATURES,
        d_class: manifest.num_classes(),
        window_samples: 64,
        ..ModelConfig::toy()
    };
    let pool = thread_pool(1).unwrap();
    let records = prepare_records(&manifest, &train, &pool).unwrap();
    let folds = stratified_folds(&manifest.label_matrix(), k, 1).unwrap();
    Fixture {
        records,
        folds,
        weights,
        model,
        train,
    }
}

#[test]
fn first_step_loss_is_near_chance() {
    let fx = fixture(8, 2);
    let out = train_fold(&fx.records, &fx.folds, 0, &fx.model, &fx.train, &fx.weights).unwrap();
    let first = out.report.loss_curve[0];
    assert!((first - std::f64::consts::LN_2).abs() < 0.05, "{first}");
    assert_eq!(out.report.loss_curve.len(), fx.train.max_steps);
}

#[test]
fn runs_repeat_exactly_and_ignore_thread_count() {
    let fx = fixture(8, 2);
    let a = train_fold(&fx.records, &fx.folds, 1, &fx.model, &fx.train, &fx.weights).unwrap();
    let b = train_fold(&fx.records, &fx.folds, 1, &fx.model, &fx.train, &fx.weights).unwrap();
    let threaded = TrainConfig {
        threads: 3,
        ..fx.train.clone()
    };
    let c = train_fold(&fx.records, &fx.folds, 1, &fx.model, &threaded, &fx.weights).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report, c.report);
    assert_eq!(a.params.to_named(), c.params.to_named());
}

#[test]
fn validation_records_never_drive_gradients() {
    let fx = fixture(10, 5);
    for f in 0..fx.folds.k {
        let out = train_fold(&fx.records, &fx.folds, f, &fx.model, &fx.train, &fx.weights).unwrap();
        let held: BTreeSet<usize> = fx.folds.members(f).into_iter().collect();
        assert_eq!(out.report.validation_indices, fx.folds.members(f));
        assert!(out.report.audit.iter().flatten().all(|i| !held.contains(i)));
        assert!(out.report.train_indices.iter().all(|i| !held.contains(i)));
        assert_eq!(out.report.audit.len(), fx.train.max_steps);
    }
}

#[test]
fn saved_fold_reproduces_its_metric_bitwise() {
    let fx = fixture(8, 2);
    let out = train_fold(&fx.records, &fx.folds, 0, &fx.model, &fx.train, &fx.weights).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_fold(dir.path(), &out, &fx.model, &fx.weights.class_codes).unwrap();
    let loaded = load_fold(dir.path(), &fx.weights.class_codes).unwrap();
    assert_eq!(loaded.model, fx.model);
    assert_eq!(loaded.thresholds, out.thresholds);
    let val: Vec<&PreparedRecord> = out.report.validation_indices.iter().map(|&i| &fx.records[i]).collect();
    let pool = thread_pool(2).unwrap();
    let probs = predict(&loaded.params, &val, loaded.standardizer.as_ref(), &loaded.model, &fx.train, &pool).unwrap();
    let labels: Vec<Vec<bool>> = val.iter().map(|r| r.labels.clone()).collect();
    let metric = challenge_metric(&labels, &apply_thresholds(&probs, &loaded.thresholds), &fx.weights).ok();
    assert_eq!(metric.map(f64::to_bits), out.report.challenge_metric.map(f64::to_bits));
}

#[test]
fn standardized_wide_features_survive_save_and_load() {
    let fx = fixture(8, 2);
    let train = TrainConfig {
        standardize_wide: true,
        max_steps: 2,
        ..fx.train.clone()
    };
    let out = train_fold(&fx.records, &fx.folds, 0, &fx.model, &train, &fx.weights).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_fold(dir.path(), &out, &fx.model, &fx.weights.class_codes).unwrap();
    let loaded = load_fold(dir.path(), &fx.weights.class_codes).unwrap();
    let (a, b) = (out.standardizer.unwrap(), loaded.standardizer.unwrap());
    for (x, y) in a.mean.iter().zip(&b.mean) {
        assert_eq!(*x as f32, *y as f32);
    }
}

#[test]
fn two_fold_report_lists_each_fold_and_summary_rows() {
    let fx = fixture(8, 2);
    let (outputs, report) = run_cv(&fx.records, &fx.folds, &fx.model, &fx.train, &fx.weights).unwrap();
    assert_eq!(outputs.len(), 2);
    let csv = report.to_csv_string();
    let first_cells: Vec<&str> = csv.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(first_cells, ["fold", "0", "1", "mean", "sd"]);
    assert!(csv.lines().all(|l| l.split(',').count() == 3 + fx.weights.num_classes()));
    assert!(report.to_table().contains("challenge metric:"));
}

#[test]
fn holdout_none_validates_on_the_training_set() {
    let fx = fixture(6, 2);
    let train = TrainConfig {
        holdout: Holdout::None,
        ..fx.train.clone()
    };
    let (outputs, report) = run_cv(&fx.records, &fx.folds, &fx.model, &train, &fx.weights).unwrap();
    assert_eq!(outputs.len(), 1);
    let r = &outputs[0].report;
    assert_eq!(r.fold, None);
    let all: Vec<usize> = (0..fx.records.len()).collect();
    assert_eq!(r.validation_indices, all);
    assert_eq!(r.train_indices, all);
    assert_eq!(report.folds[0].label, "all");
}

#[test]
fn out_of_range_fold_is_rejected() {
    let fx = fixture(6, 2);
    let err = train_fold(&fx.records, &fx.folds, 2, &fx.model, &fx.train, &fx.weights).unwrap_err();
    assert!(matches!(err, TrainError::FoldOutOfRange { fold: 2, k: 2 }));
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let fx = fixture(6, 2);
    let train = TrainConfig {
        learning_rate: 1e300,
        max_steps: 4,
        ..fx.train.clone()
    };
    match train_fold(&fx.records, &fx.folds, 0, &fx.model, &train, &fx.weights) {
        Err(TrainError::Diverged { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.loss_curve)),
    }
}

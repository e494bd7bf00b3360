use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use waveformer::attention::{export_heatmap, extract_attention, file_name, ExportFormat, HeadMode, Region};
use waveformer::dsp::{design_bandpass, window_from_prepared, OffsetPolicy};
use waveformer::metrics::{
    apply_thresholds, challenge_metric, macro_auroc, per_class_auroc, MetricError, WeightMatrix,
};
use waveformer::record_io::{build_manifest_with, ClassMap, DatasetManifest, UnlabeledPolicy};
use waveformer::stratify::{stratified_folds, FoldAssignment};
use waveformer::synth::{write_dataset, SynthClasses, SynthConfig};
use waveformer::train::{
    load_fold, partition, predict, prepare_record, prepare_records, save_fold, thread_pool, train_fold, CvReport,
    Holdout, LoadedFold, PreparedRecord, ReportRow,
};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::{
    AttentionArgs, Cli, Command, EvaluateArgs, FoldsArgs, FormatArg, ManifestArgs, PartitionArg, PredictArgs,
    RegionArg, SynthArgs, TrainArgs, Unlabeled,
};

const RUN_CONFIG: &str = "run.ini";
const ALL_DIR: &str = "all";

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = cli.threads;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Manifest(a) => manifest(a),
        Command::Folds(a) => folds(a),
        Command::Train(a) => train(a, threads),
        Command::Evaluate(a) => evaluate(a, threads),
        Command::Predict(a) => predict_cmd(a, threads),
        Command::Attention(a) => attention(a, threads),
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn synth(a: SynthArgs) -> Result<(), CliError> {
    let classes = match a.classes.as_str() {
        "full" => SynthClasses::Full,
        k => SynthClasses::First(
            k.parse()
                .map_err(|_| CliError::usage(format!("--classes expects `full` or a count, got {k:?}")))?,
        ),
    };
    let config = SynthConfig {
        records: a.records,
        seed: a.seed,
        sampling_rate_hz: a.rate,
        min_duration_s: a.min_duration,
        max_duration_s: a.max_duration,
        noise_std: a.noise,
        classes,
        ..SynthConfig::default()
    };
    let summary = write_dataset(&config, &a.out)?;
    println!(
        "wrote {} records, {} and {}",
        summary.record_ids.len(),
        summary.class_map_path.display(),
        summary.weights_path.display()
    );
    Ok(())
}

fn manifest(a: ManifestArgs) -> Result<(), CliError> {
    let class_map = ClassMap::load(&a.class_map)?;
    let policy = match a.unlabeled {
        Unlabeled::Include => UnlabeledPolicy::Include,
        Unlabeled::Exclude => UnlabeledPolicy::Exclude,
    };
    let m = build_manifest_with(&a.data, &class_map)?.apply_unlabeled_policy(policy);
    if m.is_empty() {
        return Err(CliError::data("manifest is empty after applying the unlabeled policy"));
    }
    for (path, reason) in &m.skipped {
        eprintln!("skipped {}: {reason}", path.display());
    }
    m.save(&a.out)?;
    println!("{} records, {} classes, {} skipped", m.len(), m.num_classes(), m.skipped.len());
    Ok(())
}

fn record_ids(m: &DatasetManifest) -> Vec<String> {
    m.entries.iter().map(|e| e.record_id.clone()).collect()
}

fn folds(a: FoldsArgs) -> Result<(), CliError> {
    let m = DatasetManifest::load(&a.manifest)?;
    let labels = m.label_matrix();
    let folds = stratified_folds(&labels, a.k, a.seed)?;
    write(&a.out, folds.to_csv_string(&record_ids(&m)))?;
    let sizes: Vec<String> = folds.fold_sizes().iter().map(usize::to_string).collect();
    println!(
        "fold sizes {}; label deviation {:.3}",
        sizes.join(" "),
        folds.label_deviation(&labels)
    );
    Ok(())
}

/// Manifest, folds and weights aligned to the manifest's class list.
struct Dataset {
    manifest: DatasetManifest,
    folds: FoldAssignment,
    weights: WeightMatrix,
}

fn load_dataset(manifest: &Path, folds: &Path, weights: &Path) -> Result<Dataset, CliError> {
    let manifest = DatasetManifest::load(manifest)?;
    if manifest.is_empty() {
        return Err(CliError::data("manifest lists no records"));
    }
    let folds = FoldAssignment::from_csv_str(&read(folds)?, &record_ids(&manifest))?;
    let weights = WeightMatrix::load(weights)?.aligned_to(&manifest.class_list)?;
    Ok(Dataset {
        manifest,
        folds,
        weights,
    })
}

fn fold_dir_name(fold: Option<usize>) -> String {
    fold.map_or_else(|| ALL_DIR.into(), |f| format!("fold_{f}"))
}

fn train(a: TrainArgs, threads: usize) -> Result<(), CliError> {
    let mut run = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    let data = load_dataset(&a.manifest, &a.folds, &a.weights)?;
    run.model.d_class = data.manifest.num_classes();
    run.train.folds = data.folds.k;
    run.train.threads = threads;
    run.model.validate()?;
    let fold_ids: Vec<usize> = match (a.fold, run.train.holdout) {
        (Some(f), _) => vec![f],
        (None, Holdout::Fold) => (0..data.folds.k).collect(),
        (None, Holdout::None) => vec![0],
    };
    if let Some(&f) = fold_ids.iter().find(|&&f| f >= data.folds.k) {
        return Err(waveformer::train::TrainError::FoldOutOfRange { fold: f, k: data.folds.k }.into());
    }
    let ini = run.to_ini_string();
    write(&a.out.join(RUN_CONFIG), &ini)?;

    let pool = thread_pool(threads)?;
    let records = prepare_records(&data.manifest, &run.train, &pool)?;
    let mut reports = Vec::new();
    for f in fold_ids {
        let output = train_fold(&records, &data.folds, f, &run.model, &run.train, &data.weights)?;
        let dir = a.out.join(fold_dir_name(output.report.fold));
        save_fold(&dir, &output, &run.model, &data.manifest.class_list)?;
        write(&dir.join(RUN_CONFIG), &ini)?;
        let mut loss = String::from("step,loss\n");
        for (i, l) in output.report.loss_curve.iter().enumerate() {
            let _ = writeln!(loss, "{},{l:.10e}", i + 1);
        }
        write(&dir.join("loss.csv"), loss)?;
        eprintln!(
            "{}: best step {}, validation bce {:.6}",
            fold_dir_name(output.report.fold),
            output.report.best_step,
            output.report.validation_bce
        );
        reports.push(output.report);
    }
    let report = CvReport::from_reports(data.manifest.class_list.clone(), &reports);
    write(&a.out.join("cv_report.csv"), report.to_csv_string())?;
    print!("{}", report.to_table());
    Ok(())
}

/// Fold directories under a run directory, ordered by fold index.
fn fold_dirs(models: &Path) -> Result<Vec<(Option<usize>, PathBuf)>, CliError> {
    let entries = std::fs::read_dir(models).map_err(|e| CliError::io(models, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(models, e))?;
        if !entry.path().is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        if name == ALL_DIR {
            out.push((None, entry.path()));
        } else if let Some(f) = name.strip_prefix("fold_").and_then(|n| n.parse::<usize>().ok()) {
            out.push((Some(f), entry.path()));
        }
    }
    out.sort_by_key(|(f, _)| f.map_or(usize::MAX, |f| f));
    if out.is_empty() {
        return Err(CliError::data(format!("{} holds no trained folds", models.display())));
    }
    Ok(out)
}

fn evaluate(a: EvaluateArgs, threads: usize) -> Result<(), CliError> {
    let mut run = RunConfig::load(Some(&a.models.join(RUN_CONFIG)), &[])?;
    run.train.threads = threads;
    let data = load_dataset(&a.manifest, &a.folds, &a.weights)?;
    let codes = &data.manifest.class_list;
    let pool = thread_pool(threads)?;
    let records = prepare_records(&data.manifest, &run.train, &pool)?;
    let mut rows = Vec::new();
    for (fold, dir) in fold_dirs(&a.models)? {
        let loaded = load_fold(&dir, codes)?;
        let (train_idx, val_idx) = partition(&data.folds, fold.unwrap_or(0), run.train.holdout)?;
        let idx = match a.partition {
            PartitionArg::Validation => val_idx,
            PartitionArg::Train => train_idx,
        };
        let subset: Vec<&PreparedRecord> = idx.iter().map(|&i| &records[i]).collect();
        let probs = predict(
            &loaded.params,
            &subset,
            loaded.standardizer.as_ref(),
            &loaded.model,
            &run.train,
            &pool,
        )?;
        let labels: Vec<Vec<bool>> = subset.iter().map(|r| r.labels.clone()).collect();
        let metric = match challenge_metric(&labels, &apply_thresholds(&probs, &loaded.thresholds), &data.weights) {
            Ok(m) => Some(m),
            Err(MetricError::Degenerate(_)) => None,
            Err(e) => return Err(e.into()),
        };
        let per_class = per_class_auroc(&probs, &labels);
        rows.push(ReportRow {
            label: fold.map_or_else(|| ALL_DIR.into(), |f| f.to_string()),
            challenge_metric: metric,
            auroc_macro: macro_auroc(&per_class),
            per_class_auroc: per_class,
        });
    }
    let report = CvReport {
        class_codes: codes.clone(),
        folds: rows,
    };
    if let Some(out) = &a.out {
        write(out, report.to_csv_string())?;
    }
    print!("{}", report.to_table());
    Ok(())
}

/// A trained fold plus the run configuration it was trained under.
struct FoldModel {
    run: RunConfig,
    fold: LoadedFold,
    class_codes: Vec<String>,
}

fn load_fold_model(dir: &Path, threads: usize) -> Result<FoldModel, CliError> {
    let mut run = RunConfig::load(Some(&dir.join(RUN_CONFIG)), &[])?;
    run.train.threads = threads;
    let class_codes: Vec<String> = read(&dir.join("thresholds.csv"))?
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once(',').map(|(c, _)| c.trim().to_string()))
        .collect();
    let fold = load_fold(dir, &class_codes)?;
    Ok(FoldModel { run, fold, class_codes })
}

fn prepare_single(header: &Path, m: &FoldModel) -> Result<PreparedRecord, CliError> {
    let taps = design_bandpass(&m.run.train.preprocess)?;
    Ok(prepare_record(header, vec![false; m.class_codes.len()], &m.run.train, &taps)?)
}

fn predict_cmd(a: PredictArgs, threads: usize) -> Result<(), CliError> {
    let m = load_fold_model(&a.model, threads)?;
    let record = prepare_single(&a.record, &m)?;
    let pool = thread_pool(threads)?;
    let probs = predict(
        &m.fold.params,
        &[&record],
        m.fold.standardizer.as_ref(),
        &m.fold.model,
        &m.run.train,
        &pool,
    )?;
    let mut s = format!("record_id,{}\n{}", m.class_codes.join(","), record.record_id);
    for p in &probs[0] {
        let _ = write!(s, ",{p:.8}");
    }
    s.push('\n');
    match &a.out {
        Some(out) => write(out, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn attention(a: AttentionArgs, threads: usize) -> Result<(), CliError> {
    let m = load_fold_model(&a.model, threads)?;
    let record = prepare_single(&a.record, &m)?;
    let model = &m.fold.model;
    let layer = a.layer.unwrap_or(model.num_layers.saturating_sub(1));
    let head = match a.head.as_str() {
        "mean" => HeadMode::Mean,
        h => HeadMode::Single(
            h.parse()
                .map_err(|_| CliError::usage(format!("--head expects `mean` or an index, got {h:?}")))?,
        ),
    };
    let region = match a.region {
        RegionArg::Patch => Region::Patch,
        RegionArg::Full => Region::Full,
    };
    let formats: &[ExportFormat] = match a.format {
        FormatArg::Pgm => &[ExportFormat::Pgm],
        FormatArg::Svg => &[ExportFormat::Svg],
        FormatArg::Csv => &[ExportFormat::Csv],
        FormatArg::All => &[ExportFormat::Pgm, ExportFormat::Svg, ExportFormat::Csv],
    };
    let window = window_from_prepared(&record.signal, &m.run.train.preprocess, OffsetPolicy::Center)?;
    let wide = match &m.fold.standardizer {
        Some(s) => s.apply(&record.wide),
        None => record.wide.clone(),
    };
    let map = extract_attention(&window, &wide, &m.fold.params, model, layer, head)?;
    let trace_lead = m.run.train.lead_subset.leads.iter().position(|l| l == "II").unwrap_or(0);
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    for &fmt in formats {
        let path = a.out.join(file_name(&record.record_id, &map, fmt));
        export_heatmap(&map, &window.signal[trace_lead], model.d_patch, &path, fmt, region)?;
        println!("{}", path.display());
    }
    Ok(())
}

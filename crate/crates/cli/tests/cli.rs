use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use walkdir::WalkDir;

fn waveformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_waveformer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = waveformer(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

/// Relative path → file bytes for every file under `root`.
fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.expect("walk"))
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            let rel = e.path().strip_prefix(root).expect("under root").to_path_buf();
            (rel, std::fs::read(e.path()).expect("read"))
        })
        .collect()
}

const TOY: &str = "[model]\npreset = toy\n[preprocess]\nwindow_samples = 128\nfir_taps = 65\n\
[train]\nleads = two\nbatch_size_train = 2\nbatch_size_val = 4\nmax_steps = 3\n";

/// A toy dataset with a trained fold 0.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let p = |n: &str| s(&root.join(n));
        std::fs::write(root.join("toy.ini"), TOY).unwrap();
        ok(&["synth", "--out", &p("data"), "--records", "6", "--seed", "4", "--max-duration", "12"]);
        ok(&["manifest", "--data", &p("data"), "--class-map", &p("data/class_map.csv"), "--out", &p("m.csv")]);
        ok(&["folds", "--manifest", &p("m.csv"), "--out", &p("f.csv"), "--k", "2"]);
        ok(&[
            "train", "--manifest", &p("m.csv"), "--folds", &p("f.csv"), "--weights", &p("data/weights.csv"),
            "--out", &p("run"), "--config", &p("toy.ini"), "--fold", "0",
        ]);
        Self { _dir: dir, root }
    }

    fn p(&self, n: &str) -> String {
        s(&self.root.join(n))
    }
}

#[test]
fn synth_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--out", &s(d), "--records", "8", "--seed", "1"]);
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 8 * 2 + 2);
    assert_eq!(ta, tb);
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expected: [(&str, &[&str]); 7] = [
        ("synth", &["--out", "--records", "--seed", "--classes", "--rate", "--noise"]),
        ("manifest", &["--data", "--class-map", "--out", "--unlabeled"]),
        ("folds", &["--manifest", "--out", "--k", "--seed"]),
        ("train", &["--manifest", "--folds", "--weights", "--out", "--config", "--set", "--fold", "--threads"]),
        ("evaluate", &["--manifest", "--folds", "--weights", "--models", "--partition", "--out"]),
        ("predict", &["--record", "--model", "--out"]),
        ("attention", &["--record", "--model", "--out", "--layer", "--head", "--format", "--region"]),
    ];
    for (cmd, flags) in expected {
        let help = ok(&[cmd, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{cmd} --help lacks {f}");
        }
    }
    let top = ok(&["--help"]);
    for (cmd, _) in expected {
        assert!(top.contains(cmd));
    }
}

#[test]
fn predict_attention_and_evaluate_on_a_trained_fold() {
    let fx = Fixture::new();
    let header = fx.root.join("data/S0001.hea");
    let row = ok(&["predict", "--record", &s(&header), "--model", &fx.p("run/fold_0")]);
    let lines: Vec<&str> = row.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0].split(',').count(), 27);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[0], "S0001");
    assert!(cells[1..].iter().all(|c| c.parse::<f64>().is_ok_and(|p| (0.0..=1.0).contains(&p))));

    let listed = ok(&[
        "attention", "--record", &s(&header), "--model", &fx.p("run/fold_0"), "--out", &fx.p("att"),
    ]);
    assert_eq!(listed.lines().count(), 3);
    let pgm = std::fs::read(fx.root.join("att/S0001_L1_mean.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n32 32\n255\n"));
    let csv = std::fs::read_to_string(fx.root.join("att/S0001_L1_mean.csv")).unwrap();
    assert_eq!(csv.lines().count(), 32);

    ok(&[
        "attention", "--record", &s(&header), "--model", &fx.p("run/fold_0"), "--out", &fx.p("att"),
        "--layer", "0", "--head", "1", "--format", "csv", "--region", "full",
    ]);
    let full = std::fs::read_to_string(fx.root.join("att/S0001_L0_h1.csv")).unwrap();
    assert_eq!(full.lines().count(), 33);

    let table = ok(&[
        "evaluate", "--manifest", &fx.p("m.csv"), "--folds", &fx.p("f.csv"), "--weights", &fx.p("data/weights.csv"),
        "--models", &fx.p("run"), "--out", &fx.p("report.csv"),
    ]);
    assert!(table.contains("challenge metric:"));
    let report = std::fs::read_to_string(fx.root.join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(rows, ["fold", "0", "mean", "sd"]);
}

#[test]
fn thread_count_does_not_change_outputs() {
    let fx = Fixture::new();
    let header = s(&fx.root.join("data/S0002.hea"));
    let model = fx.p("run/fold_0");
    let one = ok(&["--threads", "1", "predict", "--record", &header, "--model", &model]);
    let four = ok(&["--threads", "4", "predict", "--record", &header, "--model", &model]);
    assert_eq!(one, four);
    let eval = |t: &str, out: &str| {
        ok(&[
            "--threads", t, "evaluate", "--manifest", &fx.p("m.csv"), "--folds", &fx.p("f.csv"),
            "--weights", &fx.p("data/weights.csv"), "--models", &model.replace("/fold_0", ""), "--out", &fx.p(out),
            "--partition", "train",
        ])
    };
    assert_eq!(eval("1", "r1.csv"), eval("4", "r4.csv"));
    assert_eq!(
        std::fs::read(fx.root.join("r1.csv")).unwrap(),
        std::fs::read(fx.root.join("r4.csv")).unwrap()
    );
}

fn failure(args: &[&str]) -> (i32, String) {
    let out = waveformer(args);
    let stderr = String::from_utf8(out.stderr).unwrap();
    (out.status.code().expect("exit code"), stderr)
}

#[test]
fn failure_classes_have_distinct_exit_codes() {
    let fx = Fixture::new();
    let base = [
        "--manifest".to_string(),
        fx.p("m.csv"),
        "--folds".into(),
        fx.p("f.csv"),
        "--weights".into(),
        fx.p("data/weights.csv"),
        "--out".into(),
        fx.p("run2"),
        "--config".into(),
        fx.p("toy.ini"),
    ];
    let train = |extra: &[&str]| {
        let mut args = vec!["train"];
        args.extend(base.iter().map(String::as_str));
        args.extend(extra);
        failure(&args)
    };
    let (usage, msg) = train(&["--set", "train.max_stepz=3"]);
    assert!(msg.starts_with("error: code=usage msg="), "{msg}");
    assert_eq!(msg.trim_end().lines().count(), 1);
    let (fold, msg) = train(&["--fold", "7"]);
    assert!(msg.starts_with("error: code=fold_range"), "{msg}");

    let (io, msg) = failure(&["predict", "--record", &fx.p("missing.hea"), "--model", &fx.p("run/fold_0")]);
    assert!(msg.starts_with("error: code=io"), "{msg}");

    std::fs::write(fx.root.join("bad.csv"), "not a manifest\n").unwrap();
    let (data, msg) = failure(&["folds", "--manifest", &fx.p("bad.csv"), "--out", &fx.p("x.csv")]);
    assert!(msg.starts_with("error: code=data"), "{msg}");

    let codes = [usage, io, fold, data];
    assert_eq!(codes, [2, 3, 4, 5]);
}

//! Challenge scoring and AUROC.

use std::fmt::Write as _;
use std::path::Path;

/// SNOMED CT code of normal sinus rhythm.
pub const NORMAL_CLASS_CODE: &str = "426783006";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("score undefined: the perfect and always-normal classifiers score the same ({0})")]
    Degenerate(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("weight matrix line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid weight matrix: {0}")]
    Invalid(String),
    #[error("reading {path}: {msg}")]
    Io { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub class_codes: Vec<String>,
    /// `w[true_class][predicted_class]`.
    pub w: Vec<Vec<f64>>,
    pub normal_class_index: usize,
}

fn codes_match(a: &str, b: &str) -> bool {
    a.split('|').any(|x| b.split('|').any(|y| x.trim() == y.trim()))
}

impl WeightMatrix {
    pub fn new(class_codes: Vec<String>, w: Vec<Vec<f64>>, normal_class_index: usize) -> Result<Self, MetricError> {
        let c = class_codes.len();
        if c == 0 {
            return Err(MetricError::Invalid("no classes".into()));
        }
        if w.len() != c || w.iter().any(|r| r.len() != c) {
            return Err(MetricError::Invalid(format!("matrix is not {c}x{c}")));
        }
        for (i, row) in w.iter().enumerate() {
            if row[i] != 1.0 {
                return Err(MetricError::Invalid(format!("diagonal entry {i} is {}", row[i])));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(MetricError::Invalid(format!("entry {v} in row {i} outside [0, 1]")));
            }
        }
        if normal_class_index >= c {
            return Err(MetricError::Invalid(format!("normal class index {normal_class_index} out of range")));
        }
        Ok(Self {
            class_codes,
            w,
            normal_class_index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_codes.len()
    }

    /// Non-official example matrix: `w_ij = 0.5^|i-j|`.
    pub fn synthetic(class_codes: Vec<String>, normal_class_index: usize) -> Result<Self, MetricError> {
        let c = class_codes.len();
        let w = (0..c)
            .map(|i| (0..c).map(|j| 0.5f64.powi(i.abs_diff(j) as i32)).collect())
            .collect();
        Self::new(class_codes, w, normal_class_index)
    }

    /// Parses a CSV whose first row and column hold class codes. A code
    /// cell may list equivalent codes separated by `|`. The normal class is
    /// located by [`NORMAL_CLASS_CODE`].
    pub fn from_csv_str(text: &str) -> Result<Self, MetricError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(MetricError::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let codes: Vec<String> = header.split(',').skip(1).map(|s| s.trim().to_string()).collect();
        let mut w = Vec::with_capacity(codes.len());
        for (i, line) in lines {
            let mut cells = line.split(',');
            let row_code = cells.next().unwrap_or("").trim();
            let r = w.len();
            if r >= codes.len() || !codes_match(row_code, &codes[r]) {
                return Err(MetricError::Parse {
                    line: i + 1,
                    msg: format!("row code {row_code:?} does not match column order"),
                });
            }
            let row: Result<Vec<f64>, _> = cells.map(|c| c.trim().parse::<f64>()).collect();
            let row = row.map_err(|e| MetricError::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
            w.push(row);
        }
        let normal = codes
            .iter()
            .position(|c| codes_match(c, NORMAL_CLASS_CODE))
            .ok_or_else(|| MetricError::Invalid(format!("normal class {NORMAL_CLASS_CODE} absent")))?;
        Self::new(codes, w, normal)
    }

    pub fn load(path: &Path) -> Result<Self, MetricError> {
        let text = std::fs::read_to_string(path).map_err(|e| MetricError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_csv_str(&text)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = format!(",{}\n", self.class_codes.join(","));
        for (code, row) in self.class_codes.iter().zip(&self.w) {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{code},{}", cells.join(","));
        }
        s
    }

    /// Reorders rows and columns to follow `class_codes`.
    pub fn aligned_to(&self, class_codes: &[String]) -> Result<Self, MetricError> {
        let order: Vec<usize> = class_codes
            .iter()
            .map(|c| {
                self.class_codes
                    .iter()
                    .position(|m| codes_match(m, c))
                    .ok_or_else(|| MetricError::Invalid(format!("class {c} missing from weight matrix")))
            })
            .collect::<Result<_, _>>()?;
        let w = order
            .iter()
            .map(|&i| order.iter().map(|&j| self.w[i][j]).collect())
            .collect();
        let normal = order
            .iter()
            .position(|&i| i == self.normal_class_index)
            .ok_or_else(|| MetricError::Invalid("normal class not among requested classes".into()))?;
        Self::new(class_codes.to_vec(), w, normal)
    }
}

fn check_shapes(a: &[Vec<bool>], b: &[Vec<bool>], classes: usize) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::Shape(format!("{} label rows vs {} prediction rows", a.len(), b.len())));
    }
    if let Some(r) = a.iter().chain(b).find(|r| r.len() != classes) {
        return Err(MetricError::Shape(format!("row of width {} with {classes} classes", r.len())));
    }
    Ok(())
}

fn raw_score(labels: &[Vec<bool>], predictions: &[Vec<bool>], weights: &WeightMatrix) -> f64 {
    let mut total = 0.0;
    for (truth, pred) in labels.iter().zip(predictions) {
        let union = truth.iter().zip(pred).filter(|(t, p)| **t || **p).count().max(1);
        let mut acc = 0.0;
        for i in (0..truth.len()).filter(|&i| truth[i]) {
            for j in (0..pred.len()).filter(|&j| pred[j]) {
                acc += weights.w[i][j];
            }
        }
        total += acc / union as f64;
    }
    total
}

/// Normalized challenge score: 1 for perfect predictions, 0 for always
/// predicting only the normal class.
pub fn challenge_metric(
    labels: &[Vec<bool>],
    predictions: &[Vec<bool>],
    weights: &WeightMatrix,
) -> Result<f64, MetricError> {
    let c = weights.num_classes();
    check_shapes(labels, predictions, c)?;
    let observed = raw_score(labels, predictions, weights);
    let perfect = raw_score(labels, labels, weights);
    let normal_only: Vec<Vec<bool>> = labels
        .iter()
        .map(|_| (0..c).map(|j| j == weights.normal_class_index).collect())
        .collect();
    let inactive = raw_score(labels, &normal_only, weights);
    if perfect == inactive {
        return Err(MetricError::Degenerate(perfect));
    }
    Ok((observed - inactive) / (perfect - inactive))
}

/// Area under the ROC curve via midranks; `None` without both classes.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let positives = labels.iter().filter(|&&y| y).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// Per-class AUROC over a `[record][class]` score matrix.
pub fn per_class_auroc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Vec<Option<f64>> {
    let c = labels.first().map_or(0, Vec::len);
    (0..c)
        .map(|j| {
            let s: Vec<f64> = scores.iter().map(|r| r[j]).collect();
            let y: Vec<bool> = labels.iter().map(|r| r[j]).collect();
            auroc(&s, &y)
        })
        .collect()
}

/// Mean over the defined entries.
pub fn macro_auroc(per_class: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `p >= t` per class.
pub fn apply_thresholds(probabilities: &[Vec<f64>], thresholds: &[f64]) -> Vec<Vec<bool>> {
    probabilities
        .iter()
        .map(|r| r.iter().zip(thresholds).map(|(p, t)| p >= t).collect())
        .collect()
}

/// `record_id,<c1>,...,<cC>` with 0/1 cells.
pub fn binary_matrix_csv(record_ids: &[String], class_codes: &[String], rows: &[Vec<bool>]) -> String {
    let mut s = format!("record_id,{}\n", class_codes.join(","));
    for (id, row) in record_ids.iter().zip(rows) {
        let cells: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(s, "{id},{}", cells.join(","));
    }
    s
}

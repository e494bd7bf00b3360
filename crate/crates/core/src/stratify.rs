//! Iterative multi-label stratified k-fold assignment.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StratifyError {
    #[error("k must be at least 2, got {0}")]
    BadK(usize),
    #[error("cannot split {records} records into {k} folds")]
    TooFewRecords { records: usize, k: usize },
    #[error("label row {row} has {actual} columns, expected {expected}")]
    RaggedLabels { row: usize, expected: usize, actual: usize },
    #[error("fold file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("fold file does not assign record {0}")]
    MissingRecord(String),
    #[error("fold file names unknown record {0}")]
    UnknownRecord(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
}

impl FoldAssignment {
    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len()).filter(|&i| self.fold_of[i] == fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.fold_of {
            sizes[f] += 1;
        }
        sizes
    }

    /// `[fold][label]` positive counts.
    pub fn label_counts(&self, labels: &[Vec<bool>]) -> Vec<Vec<usize>> {
        let width = labels.first().map_or(0, Vec::len);
        let mut counts = vec![vec![0; width]; self.k];
        for (row, &f) in labels.iter().zip(&self.fold_of) {
            for (c, &y) in counts[f].iter_mut().zip(row) {
                *c += usize::from(y);
            }
        }
        counts
    }

    /// Summed absolute deviation of per-fold label counts from the ideal
    /// `total/k` share.
    pub fn label_deviation(&self, labels: &[Vec<bool>]) -> f64 {
        let counts = self.label_counts(labels);
        let width = labels.first().map_or(0, Vec::len);
        let totals: Vec<usize> = (0..width).map(|l| counts.iter().map(|c| c[l]).sum()).collect();
        counts
            .iter()
            .flat_map(|c| {
                c.iter()
                    .zip(&totals)
                    .map(|(&n, &t)| (n as f64 - t as f64 / self.k as f64).abs())
            })
            .sum()
    }

    pub fn to_csv_string(&self, record_ids: &[String]) -> String {
        let mut s = String::from("record_id,fold\n");
        for (id, f) in record_ids.iter().zip(&self.fold_of) {
            let _ = writeln!(s, "{id},{f}");
        }
        s
    }

    /// Reads a `record_id,fold` file and orders it by `record_ids`.
    pub fn from_csv_str(text: &str, record_ids: &[String]) -> Result<Self, StratifyError> {
        let mut by_id: HashMap<&str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || (i == 0 && line == "record_id,fold") {
                continue;
            }
            let (id, fold) = line.split_once(',').ok_or_else(|| StratifyError::Parse {
                line: i + 1,
                msg: "expected record_id,fold".into(),
            })?;
            let fold: usize = fold.trim().parse().map_err(|_| StratifyError::Parse {
                line: i + 1,
                msg: format!("bad fold index {fold:?}"),
            })?;
            if by_id.insert(id.trim(), fold).is_some() {
                return Err(StratifyError::Parse {
                    line: i + 1,
                    msg: format!("record {id} listed twice"),
                });
            }
        }
        let mut fold_of = Vec::with_capacity(record_ids.len());
        for id in record_ids {
            fold_of.push(
                by_id
                    .remove(id.as_str())
                    .ok_or_else(|| StratifyError::MissingRecord(id.clone()))?,
            );
        }
        if let Some(extra) = by_id.keys().min() {
            return Err(StratifyError::UnknownRecord((*extra).to_string()));
        }
        let k = fold_of.iter().max().map_or(0, |m| m + 1);
        Ok(Self { fold_of, k })
    }
}

fn pick<R: Rng>(candidates: &[usize], rng: &mut R) -> usize {
    if candidates.len() == 1 {
        candidates[0]
    } else {
        candidates[rng.random_range(0..candidates.len())]
    }
}

/// Sechidis-style iterative stratification with equal fold proportions.
///
/// Demands and capacities are tracked scaled by `k` so that all tie
/// comparisons are exact integer comparisons.
pub fn stratified_folds(labels: &[Vec<bool>], k: usize, seed: u64) -> Result<FoldAssignment, StratifyError> {
    if k < 2 {
        return Err(StratifyError::BadK(k));
    }
    let n = labels.len();
    if n < k {
        return Err(StratifyError::TooFewRecords { records: n, k });
    }
    let width = labels[0].len();
    if let Some((row, r)) = labels.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(StratifyError::RaggedLabels {
            row,
            expected: width,
            actual: r.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ki = k as i64;
    let mut capacity = vec![n as i64; k];
    let mut demand: Vec<Vec<i64>> = {
        let totals: Vec<i64> = (0..width).map(|l| labels.iter().filter(|r| r[l]).count() as i64).collect();
        vec![totals; k]
    };
    let mut fold_of = vec![usize::MAX; n];
    let mut remaining: Vec<usize> = (0..width).map(|l| labels.iter().filter(|r| r[l]).count()).collect();

    while let Some(label) = (0..width).filter(|&l| remaining[l] > 0).min_by_key(|&l| (remaining[l], l)) {
        for i in 0..n {
            if fold_of[i] != usize::MAX || !labels[i][label] {
                continue;
            }
            let best_demand = (0..k).map(|f| demand[f][label]).max().expect("k >= 2");
            let by_demand: Vec<usize> = (0..k).filter(|&f| demand[f][label] == best_demand).collect();
            let best_capacity = by_demand.iter().map(|&f| capacity[f]).max().expect("non-empty");
            let by_capacity: Vec<usize> = by_demand.into_iter().filter(|&f| capacity[f] == best_capacity).collect();
            let f = pick(&by_capacity, &mut rng);
            fold_of[i] = f;
            capacity[f] -= ki;
            for l in (0..width).filter(|&l| labels[i][l]) {
                demand[f][l] -= ki;
                remaining[l] -= 1;
            }
        }
    }

    let mut cursor = 0;
    for slot in fold_of.iter_mut().filter(|s| **s == usize::MAX) {
        let best = *capacity.iter().max().expect("k >= 2");
        let f = (0..k)
            .map(|step| (cursor + step) % k)
            .find(|&f| capacity[f] == best)
            .expect("maximum exists");
        cursor = (f + 1) % k;
        *slot = f;
        capacity[f] -= ki;
    }

    let mut sizes = vec![0usize; k];
    for &f in &fold_of {
        sizes[f] += 1;
    }
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let largest = (0..k).max_by_key(|&f| (sizes[f], std::cmp::Reverse(f))).expect("k >= 2");
        let moved = (0..n).rev().find(|&i| fold_of[i] == largest).expect("largest fold is non-empty");
        fold_of[moved] = empty;
        sizes[largest] -= 1;
        sizes[empty] += 1;
    }
    Ok(FoldAssignment { fold_of, k })
}

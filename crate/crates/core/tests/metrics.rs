use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waveformer::metrics::{apply_thresholds, auroc, challenge_metric, WeightMatrix, NORMAL_CLASS_CODE};
use waveformer::train::{fit_thresholds, threshold_grid};

#[allow(clippy::needless_range_loop)]
fn weights(c: usize, normal: usize, upper: &[f64]) -> WeightMatrix {
    let mut codes: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
    codes[normal] = NORMAL_CLASS_CODE.into();
    let mut w = vec![vec![1.0; c]; c];
    let mut it = upper.iter().cycle();
    for i in 0..c {
        for j in i + 1..c {
            let v = *it.next().unwrap();
            w[i][j] = v;
            w[j][i] = v;
        }
    }
    WeightMatrix::new(codes, w, normal).unwrap()
}

fn instance() -> impl Strategy<Value = (WeightMatrix, Vec<Vec<bool>>, Vec<Vec<bool>>)> {
    (2usize..5, 2usize..8).prop_flat_map(|(c, n)| {
        (
            0..c,
            prop::collection::vec(0.0f64..1.0, c * c),
            prop::collection::vec(prop::collection::vec(any::<bool>(), c), n),
            prop::collection::vec(prop::collection::vec(any::<bool>(), c), n),
        )
            .prop_map(move |(normal, upper, l, p)| (weights(c, normal, &upper), l, p))
    })
}

fn permute_classes(rows: &[Vec<bool>], perm: &[usize]) -> Vec<Vec<bool>> {
    rows.iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect()
}

proptest! {
    #[test]
    fn metric_ignores_record_order((w, labels, preds) in instance(), rot in 0usize..8) {
        if let Ok(a) = challenge_metric(&labels, &preds, &w) {
            let k = rot % labels.len();
            let mut l2 = labels.clone();
            let mut p2 = preds.clone();
            l2.rotate_left(k);
            p2.rotate_left(k);
            let b = challenge_metric(&l2, &p2, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_ignores_class_order_when_weights_follow((w, labels, preds) in instance()) {
        if let Ok(a) = challenge_metric(&labels, &preds, &w) {
            let c = w.num_classes();
            let perm: Vec<usize> = (0..c).rev().collect();
            let codes: Vec<String> = perm.iter().map(|&j| w.class_codes[j].clone()).collect();
            let moved = w.aligned_to(&codes).unwrap();
            let b = challenge_metric(&permute_classes(&labels, &perm), &permute_classes(&preds, &perm), &moved).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metric_never_exceeds_one((w, labels, preds) in instance()) {
        if let Ok(a) = challenge_metric(&labels, &preds, &w) {
            prop_assert!(a <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn auroc_is_rank_based(
        scores in prop::collection::vec(-3.0f64..3.0, 2..40),
        flips in prop::collection::vec(any::<bool>(), 40),
    ) {
        let labels: Vec<bool> = flips[..scores.len()].to_vec();
        let a = auroc(&scores, &labels);
        let squashed: Vec<f64> = scores.iter().map(|s| s.exp() * 10.0 + 1.0).collect();
        prop_assert_eq!(a, auroc(&squashed, &labels));
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        if let Some(a) = a {
            let b = auroc(&negated, &labels).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-12);
        }
    }
}

fn random_problem(seed: u64, n: usize, c: usize) -> (Vec<Vec<f64>>, Vec<Vec<bool>>, WeightMatrix) {
    let mut g = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<Vec<bool>> = (0..n).map(|_| (0..c).map(|_| g.random::<f64>() < 0.35).collect()).collect();
    let probs = labels
        .iter()
        .map(|r| {
            r.iter()
                .map(|&y| (0.6 * g.random::<f64>() + if y { 0.3 } else { 0.05 }).min(0.99))
                .collect()
        })
        .collect();
    let upper: Vec<f64> = (0..c * c).map(|_| g.random::<f64>()).collect();
    (probs, labels, weights(c, 0, &upper))
}

fn score(probs: &[Vec<f64>], labels: &[Vec<bool>], w: &WeightMatrix, t: &[f64]) -> f64 {
    challenge_metric(labels, &apply_thresholds(probs, t), w).unwrap()
}

#[test]
fn fitted_thresholds_dominate_uniform_thresholds() {
    let (probs, labels, w) = random_problem(50, 50, 4);
    let fit = fit_thresholds(&probs, &labels, &w).unwrap();
    let fitted = fit.metric.unwrap();
    assert_eq!(fitted, score(&probs, &labels, &w, &fit.thresholds));
    for t in threshold_grid() {
        assert!(fitted >= score(&probs, &labels, &w, &[t; 4]), "uniform {t}");
    }
}

#[test]
fn coordinate_ascent_is_a_grid_local_optimum_no_better_than_brute_force() {
    let grid = threshold_grid();
    for seed in 0..5 {
        let (probs, labels, w) = random_problem(seed, 12, 2);
        let fit = fit_thresholds(&probs, &labels, &w).unwrap();
        let fitted = fit.metric.unwrap();
        let mut best = f64::NEG_INFINITY;
        for &a in &grid {
            for &b in &grid {
                best = best.max(score(&probs, &labels, &w, &[a, b]));
            }
        }
        assert!(fitted <= best + 1e-12);
        assert!(fitted >= score(&probs, &labels, &w, &[0.5, 0.5]) - 1e-12);
        for j in 0..2 {
            for &t in &grid {
                let mut alt = fit.thresholds.clone();
                alt[j] = t;
                assert!(score(&probs, &labels, &w, &alt) <= fitted + 1e-12, "seed {seed} class {j} t {t}");
            }
        }
    }
}

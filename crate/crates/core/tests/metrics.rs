use commeta::metrics::{
    aupr, episode_summary, f1_per_class, mcc, pool_checkpoints, random_f1_baseline, score_episode, ConfusionMatrix,
};
use commeta::rng;
use rand::Rng;

/// Expands counts into `(truth, predicted)` samples.
fn samples(classes: usize, counts: &[u64]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for t in 0..classes {
        for p in 0..classes {
            for _ in 0..counts[t * classes + p] {
                out.push((t, p));
            }
        }
    }
    out
}

fn f1_oracle(classes: usize, s: &[(usize, usize)]) -> Vec<f64> {
    (0..classes)
        .map(|c| {
            let tp = s.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let predicted = s.iter().filter(|&&(_, p)| p == c).count() as f64;
            let actual = s.iter().filter(|&&(t, _)| t == c).count() as f64;
            if predicted == 0.0 || actual == 0.0 || tp == 0.0 {
                return 0.0;
            }
            let (precision, recall) = (tp / predicted, tp / actual);
            2.0 * precision * recall / (precision + recall)
        })
        .collect()
}

/// Correlation of the one-hot truth and prediction matrices, with
/// covariance summed over class columns.
fn mcc_oracle(classes: usize, s: &[(usize, usize)]) -> f64 {
    let n = s.len() as f64;
    if s.is_empty() {
        return 0.0;
    }
    let onehot = |c: usize, k: usize| if c == k { 1.0 } else { 0.0 };
    let mut cov = [0.0f64; 3];
    for k in 0..classes {
        let mx = s.iter().map(|&(t, _)| onehot(t, k)).sum::<f64>() / n;
        let my = s.iter().map(|&(_, p)| onehot(p, k)).sum::<f64>() / n;
        for &(t, p) in s {
            let (x, y) = (onehot(t, k) - mx, onehot(p, k) - my);
            cov[0] += x * y;
            cov[1] += x * x;
            cov[2] += y * y;
        }
    }
    if cov[1] == 0.0 || cov[2] == 0.0 {
        0.0
    } else {
        cov[0] / (cov[1] * cov[2]).sqrt()
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn check_counts(classes: usize, counts: Vec<u64>) {
    let s = samples(classes, &counts);
    let cm = ConfusionMatrix::from_counts(classes, counts.clone()).unwrap();
    let f1 = f1_per_class(&cm);
    for (a, b) in f1.iter().zip(f1_oracle(classes, &s)) {
        assert!(close(*a, b), "F1 {counts:?}: {a} vs {b}");
    }
    let (a, b) = (mcc(&cm), mcc_oracle(classes, &s));
    assert!(close(a, b), "MCC {counts:?}: {a} vs {b}");
}

#[test]
fn every_small_binary_matrix() {
    let mut checked = 0;
    for tp in 0..=12u64 {
        for fn_ in 0..=12 - tp {
            for fp in 0..=12 - tp - fn_ {
                for tn in 0..=12 - tp - fn_ - fp {
                    check_counts(2, vec![tp, fn_, fp, tn]);
                    checked += 1;
                }
            }
        }
    }
    assert_eq!(checked, 1820);
}

#[test]
fn random_three_class_matrices() {
    let mut r = rng::stream(42, 0);
    for _ in 0..1000 {
        let counts: Vec<u64> = (0..9).map(|_| r.random_range(0..15)).collect();
        check_counts(3, counts);
    }
}

/// Mean over positives of the precision among all items scored at least as
/// high as that positive.
fn ap_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let total: f64 = positives
        .iter()
        .map(|&i| {
            let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
            above.iter().filter(|&&j| labels[j]).count() as f64 / above.len() as f64
        })
        .sum();
    Some(total / positives.len() as f64)
}

#[test]
fn average_precision_with_ties() {
    let mut r = rng::stream(7, 0);
    for _ in 0..1000 {
        let n = r.random_range(1..30);
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        match (aupr(&scores, &labels), ap_oracle(&scores, &labels)) {
            (Some(a), Some(b)) => assert!(close(a, b), "{a} vs {b}"),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn perfect_and_inverted_rankings() {
    assert_eq!(aupr(&[0.9, 0.8, 0.1], &[true, true, false]), Some(1.0));
    let a = aupr(&[0.1, 0.2, 0.9], &[true, false, false]).unwrap();
    assert!(close(a, 1.0 / 3.0));
    assert_eq!(aupr(&[0.5, 0.5], &[true, false]), Some(0.5));
}

#[test]
fn random_baseline_values() {
    assert_eq!(random_f1_baseline(0.5), 2.0 / 3.0);
    assert_eq!(random_f1_baseline(1.0), 1.0);
    assert_eq!(random_f1_baseline(0.0), 0.0);
}

#[test]
fn summary_interval() {
    let values = [0.2, 0.4, 0.9, 0.5, 0.1];
    let s = episode_summary(&values).unwrap();
    let mean = 0.42;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
    assert!(close(s.mean, mean));
    assert!(close(s.variance, var));
    assert!(close(s.ci_upper, mean + 1.645 * (var / 5.0).sqrt()));
    assert!(close(s.ci_lower, mean - 1.645 * (var / 5.0).sqrt()));
}

#[test]
fn inverse_variance_pooling() {
    let items = [(0.5, 0.01), (0.7, 0.04), (0.2, 0.02)];
    let p = pool_checkpoints(&items).unwrap();
    let w: Vec<f64> = items.iter().map(|&(_, v)| 1.0 / v).collect();
    let sw: f64 = w.iter().sum();
    let mean = items.iter().zip(&w).map(|(&(m, _), w)| m * w).sum::<f64>() / sw;
    assert!(close(p.mean, mean));
    assert!(close(p.variance, 1.0 / sw));
    assert!(close(p.ci_upper - p.mean, 1.645 / sw.sqrt()));
    // equal variances reduce to the plain mean
    let q = pool_checkpoints(&[(0.1, 0.5), (0.3, 0.5)]).unwrap();
    assert!(close(q.mean, 0.2));
    assert!(pool_checkpoints(&[(0.1, f64::NAN)]).is_err());
}

#[test]
fn episode_scores_use_argmax_and_class_one_scores() {
    let truth = [0, 1, 1, 0];
    let probs = vec![vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4], vec![0.2, 0.8]];
    let m = score_episode(0, 2, &truth, &probs).unwrap();
    let cm = ConfusionMatrix::from_predictions(2, &truth, &[0, 1, 0, 1]).unwrap();
    assert!(close(m.mcc, mcc(&cm)));
    let ap = ap_oracle(&[0.1, 0.7, 0.4, 0.8], &[false, true, true, false]).unwrap();
    assert!(close(m.aupr.unwrap(), ap));
    assert_eq!(m.scored, 4);
}

//! Classification and imputation metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datasets::{Dataset, SequenceDataset};
use crate::error::{GilError, Result};
use crate::linalg::Vector;

pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// One-vs-rest macro average for more than two classes.
    pub auc: Option<f64>,
    pub average_precision: Option<f64>,
    pub n: usize,
}

/// Binary accuracy: predict 1 iff `score >= 0.5`.
pub fn accuracy(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| usize::from(s >= DECISION_THRESHOLD) == y)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Accuracy from class-probability rows. Two-class rows use the threshold
/// rule on the positive-class probability, wider rows use argmax.
pub fn accuracy_probs(probs: &[Vector], labels: &[usize]) -> Result<f64> {
    check_lengths(probs.len(), labels.len())?;
    let correct = probs.iter().zip(labels).filter(|(p, &y)| predicted_class(p) == y).count();
    Ok(correct as f64 / probs.len() as f64)
}

pub fn predicted_class(p: &Vector) -> usize {
    match p.len() {
        1 => usize::from(p[0] >= DECISION_THRESHOLD),
        2 => usize::from(p[1] >= DECISION_THRESHOLD),
        _ => p.argmax(),
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(GilError::UndefinedMetric("no predictions".into()));
    }
    if a != b {
        return Err(GilError::Contract(format!("{a} scores but {b} labels")));
    }
    Ok(())
}

fn class_counts(labels: &[usize]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&y| y == 1).count();
    if labels.iter().any(|&y| y > 1) {
        return Err(GilError::Contract("binary metric given a label other than 0/1".into()));
    }
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(GilError::UndefinedMetric("labels contain a single class".into()));
    }
    Ok((pos, neg))
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the Mann-Whitney U, kept integral so ties stay exact
    let mut twice_u: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group = &order[i..j];
        let gp = group.iter().filter(|&&k| labels[k] == 1).count() as u64;
        let gn = group.len() as u64 - gp;
        twice_u += gp * (2 * neg_below + gn);
        neg_below += gn;
        i = j;
    }
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// `sum_k (R_k - R_{k-1}) P_k` over descending distinct-score thresholds.
pub fn average_precision(scores: &[f64], labels: &[usize]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let (pos, _) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// Accuracy plus ranking metrics from class-probability rows. Ranking
/// metrics are `None` when undefined (a class absent from `labels`).
pub fn evaluate(probs: &[Vector], labels: &[usize]) -> Result<EvalResult> {
    let accuracy = accuracy_probs(probs, labels)?;
    let width = probs[0].len();
    let (auc, ap) = if width <= 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[width - 1]).collect();
        (roc_auc(&scores, labels).ok(), average_precision(&scores, labels).ok())
    } else {
        let mut aucs = Vec::new();
        let mut aps = Vec::new();
        for c in 0..width {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let ys: Vec<usize> = labels.iter().map(|&y| usize::from(y == c)).collect();
            if let (Ok(a), Ok(p)) = (roc_auc(&scores, &ys), average_precision(&scores, &ys)) {
                aucs.push(a);
                aps.push(p);
            }
        }
        let mean = |v: &[f64]| (v.len() == width).then(|| v.iter().sum::<f64>() / v.len() as f64);
        (mean(&aucs), mean(&aps))
    };
    Ok(EvalResult { accuracy, auc, average_precision: ap, n: probs.len() })
}

/// Mean squared error over entries masked in `imputed`, against the
/// complete values in `truth`.
pub fn imputation_mse(imputed: &Dataset, truth: &Dataset) -> Result<f64> {
    if imputed.len() != truth.len() || imputed.d != truth.d {
        return Err(GilError::Contract("imputed and ground-truth datasets differ in shape".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in imputed.samples.iter().zip(&truth.samples) {
        for j in 0..imputed.d {
            if a.m[j] == 0.0 {
                let diff = a.x_filled[j] - b.x_filled[j];
                sum += diff * diff;
                count += 1;
            }
        }
    }
    finish_mse(sum, count)
}

pub fn imputation_mse_sequences(imputed: &SequenceDataset, truth: &SequenceDataset) -> Result<f64> {
    if imputed.len() != truth.len() {
        return Err(GilError::Contract("imputed and ground-truth datasets differ in shape".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (a, b) in imputed.samples.iter().zip(&truth.samples) {
        if a.steps.len() != b.steps.len() {
            return Err(GilError::Contract("sequence horizons differ".into()));
        }
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            for j in 0..sa.m.len() {
                if sa.m[j] == 0.0 {
                    let diff = sa.x_filled[j] - sb.x_filled[j];
                    sum += diff * diff;
                    count += 1;
                }
            }
        }
    }
    finish_mse(sum, count)
}

fn finish_mse(sum: f64, count: usize) -> Result<f64> {
    if count == 0 {
        return Err(GilError::UndefinedMetric("no masked entries".into()));
    }
    Ok(sum / count as f64)
}

/// Pearson correlation and its two-sided p-value from the Student-t
/// distribution with `n - 2` degrees of freedom.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(GilError::Contract(format!("{} xs but {} ys", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(GilError::UndefinedMetric(format!("pearson needs at least 3 points, got {n}")));
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(GilError::UndefinedMetric("zero variance".into()));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    let df = (n - 2) as f64;
    let p = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("df >= 1");
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok((r, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Sample;
    use crate::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn pairwise_auc(scores: &[f64], labels: &[usize]) -> f64 {
        let mut twice = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &yi) in labels.iter().enumerate() {
            if yi == 1 {
                p += 1;
            } else {
                n += 1;
            }
            for (j, &yj) in labels.iter().enumerate() {
                if yi == 1 && yj == 0 {
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2 * p * n) as f64
    }

    fn sweep_ap(scores: &[f64], labels: &[usize]) -> f64 {
        let mut thresholds: Vec<f64> = scores.to_vec();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
        let mut ap = 0.0;
        let mut prev = 0.0;
        for t in thresholds {
            let tp = scores.iter().zip(labels).filter(|(&s, &y)| s >= t && y == 1).count() as f64;
            let k = scores.iter().filter(|&&s| s >= t).count() as f64;
            let r = tp / pos;
            ap += (r - prev) * (tp / k);
            prev = r;
        }
        ap
    }

    fn random_case(rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
        let n = rng.random_range(2..=200);
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) / 19.0).collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        (scores, labels)
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0.5], &[1]).unwrap(), 1.0);
        assert!(accuracy(&[], &[]).is_err());
        assert_eq!(accuracy_probs(&[Vector(vec![0.5, 0.5])], &[1]).unwrap(), 1.0);
        assert_eq!(accuracy_probs(&[Vector(vec![0.2, 0.5, 0.3])], &[1]).unwrap(), 1.0);
    }

    #[test]
    fn accuracy_matches_loop_oracle() {
        let mut rng = seeded_rng(1, 0);
        for _ in 0..1000 {
            let n = rng.random_range(1..30);
            let s: Vec<f64> = (0..n).map(|_| rng.random()).collect();
            let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            let mut correct = 0;
            for i in 0..n {
                let pred = if s[i] >= 0.5 { 1 } else { 0 };
                if pred == y[i] {
                    correct += 1;
                }
            }
            assert_eq!(accuracy(&s, &y).unwrap(), correct as f64 / n as f64);
        }
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(GilError::UndefinedMetric(_))));
    }

    #[test]
    fn auc_equals_pairwise_oracle_exactly() {
        let mut rng = seeded_rng(2, 0);
        for _ in 0..50 {
            let (s, y) = random_case(&mut rng);
            assert_eq!(roc_auc(&s, &y).unwrap(), pairwise_auc(&s, &y));
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        let n = 7;
        let mut s: Vec<f64> = (0..n).map(|i| 1.0 - i as f64 / 10.0).collect();
        s[n - 1] = 0.0;
        let mut y = vec![0; n];
        y[n - 1] = 1;
        assert!((average_precision(&s, &y).unwrap() - 1.0 / n as f64).abs() < 1e-15);
    }

    #[test]
    fn ap_matches_threshold_sweep() {
        let mut rng = seeded_rng(3, 0);
        for _ in 0..50 {
            let (s, y) = random_case(&mut rng);
            assert!((average_precision(&s, &y).unwrap() - sweep_ap(&s, &y)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn auc_complement(raw in proptest::collection::vec(0u32..1_000_000, 4..60), seed in 0u64..1000) {
            let mut s: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
            s.sort_by(f64::total_cmp);
            s.dedup();
            prop_assume!(s.len() >= 2);
            let mut rng = seeded_rng(seed, 0);
            let mut y: Vec<usize> = (0..s.len()).map(|_| rng.random_range(0..2)).collect();
            y[0] = 0;
            y[1] = 1;
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            let total = roc_auc(&s, &y).unwrap() + roc_auc(&neg, &y).unwrap();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ranking_metrics_invariant_under_monotone_maps(seed in 0u64..1000) {
            let mut rng = seeded_rng(seed, 5);
            let (s, y) = random_case(&mut rng);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
            prop_assert_eq!(average_precision(&s, &y).unwrap(), average_precision(&t, &y).unwrap());
        }

        #[test]
        fn pearson_affine_invariance(xs in proptest::collection::vec(-100.0f64..100.0, 5..40), a in 0.1f64..10.0, b in -50.0f64..50.0) {
            let ys: Vec<f64> = xs.iter().enumerate().map(|(i, x)| x.sin() + i as f64 * 0.1).collect();
            let (r, _) = pearson(&xs, &ys).unwrap();
            let xt: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let (r2, _) = pearson(&xt, &ys).unwrap();
            prop_assert!((r - r2).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_multiclass_uses_argmax_and_macro_auc() {
        let probs = vec![Vector(vec![0.8, 0.1, 0.1]), Vector(vec![0.1, 0.8, 0.1]), Vector(vec![0.1, 0.1, 0.8])];
        let r = evaluate(&probs, &[0, 1, 2]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.auc, Some(1.0));
        let r = evaluate(&probs, &[0, 1, 1]).unwrap();
        assert_eq!(r.auc, None);
    }

    fn ds(rows: Vec<(Vec<f64>, Vec<f64>)>) -> Dataset {
        let samples = rows
            .into_iter()
            .map(|(x, m)| Sample { x_filled: Vector(x.clone()), x: Vector(x), m: Vector(m), y: 0 })
            .map(|mut s| {
                s.x = s.x.iter().zip(s.m.iter()).map(|(v, &o)| if o == 1.0 { *v } else { f64::NAN }).collect::<Vec<_>>().into();
                s
            })
            .collect();
        Dataset::new(samples, 2, 0.0)
    }

    #[test]
    fn imputation_mse_examples() {
        let truth = ds(vec![(vec![1.0, 2.0], vec![1.0, 1.0]), (vec![3.0, 4.0], vec![1.0, 1.0])]);
        let same = ds(vec![(vec![1.0, 2.0], vec![1.0, 0.0]), (vec![3.0, 4.0], vec![0.0, 1.0])]);
        assert_eq!(imputation_mse(&same, &truth).unwrap(), 0.0);
        let shifted = ds(vec![(vec![1.0, 2.5], vec![1.0, 0.0]), (vec![3.5, 4.0], vec![0.0, 1.0])]);
        assert_eq!(imputation_mse(&shifted, &truth).unwrap(), 0.25);
        assert!(matches!(imputation_mse(&truth, &truth), Err(GilError::UndefinedMetric(_))));
    }

    #[test]
    fn imputation_mse_matches_loop_oracle() {
        let mut rng = seeded_rng(9, 0);
        let rows: Vec<(Vec<f64>, Vec<f64>)> =
            (0..30).map(|_| ((0..5).map(|_| rng.random_range(-1.0..1.0)).collect(), vec![1.0; 5])).collect();
        let truth = ds(rows.clone());
        let noisy: Vec<(Vec<f64>, Vec<f64>)> = rows
            .iter()
            .map(|(x, _)| {
                let m: Vec<f64> = (0..5).map(|_| if rng.random::<f64>() < 0.4 { 0.0 } else { 1.0 }).collect();
                let x: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
                (x, m)
            })
            .collect();
        let imputed = ds(noisy.clone());
        let mut sum = 0.0;
        let mut k = 0;
        for (i, (x, m)) in noisy.iter().enumerate() {
            for j in 0..5 {
                if m[j] == 0.0 {
                    sum += (x[j] - rows[i].0[j]).powi(2);
                    k += 1;
                }
            }
        }
        assert!((imputation_mse(&imputed, &truth).unwrap() - sum / k as f64).abs() < 1e-15);
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.5, 4.0, 7.0];
        let twice: Vec<f64> = xs.iter().map(|x| 2.0 * x).collect();
        let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((pearson(&xs, &twice).unwrap().0 - 1.0).abs() < 1e-15);
        assert!((pearson(&xs, &neg).unwrap().0 + 1.0).abs() < 1e-15);
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(pearson(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }
}

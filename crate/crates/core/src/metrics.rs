//! Rank-based AUC, precision at a recall target, binary and macro F1.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub score: f64,
    pub positive: bool,
}

impl ScoredSample {
    pub fn new(score: f64, positive: bool) -> Self {
        Self { score, positive }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    /// Counts for `predicted` against `actual`, true meaning positive.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (predicted, actual) in pairs {
            match (predicted, actual) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// Zero when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// Zero when there are no actual positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn check_scores(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    if let Some(s) = samples.iter().find(|s| !s.score.is_finite()) {
        return Err(Error::UndefinedMetric(format!("non-finite score {}", s.score)));
    }
    let pos = samples.iter().filter(|s| s.positive).count();
    Ok((pos, samples.len() - pos))
}

fn descending(samples: &[ScoredSample]) -> Vec<ScoredSample> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    sorted
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (np, nn) = check_scores(samples)?;
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {np} positive and {nn} negative"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * sorted[i..j].iter().filter(|s| s.positive).count() as f64;
        i = j;
    }
    let (np, nn) = (np as f64, nn as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// Threshold with its counts; a sample is positive when `score >= threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub counts: ConfusionCounts,
}

/// One operating point per distinct score, highest threshold first.
pub fn operating_points(samples: &[ScoredSample]) -> Result<Vec<OperatingPoint>> {
    let (np, nn) = check_scores(samples)?;
    let sorted = descending(samples);
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let counts = ConfusionCounts {
            tp,
            fp,
            fn_: np as u64 - tp,
            tn: nn as u64 - fp,
        };
        points.push(OperatingPoint {
            threshold: t,
            precision: counts.precision(),
            recall: counts.recall(),
            counts,
        });
    }
    Ok(points)
}

/// Highest-threshold operating point whose recall reaches `target_recall`.
pub fn operating_point_at_recall(samples: &[ScoredSample], target_recall: f64) -> Result<OperatingPoint> {
    if !(target_recall > 0.0 && target_recall <= 1.0) {
        return Err(Error::InvalidConfig(format!("target recall must lie in (0, 1], got {target_recall}")));
    }
    let (np, _) = check_scores(samples)?;
    if np == 0 {
        return Err(Error::UndefinedMetric("precision at recall needs positives".into()));
    }
    let points = operating_points(samples)?;
    Ok(*points
        .iter()
        .find(|p| p.recall >= target_recall)
        .expect("the lowest threshold reaches full recall"))
}

/// Precision at the highest threshold reaching `target_recall`, without
/// interpolation.
pub fn precision_at_recall(samples: &[ScoredSample], target_recall: f64) -> Result<f64> {
    Ok(operating_point_at_recall(samples, target_recall)?.precision)
}

/// Score threshold of [`operating_point_at_recall`].
pub fn threshold_at_recall(samples: &[ScoredSample], target_recall: f64) -> Result<f64> {
    Ok(operating_point_at_recall(samples, target_recall)?.threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC curve from `(0, 0)` at an infinite threshold down to `(1, 1)`.
pub fn roc_points(samples: &[ScoredSample]) -> Result<Vec<RocPoint>> {
    let mut out = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    for p in operating_points(samples)? {
        out.push(RocPoint {
            threshold: p.threshold,
            fpr: ratio(p.counts.fp, p.counts.fp + p.counts.tn),
            tpr: p.recall,
        });
    }
    Ok(out)
}

/// Harmonic mean of precision and recall; zero when either is undefined.
pub fn binary_f1(counts: ConfusionCounts) -> f64 {
    if counts.tp + counts.fp == 0 || counts.tp + counts.fn_ == 0 {
        return 0.0;
    }
    let (p, r) = (counts.precision(), counts.recall());
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Unweighted mean of per-class F1.
pub fn macro_f1(per_class: &[ConfusionCounts]) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.iter().map(|&c| binary_f1(c)).sum::<f64>() / per_class.len() as f64
}

/// `matrix[actual][predicted]` counts.
pub fn confusion_matrix(predictions: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Label(format!("class index out of range for {classes} classes")));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

/// One-vs-rest counts for every class of a confusion matrix.
pub fn one_vs_rest(matrix: &[Vec<u64>]) -> Vec<ConfusionCounts> {
    let total: u64 = matrix.iter().flatten().sum();
    (0..matrix.len())
        .map(|k| {
            let tp = matrix[k][k];
            let actual: u64 = matrix[k].iter().sum();
            let predicted: u64 = matrix.iter().map(|row| row[k]).sum();
            ConfusionCounts {
                tp,
                fp: predicted - tp,
                fn_: actual - tp,
                tn: total + tp - actual - predicted,
            }
        })
        .collect()
}

/// Fraction of exact matches.
pub fn top1_accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predictions.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(pos: &[f64], neg: &[f64]) -> Vec<ScoredSample> {
        pos.iter()
            .map(|&s| ScoredSample::new(s, true))
            .chain(neg.iter().map(|&s| ScoredSample::new(s, false)))
            .collect()
    }

    fn pairwise_auc(s: &[ScoredSample]) -> f64 {
        let pos: Vec<f64> = s.iter().filter(|x| x.positive).map(|x| x.score).collect();
        let neg: Vec<f64> = s.iter().filter(|x| !x.positive).map(|x| x.score).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    /// Evaluates every candidate cut independently.
    fn sweep_precision(s: &[ScoredSample], target: f64) -> f64 {
        let mut cuts: Vec<f64> = s.iter().map(|x| x.score).collect();
        cuts.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let positives = s.iter().filter(|x| x.positive).count() as f64;
        for t in cuts {
            let tp = s.iter().filter(|x| x.positive && x.score >= t).count() as f64;
            let flagged = s.iter().filter(|x| x.score >= t).count() as f64;
            if tp / positives >= target {
                return tp / flagged;
            }
        }
        unreachable!()
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, levels: u32) -> Vec<ScoredSample> {
        loop {
            let s: Vec<ScoredSample> = (0..n)
                .map(|_| ScoredSample::new(rng.random_range(0..levels) as f64 / levels as f64, rng.random_bool(0.4)))
                .collect();
            if s.iter().any(|x| x.positive) && s.iter().any(|x| !x.positive) {
                return s;
            }
        }
    }

    #[test]
    fn auc_worked_examples() {
        assert_eq!(auc(&samples(&[0.9, 0.8], &[0.1])).unwrap(), 1.0);
        assert_eq!(auc(&samples(&[0.4], &[0.6])).unwrap(), 0.0);
        assert_eq!(auc(&samples(&[0.5], &[0.5])).unwrap(), 0.5);
        assert!(matches!(auc(&samples(&[0.4, 0.2], &[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let s = random_samples(&mut rng, 1000, 50);
            assert!((auc(&s).unwrap() - pairwise_auc(&s)).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_at_recall_examples() {
        let sep = samples(&[0.9, 0.8, 0.7], &[0.3, 0.1]);
        for t in [0.1, 0.5, 0.9, 1.0] {
            assert_eq!(precision_at_recall(&sep, t).unwrap(), 1.0);
        }
        let flat = samples(&[0.5, 0.5], &[0.5, 0.5, 0.5]);
        assert_eq!(precision_at_recall(&flat, 1.0).unwrap(), 0.4);
        assert!(precision_at_recall(&sep, 0.0).is_err());
        assert!(precision_at_recall(&samples(&[], &[0.1]), 0.9).is_err());
    }

    #[test]
    fn precision_at_recall_matches_sweep_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let s = random_samples(&mut rng, 200, 40);
            for t in [0.5, 0.9, 0.95, 1.0] {
                assert_eq!(precision_at_recall(&s, t).unwrap(), sweep_precision(&s, t));
            }
        }
    }

    #[test]
    fn uninterpolated_precision_can_rise_with_recall() {
        let s = samples(&[0.8, 0.7, 0.6], &[0.9]);
        assert_eq!(precision_at_recall(&s, 0.3).unwrap(), 0.5);
        assert_eq!(precision_at_recall(&s, 1.0).unwrap(), 0.75);
    }

    #[test]
    fn f1_examples() {
        let c = |tp, fp, fn_| ConfusionCounts { tp, fp, fn_, tn: 0 };
        assert!((binary_f1(c(8, 2, 2)) - 0.8).abs() < 1e-15);
        assert_eq!(binary_f1(c(0, 0, 5)), 0.0);
        let p = 2.0 / 3.0;
        let r = 6.0 / 7.0;
        assert!((binary_f1(c(6, 3, 1)) - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((binary_f1(c(6, 3, 1)) - 0.75).abs() < 1e-15);
        assert_eq!(macro_f1(&[c(4, 0, 0), c(5, 0, 0)]), 1.0);
        let f08 = c(8, 2, 2);
        let f04 = c(2, 3, 3);
        assert!((binary_f1(f04) - 0.4).abs() < 1e-15);
        assert!((macro_f1(&[f08, f04]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn macro_f1_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let labels: Vec<usize> = (0..400).map(|_| rng.random_range(0..8)).collect();
        let preds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.random_bool(0.6) { y } else { rng.random_range(0..8) })
            .collect();
        let counts = one_vs_rest(&confusion_matrix(&preds, &labels, 8).unwrap());
        let mut oracle = 0.0;
        for k in 0..8 {
            let tp = preds.iter().zip(&labels).filter(|(p, y)| **p == k && **y == k).count() as f64;
            let pp = preds.iter().filter(|p| **p == k).count() as f64;
            let ap = labels.iter().filter(|y| **y == k).count() as f64;
            let (p, r) = (tp / pp, tp / ap);
            oracle += if tp == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        }
        assert!((macro_f1(&counts) - oracle / 8.0).abs() < 1e-12);
        assert!(counts.iter().all(|c| c.tp + c.fp + c.fn_ + c.tn == 400));
    }

    #[test]
    fn roc_runs_corner_to_corner() {
        let roc = roc_points(&samples(&[0.9, 0.4], &[0.6, 0.1])).unwrap();
        assert_eq!((roc[0].fpr, roc[0].tpr), (0.0, 0.0));
        let last = roc.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        assert_eq!(roc.len(), 5);
    }

    fn scored() -> impl Strategy<Value = Vec<ScoredSample>> {
        prop::collection::vec((0u32..30, any::<bool>()), 2..60)
            .prop_filter("both classes", |v| v.iter().any(|x| x.1) && v.iter().any(|x| !x.1))
            .prop_map(|v| v.into_iter().map(|(s, p)| ScoredSample::new(s as f64 / 30.0, p)).collect())
    }

    proptest! {
        #[test]
        fn auc_is_rank_invariant(s in scored()) {
            let t: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new((3.0 * x.score).exp() - 7.0, x.positive)).collect();
            prop_assert!((auc(&s).unwrap() - auc(&t).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn flipping_labels_complements_auc(
            scores in prop::collection::btree_set(0u32..10_000, 2..60),
            flags in prop::collection::vec(any::<bool>(), 60),
        ) {
            let s: Vec<ScoredSample> = scores.iter().zip(&flags).map(|(&v, &p)| ScoredSample::new(v as f64, p)).collect();
            prop_assume!(s.iter().any(|x| x.positive) && s.iter().any(|x| !x.positive));
            let f: Vec<ScoredSample> = s.iter().map(|x| ScoredSample::new(x.score, !x.positive)).collect();
            prop_assert!((auc(&f).unwrap() - (1.0 - auc(&s).unwrap())).abs() < 1e-12);
        }

        #[test]
        fn operating_threshold_is_non_increasing_in_target(s in scored(), a in 0.01f64..1.0, b in 0.01f64..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p_lo = operating_point_at_recall(&s, lo).unwrap();
            let p_hi = operating_point_at_recall(&s, hi).unwrap();
            prop_assert!(p_hi.threshold <= p_lo.threshold);
            prop_assert!(p_hi.recall >= hi && p_lo.recall >= lo);
        }

        #[test]
        fn macro_f1_is_relabeling_invariant(
            pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80),
        ) {
            let perm = [2usize, 0, 3, 1];
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let p2: Vec<usize> = p.iter().map(|&k| perm[k]).collect();
            let y2: Vec<usize> = y.iter().map(|&k| perm[k]).collect();
            let a = macro_f1(&one_vs_rest(&confusion_matrix(&p, &y, 4).unwrap()));
            let b = macro_f1(&one_vs_rest(&confusion_matrix(&p2, &y2, 4).unwrap()));
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

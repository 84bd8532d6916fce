//! Evaluation reports for detection and recognition settings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Setting;
use crate::error::{Error, Result};
use crate::metrics::{
    auc, binary_f1, confusion_matrix, macro_f1, one_vs_rest, precision_at_recall, roc_points, top1_accuracy,
    ConfusionCounts, RocPoint, ScoredSample,
};

/// Distressed score above which an image counts as detected.
pub const DETECTION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    /// `None` when the test set holds a single class.
    pub auc: Option<f64>,
    pub precision_at_recall_90: Option<f64>,
    pub precision_at_recall_95: Option<f64>,
    pub f1: f64,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub index: usize,
    pub name: String,
    pub support: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecognitionMetrics {
    pub top1: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub setting: Setting,
    pub num_samples: usize,
    pub class_names: Vec<String>,
    pub detection: Option<DetectionMetrics>,
    pub recognition: Option<RecognitionMetrics>,
    #[serde(skip)]
    pub roc: Vec<RocPoint>,
}

/// Aligned per-image outputs and ground truth.
#[derive(Clone, Copy, Debug)]
pub struct ReportInput<'a> {
    pub setting: Setting,
    pub class_names: &'a [String],
    pub normal_class: Option<usize>,
    pub predictions: &'a [usize],
    /// Distressed scores in `[0, 1]`; required for detection metrics.
    pub scores: Option<&'a [f64]>,
    pub labels: &'a [usize],
}

fn detection(scores: &[f64], labels: &[usize], normal: usize) -> Result<(DetectionMetrics, Vec<RocPoint>)> {
    let samples: Vec<ScoredSample> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| ScoredSample::new(s, y != normal))
        .collect();
    let has_pos = samples.iter().any(|s| s.positive);
    let has_neg = samples.iter().any(|s| !s.positive);
    let counts = ConfusionCounts::from_pairs(samples.iter().map(|s| (s.score > DETECTION_THRESHOLD, s.positive)));
    let metrics = DetectionMetrics {
        auc: (has_pos && has_neg).then(|| auc(&samples)).transpose()?,
        precision_at_recall_90: has_pos.then(|| precision_at_recall(&samples, 0.90)).transpose()?,
        precision_at_recall_95: has_pos.then(|| precision_at_recall(&samples, 0.95)).transpose()?,
        f1: binary_f1(counts),
        threshold: DETECTION_THRESHOLD,
        counts,
    };
    Ok((metrics, roc_points(&samples)?))
}

fn recognition(predictions: &[usize], labels: &[usize], names: &[String]) -> Result<RecognitionMetrics> {
    let confusion = confusion_matrix(predictions, labels, names.len())?;
    let counts = one_vs_rest(&confusion);
    let per_class = counts
        .iter()
        .enumerate()
        .map(|(k, c)| ClassMetrics {
            index: k,
            name: names[k].clone(),
            support: c.tp + c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            f1: binary_f1(*c),
        })
        .collect();
    Ok(RecognitionMetrics {
        top1: top1_accuracy(predictions, labels),
        macro_f1: macro_f1(&counts),
        per_class,
        confusion,
    })
}

/// Detection settings report ranking metrics, recognition settings report
/// accuracy and macro F1. A recognizer with a normal class also gets the
/// detection view of its scores.
pub fn report(input: ReportInput<'_>) -> Result<EvaluationReport> {
    let n = input.labels.len();
    if input.predictions.len() != n || input.scores.is_some_and(|s| s.len() != n) {
        return Err(Error::Shape("predictions, scores and labels must align".into()));
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("empty evaluation set".into()));
    }
    let mut roc = Vec::new();
    let wants_detection = matches!(input.setting, Setting::IDet | Setting::IRec);
    let detection = match (wants_detection, input.scores, input.normal_class) {
        (true, Some(scores), Some(normal)) => {
            let (d, r) = detection(scores, input.labels, normal)?;
            roc = r;
            Some(d)
        }
        (true, None, _) if input.setting == Setting::IDet => {
            return Err(Error::Shape("detection report needs scores".into()))
        }
        _ => None,
    };
    let recognition = (input.setting != Setting::IDet)
        .then(|| recognition(input.predictions, input.labels, input.class_names))
        .transpose()?;
    Ok(EvaluationReport {
        setting: input.setting,
        num_samples: n,
        class_names: input.class_names.to_vec(),
        detection,
        recognition,
        roc,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `threshold<TAB>fpr<TAB>tpr` lines under a header.
    pub fn roc_tsv(&self) -> String {
        let mut out = String::from("threshold\tfpr\ttpr\n");
        for p in &self.roc {
            let _ = writeln!(out, "{}\t{}\t{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }

    /// Writes `report.json` and, when available, `roc.tsv` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), self.to_json() + "\n")?;
        if !self.roc.is_empty() {
            std::fs::write(dir.join("roc.tsv"), self.roc_tsv())?;
        }
        Ok(())
    }

    pub fn macro_f1(&self) -> Option<f64> {
        self.recognition.as_ref().map(|r| r.macro_f1)
    }

    pub fn auc(&self) -> Option<f64> {
        self.detection.as_ref().and_then(|d| d.auc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_detector() {
        let labels = [0, 1, 1, 0];
        let scores = [0.1, 0.9, 0.8, 0.3];
        let r = report(ReportInput {
            setting: Setting::IDet,
            class_names: &names(2),
            normal_class: Some(0),
            predictions: &[0, 1, 1, 0],
            scores: Some(&scores),
            labels: &labels,
        })
        .unwrap();
        let d = r.detection.as_ref().unwrap();
        assert_eq!(d.auc, Some(1.0));
        assert_eq!(d.f1, 1.0);
        assert_eq!(d.precision_at_recall_95, Some(1.0));
        assert!(r.recognition.is_none());
        assert!(r.roc_tsv().starts_with("threshold\tfpr\ttpr\ninf\t0\t0\n"));
    }

    #[test]
    fn perfect_recognizer() {
        let labels: Vec<usize> = (0..16).map(|i| i % 8).collect();
        let r = report(ReportInput {
            setting: Setting::IIRecI,
            class_names: &names(8),
            normal_class: None,
            predictions: &labels,
            scores: None,
            labels: &labels,
        })
        .unwrap();
        assert_eq!(r.macro_f1(), Some(1.0));
        assert_eq!(r.recognition.as_ref().unwrap().top1, 1.0);
        assert!(r.detection.is_none());
    }

    #[test]
    fn recognizer_with_normal_class_gets_detection_view() {
        let r = report(ReportInput {
            setting: Setting::IRec,
            class_names: &names(3),
            normal_class: Some(0),
            predictions: &[0, 2, 1],
            scores: Some(&[0.2, 0.7, 0.6]),
            labels: &[0, 1, 1],
        })
        .unwrap();
        assert_eq!(r.auc(), Some(1.0));
        assert!((r.macro_f1().unwrap() - (1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn json_keys_are_stable() {
        let r = report(ReportInput {
            setting: Setting::IDet,
            class_names: &names(2),
            normal_class: Some(0),
            predictions: &[1],
            scores: Some(&[0.7]),
            labels: &[1],
        })
        .unwrap();
        let json = r.to_json();
        assert!(json.find("\"setting\"").unwrap() < json.find("\"detection\"").unwrap());
        assert!(json.contains("\"auc\": null"));
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.detection, r.detection);
    }
}

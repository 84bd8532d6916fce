//! Confidence-threshold triage: keep images whose distressed score reaches a
//! threshold for review and drop the rest.

use crate::dataset::CorpusManifest;
use crate::metrics::ConfusionCounts;
use crate::model::PatchClassifier;
use crate::train::predict_paths;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct TriageOutcome {
    /// Entries with score `>= threshold`.
    pub kept: CorpusManifest,
    /// Entries with score `< threshold`.
    pub dropped: CorpusManifest,
    /// Per-entry distressed scores in manifest order.
    pub scores: Vec<f64>,
    /// Kept-as-positive counts against ground truth, when the manifest has a
    /// normal class.
    pub counts: Option<ConfusionCounts>,
}

impl TriageOutcome {
    /// Share of distressed images that were kept.
    pub fn recall(&self) -> Option<f64> {
        self.counts.map(|c| c.recall())
    }

    /// Share of kept images that are distressed.
    pub fn precision(&self) -> Option<f64> {
        self.counts.map(|c| c.precision())
    }
}

/// Splits `manifest` by precomputed scores. Entry order is preserved in both
/// halves.
pub fn split_by_score(manifest: &CorpusManifest, scores: &[f64], threshold: f64) -> Result<TriageOutcome> {
    if scores.len() != manifest.entries.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} manifest entries",
            scores.len(),
            manifest.entries.len()
        )));
    }
    let (mut kept, mut dropped) = (Vec::new(), Vec::new());
    for (e, &s) in manifest.entries.iter().zip(scores) {
        if s >= threshold {
            kept.push(e.clone());
        } else {
            dropped.push(e.clone());
        }
    }
    let counts = manifest.normal_class().map(|n| {
        let normal = &manifest.classes[n];
        let pairs: Vec<(bool, bool)> = manifest
            .entries
            .iter()
            .zip(scores)
            .map(|(e, &s)| (s >= threshold, &e.class != normal))
            .collect();
        ConfusionCounts::from_pairs(pairs)
    });
    Ok(TriageOutcome {
        kept: manifest.with_entries(kept),
        dropped: manifest.with_entries(dropped),
        scores: scores.to_vec(),
        counts,
    })
}

/// Scores every entry of `manifest` with a model that has a normal class and
/// splits at `threshold`.
pub fn triage(model: &mut PatchClassifier, manifest: &CorpusManifest, threshold: f64) -> Result<TriageOutcome> {
    let normal = model.config.normal_class.ok_or_else(|| {
        Error::Checkpoint(format!(
            "triage needs a model with a normal class, got a {} model",
            model.config.setting
        ))
    })?;
    let paths: Vec<_> = manifest.entries.iter().map(|e| manifest.resolve(e)).collect();
    let predictions = predict_paths(model, &paths)?;
    let scores = predictions.scores(Some(normal)).expect("normal class is set");
    split_by_score(manifest, &scores, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ManifestEntry;
    use crate::metrics::threshold_at_recall;
    use crate::metrics::ScoredSample;
    use crate::patches::Split;
    use proptest::prelude::*;

    fn manifest(classes: &[usize]) -> CorpusManifest {
        let entries = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| ManifestEntry {
                path: format!("img_{i}.png"),
                class: ["normal", "crack"][c].to_string(),
                split: Split::Test,
            })
            .collect();
        CorpusManifest::new("/data", 0, vec!["normal".into(), "crack".into()], entries).unwrap()
    }

    #[test]
    fn extreme_thresholds() {
        let m = manifest(&[0, 1, 1, 0]);
        let scores = [0.0, 1.0, 0.4, 0.9];
        let all = split_by_score(&m, &scores, 0.0).unwrap();
        assert_eq!(all.kept.entries, m.entries);
        assert!(all.dropped.entries.is_empty());
        let none = split_by_score(&m, &scores, 1.0 + 1e-9).unwrap();
        assert!(none.kept.entries.is_empty());
        assert_eq!(none.recall(), Some(0.0));
        assert_eq!(none.precision(), Some(0.0));
    }

    #[test]
    fn counts_on_kept_set() {
        let m = manifest(&[0, 1, 1, 0]);
        let t = split_by_score(&m, &[0.1, 0.8, 0.4, 0.9], 0.5).unwrap();
        assert_eq!(t.recall(), Some(0.5));
        assert_eq!(t.precision(), Some(0.5));
    }

    #[test]
    fn recall_threshold_keeps_target_recall() {
        let classes: Vec<usize> = (0..40).map(|i| usize::from(i % 3 != 0)).collect();
        let scores: Vec<f64> = (0..40).map(|i| ((i * 37) % 41) as f64 / 41.0).collect();
        let samples: Vec<ScoredSample> = scores
            .iter()
            .zip(&classes)
            .map(|(&s, &c)| ScoredSample::new(s, c == 1))
            .collect();
        let t = threshold_at_recall(&samples, 0.95).unwrap();
        let out = split_by_score(&manifest(&classes), &scores, t).unwrap();
        assert!(out.recall().unwrap() >= 0.95);
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(split_by_score(&manifest(&[0, 1]), &[0.5], 0.5), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn kept_and_dropped_partition_the_manifest(
            rows in prop::collection::vec((0usize..2, 0.0f64..1.0), 1..40),
            threshold in 0.0f64..1.0,
        ) {
            let classes: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let m = manifest(&classes);
            let t = split_by_score(&m, &scores, threshold).unwrap();
            prop_assert_eq!(t.kept.entries.len() + t.dropped.entries.len(), m.entries.len());
            let mut merged: Vec<&ManifestEntry> = t.kept.entries.iter().chain(&t.dropped.entries).collect();
            merged.sort_by(|a, b| a.path.cmp(&b.path));
            let mut original: Vec<&ManifestEntry> = m.entries.iter().collect();
            original.sort_by(|a, b| a.path.cmp(&b.path));
            prop_assert_eq!(merged, original);
        }
    }
}

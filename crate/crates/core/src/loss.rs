//! Cross-entropy classification loss, confidence sparsity penalty and their
//! weighted sum, with gradients for backpropagation.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ConfidenceMatrix;

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: f64,
    pub sparsity: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn new(classification: f64, sparsity: f64, lambda: f64) -> Self {
        Self {
            classification,
            sparsity,
            total: classification + lambda * sparsity,
            lambda,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.classification.is_finite() && self.sparsity.is_finite() && self.total.is_finite()
    }
}

/// Category index of every one-hot row.
pub fn decode_one_hot(labels: ArrayView2<f64>) -> Result<Vec<usize>> {
    labels
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::Label(format!("label row {i} is not one-hot")));
            }
            Ok(row.iter().position(|&v| v == 1.0).expect("one entry is set"))
        })
        .collect()
}

fn check_batch(predictions: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<Vec<usize>> {
    if predictions.dim() != labels.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} and labels {:?} differ in shape",
            predictions.dim(),
            labels.dim()
        )));
    }
    if predictions.nrows() == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    decode_one_hot(labels)
}

/// Mean negative log-likelihood of the labeled category.
pub fn classification_loss(predictions: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<f64> {
    let classes = check_batch(predictions, labels)?;
    let n = classes.len() as f64;
    Ok(-classes
        .iter()
        .zip(predictions.rows())
        .map(|(&c, row)| row[c].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / n)
}

/// Gradient of [`classification_loss`] with respect to the predictions.
pub fn classification_grad(predictions: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<Array2<f64>> {
    let classes = check_batch(predictions, labels)?;
    let n = classes.len() as f64;
    let mut g = Array2::zeros(predictions.dim());
    for (i, &c) in classes.iter().enumerate() {
        let p = predictions[[i, c]];
        // The floor is a constant below its threshold.
        if p > PROB_FLOOR {
            g[[i, c]] = -1.0 / (n * p);
        }
    }
    Ok(g)
}

fn check_confidences(confidences: ArrayView2<f64>, patches: usize, classes: &[usize]) -> Result<()> {
    if patches == 0 || confidences.nrows() != patches * classes.len() {
        return Err(Error::Shape(format!(
            "{} confidence rows for {} samples of {patches} patches",
            confidences.nrows(),
            classes.len()
        )));
    }
    Ok(())
}

/// Entrywise absolute sum of the stacked `[B*m, C]` confidences over
/// samples not labeled `normal_class`.
pub fn sparsity_loss_stacked(
    confidences: ArrayView2<f64>,
    patches: usize,
    labels: ArrayView2<f64>,
    normal_class: Option<usize>,
) -> Result<f64> {
    let classes = decode_one_hot(labels)?;
    check_confidences(confidences, patches, &classes)?;
    Ok(confidences
        .axis_chunks_iter(Axis(0), patches)
        .zip(&classes)
        .filter(|(_, &c)| Some(c) != normal_class)
        .map(|(s, _)| s.iter().map(|v| v.abs()).sum::<f64>())
        .sum())
}

/// Gradient of [`sparsity_loss_stacked`]: the sign of each distressed entry,
/// zero on normal samples.
pub fn sparsity_grad_stacked(
    confidences: ArrayView2<f64>,
    patches: usize,
    labels: ArrayView2<f64>,
    normal_class: Option<usize>,
) -> Result<Array2<f64>> {
    let classes = decode_one_hot(labels)?;
    check_confidences(confidences, patches, &classes)?;
    let mut g = Array2::zeros(confidences.dim());
    for ((mut gs, s), &c) in g
        .axis_chunks_iter_mut(Axis(0), patches)
        .zip(confidences.axis_chunks_iter(Axis(0), patches))
        .zip(&classes)
    {
        if Some(c) != normal_class {
            gs.zip_mut_with(&s, |d, &v| *d = v.signum() * (v != 0.0) as u8 as f64);
        }
    }
    Ok(g)
}

/// [`sparsity_loss_stacked`] over separate confidence matrices.
pub fn sparsity_loss(
    confidences: &[ConfidenceMatrix],
    labels: ArrayView2<f64>,
    normal_class: Option<usize>,
) -> Result<f64> {
    let classes = decode_one_hot(labels)?;
    if confidences.len() != classes.len() {
        return Err(Error::Shape(format!(
            "{} confidence matrices for {} labels",
            confidences.len(),
            classes.len()
        )));
    }
    Ok(confidences
        .iter()
        .zip(&classes)
        .filter(|(_, &c)| Some(c) != normal_class)
        .map(|(s, _)| s.l1())
        .sum())
}

/// Weighted objective and its gradients for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub lambda: f64,
    pub normal_class: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ObjectiveOutput {
    pub loss: LossBreakdown,
    /// Gradient with respect to the `[B, C]` probabilities.
    pub grad_probs: Array2<f64>,
    /// Gradient with respect to the `[B*m, C]` confidences.
    pub grad_confidences: Array2<f64>,
}

impl Objective {
    pub fn new(lambda: f64, normal_class: Option<usize>) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self { lambda, normal_class })
    }

    pub fn total_loss(
        &self,
        predictions: ArrayView2<f64>,
        labels: ArrayView2<f64>,
        confidences: ArrayView2<f64>,
        patches: usize,
    ) -> Result<LossBreakdown> {
        let lc = classification_loss(predictions, labels)?;
        let ls = sparsity_loss_stacked(confidences, patches, labels, self.normal_class)?;
        Ok(LossBreakdown::new(lc, ls, self.lambda))
    }

    pub fn evaluate(
        &self,
        predictions: ArrayView2<f64>,
        labels: ArrayView2<f64>,
        confidences: ArrayView2<f64>,
        patches: usize,
    ) -> Result<ObjectiveOutput> {
        let loss = self.total_loss(predictions, labels, confidences, patches)?;
        let grad_probs = classification_grad(predictions, labels)?;
        let mut grad_confidences = sparsity_grad_stacked(confidences, patches, labels, self.normal_class)?;
        grad_confidences.mapv_inplace(|g| g * self.lambda);
        Ok(ObjectiveOutput {
            loss,
            grad_probs,
            grad_confidences,
        })
    }
}

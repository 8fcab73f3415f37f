//! Cross-entropy and reconstruction losses with their analytic gradients.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Scalar;

/// Which pixels the reconstruction loss averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossPixels {
    /// Mean over every pixel of the image.
    #[default]
    All,
    /// Mean over the pixels of masked patches only.
    MaskedOnly,
}

/// Cross-entropy of softmax(logits) against `label`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn ce_loss<F: Scalar>(logits: &Array1<F>, label: usize) -> Result<(F, Array1<F>)> {
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "label {label} outside the {}-class logit vector",
            logits.len()
        )));
    }
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.iter().cloned().fold(F::zero(), |a, b| a + b);
    let loss = sum.ln() + max - logits[label];
    let mut d_logits = exps.mapv(|v| v / sum);
    d_logits[label] = d_logits[label] - F::one();
    Ok((loss, d_logits))
}

/// Mean-squared error between predicted and target per-patch pixels.
/// `masked` gives the patch rows to include for [`LossPixels::MaskedOnly`].
/// Returns the loss and its gradient w.r.t. the prediction.
pub fn mse_loss<F: Scalar>(
    predicted: &Array2<F>,
    target: &Array2<F>,
    pixels: LossPixels,
    masked: &[usize],
) -> Result<(F, Array2<F>)> {
    if predicted.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "predicted patches {:?} vs target {:?}",
            predicted.dim(),
            target.dim()
        )));
    }
    let rows: Vec<usize> = match pixels {
        LossPixels::All => (0..predicted.nrows()).collect(),
        LossPixels::MaskedOnly => masked.to_vec(),
    };
    let count = rows.len() * predicted.ncols();
    if count == 0 {
        return Err(Error::Usage("reconstruction loss over zero pixels".into()));
    }
    let inv = F::of(1.0 / count as f64);
    let two = F::of(2.0);
    let mut loss = F::zero();
    let mut d_pred = Array2::zeros(predicted.raw_dim());
    for &r in &rows {
        for c in 0..predicted.ncols() {
            let diff = predicted[[r, c]] - target[[r, c]];
            loss = loss + diff * diff * inv;
            d_pred[[r, c]] = two * diff * inv;
        }
    }
    Ok((loss, d_pred))
}

//! Attack objective: squared L2 distance plus a λ-weighted hinge on the
//! face-over-background margin of every proposal.
//!
//! The hinge is `max(Z_face - Z_background, 0)`: it is positive exactly
//! while a proposal still prefers the face class, and zero once background
//! dominates, which is the state the attack is trying to reach.

use crate::data::ImageTensor;
use crate::detector::{ScoreMatrix, BACKGROUND, FACE};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l2_term: f64,
    pub misclassify_term: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `‖x − x′‖₂²`.
///
/// # Panics
/// If the shapes differ.
pub fn l2_loss(x: &ImageTensor, x_prime: &ImageTensor) -> f64 {
    assert_eq!(x.shape(), x_prime.shape(), "l2_loss needs equal shapes");
    x.values()
        .iter()
        .zip(x_prime.values())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Face-minus-background margin of one row.
pub fn margin(row: &[f64; 2]) -> f64 {
    row[FACE] - row[BACKGROUND]
}

/// `Σᵢ max(Z_face,i − Z_bg,i, 0)` over all rows.
pub fn misclassify_loss(z: &ScoreMatrix) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::NonFiniteLogits);
    }
    Ok(z.logits.iter().map(|r| margin(r).max(0.0)).sum())
}

/// Same as [`misclassify_loss`] restricted to the given rows.
pub fn misclassify_loss_rows(z: &ScoreMatrix, rows: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for &i in rows {
        let r = &z.logits[i];
        if !r[0].is_finite() || !r[1].is_finite() {
            return Err(Error::NonFiniteLogits);
        }
        sum += margin(r).max(0.0);
    }
    Ok(sum)
}

/// Subgradient of the restricted hinge w.r.t. the logits, scaled by `weight`.
/// Rows outside `rows`, or with non-positive margin, get zero.
pub fn misclassify_logit_grad(z: &ScoreMatrix, rows: &[usize], weight: f64) -> Vec<[f64; 2]> {
    let mut grad = vec![[0.0; 2]; z.rows()];
    for &i in rows {
        if margin(&z.logits[i]) > 0.0 {
            grad[i][FACE] = weight;
            grad[i][BACKGROUND] = -weight;
        }
    }
    grad
}

/// Gradient of [`l2_loss`] w.r.t. `x_prime`.
pub fn l2_grad(x: &ImageTensor, x_prime: &ImageTensor) -> Vec<f64> {
    x.values()
        .iter()
        .zip(x_prime.values())
        .map(|(a, b)| 2.0 * (b - a))
        .collect()
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    Ok(())
}

/// `l2 + λ · misclassify` with every row of `z` contributing.
pub fn total_loss(x: &ImageTensor, x_prime: &ImageTensor, z: &ScoreMatrix, lambda: f64) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let l2_term = l2_loss(x, x_prime);
    let misclassify_term = misclassify_loss(z)?;
    Ok(LossBreakdown {
        l2_term,
        misclassify_term,
        lambda,
        total: l2_term + lambda * misclassify_term,
    })
}

/// [`total_loss`] with only `rows` contributing to the hinge term.
pub fn total_loss_rows(
    x: &ImageTensor,
    x_prime: &ImageTensor,
    z: &ScoreMatrix,
    rows: &[usize],
    lambda: f64,
) -> Result<LossBreakdown> {
    check_lambda(lambda)?;
    let l2_term = l2_loss(x, x_prime);
    let misclassify_term = misclassify_loss_rows(z, rows)?;
    Ok(LossBreakdown {
        l2_term,
        misclassify_term,
        lambda,
        total: l2_term + lambda * misclassify_term,
    })
}

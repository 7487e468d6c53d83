//! Directional KL consistency between expert distributions.

use super::LossValue;
use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Matrix};

/// Probabilities are clamped to this before taking logs.
pub const KL_EPS: f64 = 1e-12;
/// Allowed deviation of a row sum from 1.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// KL value with gradients for both arguments.
#[derive(Clone, Debug)]
pub struct KlValue {
    pub value: f64,
    pub grad_ref: Matrix,
    pub grad_other: Matrix,
}

fn check_simplex(p: &Matrix) -> Result<()> {
    for r in 0..p.rows() {
        let row = p.row(r);
        let sum: f64 = row.iter().sum();
        if !sum.is_finite() || (sum - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&v| v < -SIMPLEX_TOL) {
            return Err(Error::NotSimplex { row: r, sum });
        }
    }
    Ok(())
}

/// `Σ_b KL(p_ref_b ‖ p_other_b)` with both arguments clamped below at [`KL_EPS`].
pub fn kl_consistency(p_ref: &Matrix, p_other: &Matrix) -> Result<KlValue> {
    if p_ref.shape() != p_other.shape() {
        return Err(Error::shape(
            "kl_consistency",
            format!("{:?}", p_ref.shape()),
            format!("{:?}", p_other.shape()),
        ));
    }
    check_simplex(p_ref)?;
    check_simplex(p_other)?;
    let mut value = 0.0;
    let mut grad_ref = Matrix::zeros(p_ref.rows(), p_ref.cols());
    let mut grad_other = grad_ref.clone();
    for (k, (&p, &q)) in p_ref.as_slice().iter().zip(p_other.as_slice()).enumerate() {
        let lp = p.max(KL_EPS).ln();
        let lq = q.max(KL_EPS).ln();
        value += p * (lp - lq);
        grad_ref.as_mut_slice()[k] = lp - lq + if p > KL_EPS { 1.0 } else { 0.0 };
        grad_other.as_mut_slice()[k] = if q > KL_EPS { -p / q } else { 0.0 };
    }
    Ok(KlValue {
        value,
        grad_ref,
        grad_other,
    })
}

/// KL between the softmax distributions of two logit matrices, with
/// gradients with respect to the logits.
pub fn kl_consistency_logits(z_ref: &Matrix, z_other: &Matrix) -> Result<(f64, LossValue, LossValue)> {
    let p = softmax_rows(z_ref);
    let q = softmax_rows(z_other);
    let kl = kl_consistency(&p, &q)?;
    let back = |probs: &Matrix, dp: &Matrix| {
        let mut dz = Matrix::zeros(probs.rows(), probs.cols());
        for r in 0..probs.rows() {
            let pr = probs.row(r);
            let gr = dp.row(r);
            let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for (c, o) in dz.row_mut(r).iter_mut().enumerate() {
                *o = pr[c] * (gr[c] - inner);
            }
        }
        dz
    };
    let gr = back(&p, &kl.grad_ref);
    let go = back(&q, &kl.grad_other);
    Ok((
        kl.value,
        LossValue { value: kl.value, grad: gr },
        LossValue { value: kl.value, grad: go },
    ))
}

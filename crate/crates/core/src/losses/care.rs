//! Distillation targets for the CARE encoder and the concordance regression loss.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Per-utterance teacher targets: a sentence embedding and frame-level acoustic features.
#[derive(Clone, Debug, PartialEq)]
pub struct CareTargets {
    pub semantic: Vec<f64>,
    /// `T x D_a`.
    pub acoustic: Matrix,
}

#[derive(Clone, Debug)]
pub struct CareLoss {
    pub semantic: f64,
    pub acoustic: f64,
    pub total: f64,
    /// Gradient of `total` w.r.t. the semantic predictions.
    pub grad_semantic: Matrix,
    /// Gradient of `total` w.r.t. each utterance's acoustic predictions.
    pub grad_acoustic: Vec<Matrix>,
}

/// `L_sem = (1/B) Σ ‖y − ŷ‖²`, `L_acoust = (1/(B·T)) Σ Σ ‖y_t − ŷ_t‖²`,
/// `L_tot = L_sem + λ L_acoust`.
pub fn care_distillation_loss(
    semantic_pred: &Matrix,
    acoustic_pred: &[Matrix],
    targets: &[CareTargets],
    lambda: f64,
) -> Result<CareLoss> {
    let b = semantic_pred.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("empty distillation batch".into()));
    }
    if targets.len() != b || acoustic_pred.len() != b {
        return Err(Error::shape(
            "care_distillation_loss batch",
            b,
            format!("{} targets, {} acoustic predictions", targets.len(), acoustic_pred.len()),
        ));
    }
    let frames = targets[0].acoustic.rows();
    let mut grad_semantic = Matrix::zeros(b, semantic_pred.cols());
    let mut grad_acoustic = Vec::with_capacity(b);
    let mut sem = 0.0;
    let mut ac = 0.0;
    for (i, (t, ap)) in targets.iter().zip(acoustic_pred).enumerate() {
        if t.semantic.len() != semantic_pred.cols() {
            return Err(Error::shape("semantic target width", semantic_pred.cols(), t.semantic.len()));
        }
        if ap.shape() != t.acoustic.shape() || t.acoustic.rows() != frames {
            return Err(Error::shape(
                "acoustic prediction",
                format!("{:?}", t.acoustic.shape()),
                format!("{:?}", ap.shape()),
            ));
        }
        for ((g, p), y) in grad_semantic.row_mut(i).iter_mut().zip(semantic_pred.row(i)).zip(&t.semantic) {
            let d = p - y;
            sem += d * d;
            *g = 2.0 * d / b as f64;
        }
        let diff = ap.zip_map(&t.acoustic, |p, y| p - y);
        ac += diff.norm_sq();
        grad_acoustic.push(diff);
    }
    let bt = (b * frames) as f64;
    let sem = sem / b as f64;
    let ac = if frames == 0 { 0.0 } else { ac / bt };
    for g in &mut grad_acoustic {
        *g = g.scale(if frames == 0 { 0.0 } else { 2.0 * lambda / bt });
    }
    Ok(CareLoss {
        semantic: sem,
        acoustic: ac,
        total: sem + lambda * ac,
        grad_semantic,
        grad_acoustic,
    })
}

/// `K − Σ_k CCC(gold[:, k], pred[:, k])` and its gradient w.r.t. `pred`.
pub fn ccc_loss(pred: &Matrix, gold: &Matrix) -> Result<super::LossValue> {
    if pred.shape() != gold.shape() {
        return Err(Error::shape(
            "ccc_loss",
            format!("{:?}", gold.shape()),
            format!("{:?}", pred.shape()),
        ));
    }
    let (n, k) = pred.shape();
    if n < 2 {
        return Err(Error::InvalidArgument("CCC needs at least 2 samples".into()));
    }
    let nf = n as f64;
    let mut grad = Matrix::zeros(n, k);
    let mut total = k as f64;
    for c in 0..k {
        let p: Vec<f64> = (0..n).map(|r| pred[(r, c)]).collect();
        let g: Vec<f64> = (0..n).map(|r| gold[(r, c)]).collect();
        let mp = p.iter().sum::<f64>() / nf;
        let mg = g.iter().sum::<f64>() / nf;
        let vp = p.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / nf;
        let vg = g.iter().map(|x| (x - mg).powi(2)).sum::<f64>() / nf;
        let cov = p.iter().zip(&g).map(|(x, y)| (x - mp) * (y - mg)).sum::<f64>() / nf;
        let num = 2.0 * cov;
        let den = vp + vg + (mp - mg).powi(2);
        if den == 0.0 {
            continue;
        }
        total -= num / den;
        for r in 0..n {
            let dnum = 2.0 * (g[r] - mg) / nf;
            let dden = 2.0 * (p[r] - mp) / nf + 2.0 * (mp - mg) / nf;
            grad[(r, c)] = -(dnum * den - num * dden) / (den * den);
        }
    }
    Ok(super::LossValue { value: total, grad })
}

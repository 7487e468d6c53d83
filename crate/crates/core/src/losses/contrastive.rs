//! Supervised contrastive loss over L2-normalised embeddings.

use serde::{Deserialize, Serialize};

use super::LossValue;
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Rows with a smaller norm are divided by this instead.
const NORM_FLOOR: f64 = 1e-12;

/// Which samples the softmax denominator runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupConVariant {
    /// All other samples, `q ≠ a`.
    ExcludeAnchor,
    /// Every sample in the batch, the anchor included.
    IncludeAnchor,
}

/// `Σ_a −1/|P(a)| Σ_{p∈P(a)} log(exp(z_a·z_p/τ) / Σ_{q∈A(a)} exp(z_a·z_q/τ))`.
///
/// `P(a)` holds the other samples sharing `a`'s label; anchors without any are
/// skipped. The gradient is with respect to the un-normalised `embeddings`.
pub fn supcon_loss(
    embeddings: &Matrix,
    labels: &[usize],
    tau: f64,
    variant: SupConVariant,
) -> Result<LossValue> {
    let (b, d) = embeddings.shape();
    if labels.len() != b {
        return Err(Error::shape("supcon labels", b, labels.len()));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("supcon needs at least 2 samples, got {b}")));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidArgument(format!("supcon temperature must be > 0, got {tau}")));
    }
    if !embeddings.all_finite() {
        return Err(Error::InvalidArgument("non-finite embeddings".into()));
    }

    let norms: Vec<f64> = (0..b)
        .map(|i| dot(embeddings.row(i), embeddings.row(i)).sqrt().max(NORM_FLOOR))
        .collect();
    let mut z = embeddings.clone();
    for (i, n) in norms.iter().enumerate() {
        z.row_mut(i).iter_mut().for_each(|v| *v /= n);
    }
    let sim = z.matmul_nt(&z).scale(1.0 / tau);
    let include_self = variant == SupConVariant::IncludeAnchor;

    // dL/dsim, then chain through sim = z zᵀ / τ and the normalisation
    let mut dsim = Matrix::zeros(b, b);
    let mut total = 0.0;
    let mut any_anchor = false;
    for a in 0..b {
        let positives: Vec<usize> = (0..b).filter(|&p| p != a && labels[p] == labels[a]).collect();
        if positives.is_empty() {
            continue;
        }
        any_anchor = true;
        let members = |q: &usize| include_self || *q != a;
        let max = (0..b).filter(members).map(|q| sim[(a, q)]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..b).filter(members).map(|q| (sim[(a, q)] - max).exp()).sum();
        let lse = max + denom.ln();
        let np = positives.len() as f64;
        for &p in &positives {
            total += -(sim[(a, p)] - lse) / np;
            dsim[(a, p)] -= 1.0 / np;
        }
        for q in (0..b).filter(members) {
            dsim[(a, q)] += (sim[(a, q)] - lse).exp();
        }
    }
    if !any_anchor {
        return Err(Error::NoPositives);
    }

    let sym = dsim.zip_map(&dsim.transpose(), |x, y| (x + y) / tau);
    let dz = sym.matmul(&z);
    let mut grad = Matrix::zeros(b, d);
    for i in 0..b {
        let zi = z.row(i);
        let dzi = dz.row(i);
        let proj = dot(zi, dzi);
        let clamped = norms[i] == NORM_FLOOR;
        for (k, g) in grad.row_mut(i).iter_mut().enumerate() {
            *g = if clamped {
                dzi[k] / norms[i]
            } else {
                (dzi[k] - zi[k] * proj) / norms[i]
            };
        }
    }
    Ok(LossValue { value: total, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct double loop over anchors and positives.
    fn oracle(e: &Matrix, labels: &[usize], tau: f64, include_self: bool) -> f64 {
        let b = e.rows();
        let unit: Vec<Vec<f64>> = (0..b)
            .map(|i| {
                let n = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                e.row(i).iter().map(|v| v / n).collect()
            })
            .collect();
        let s = |i: usize, j: usize| unit[i].iter().zip(&unit[j]).map(|(x, y)| x * y).sum::<f64>() / tau;
        let mut total = 0.0;
        for a in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != a && labels[p] == labels[a]).collect();
            if pos.is_empty() {
                continue;
            }
            let mut denom = 0.0;
            for q in 0..b {
                if q != a || include_self {
                    denom += s(a, q).exp();
                }
            }
            let mut inner = 0.0;
            for &p in &pos {
                inner += (s(a, p).exp() / denom).ln();
            }
            total += -inner / pos.len() as f64;
        }
        total
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>) {
        let b = rng.gen_range(2..7);
        let d = rng.gen_range(2..5);
        let e = Matrix::from_vec(b, d, (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect());
        // force at least one positive pair
        let mut labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        labels[1] = labels[0];
        (e, labels)
    }

    #[test]
    fn two_same_class_samples_cancel() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.3, 0.8]]);
        let l = supcon_loss(&e, &[4, 4], 1.0, SupConVariant::ExcludeAnchor).unwrap();
        assert!(l.value.abs() < 1e-15);
    }

    #[test]
    fn three_sample_hand_value() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = supcon_loss(&e, &[0, 0, 1], 1.0, SupConVariant::ExcludeAnchor).unwrap();
        let per_anchor = (1.0 + (-1.0f64).exp()).ln();
        assert!((l.value - 2.0 * per_anchor).abs() < 1e-12);
        assert!((l.value - 0.626523).abs() < 1e-6);
        assert!((l.value - oracle(&e, &[0, 0, 1], 1.0, false)).abs() < 1e-12);
    }

    #[test]
    fn identical_vectors_give_b_log_b_minus_one() {
        let e = Matrix::from_rows(&vec![vec![0.6, 0.8]; 3]);
        let l = supcon_loss(&e, &[2, 2, 2], 1.0, SupConVariant::ExcludeAnchor).unwrap();
        assert!((l.value - 3.0 * 2.0f64.ln()).abs() < 1e-12);
        assert!((l.value - 2.079442).abs() < 1e-6);
        assert!((oracle(&e, &[2, 2, 2], 1.0, false) - l.value).abs() < 1e-12);
    }

    #[test]
    fn no_positives_is_reported() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        for v in [SupConVariant::ExcludeAnchor, SupConVariant::IncludeAnchor] {
            assert!(matches!(supcon_loss(&e, &[0, 1], 1.0, v), Err(Error::NoPositives)));
        }
        assert!(supcon_loss(&Matrix::row_vector(&[1.0]), &[0], 1.0, SupConVariant::ExcludeAnchor).is_err());
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let (e, labels) = random_case(&mut rng);
            let tau = rng.gen_range(0.05..2.0);
            for (v, inc) in [(SupConVariant::ExcludeAnchor, false), (SupConVariant::IncludeAnchor, true)] {
                let got = supcon_loss(&e, &labels, tau, v).unwrap().value;
                let want = oracle(&e, &labels, tau, inc);
                assert!((got - want).abs() < 1e-9 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let (e, labels) = random_case(&mut rng);
            let tau = rng.gen_range(0.2..2.0);
            for v in [SupConVariant::ExcludeAnchor, SupConVariant::IncludeAnchor] {
                let analytic = supcon_loss(&e, &labels, tau, v).unwrap().grad;
                let numeric = central_difference(e.as_slice(), 1e-5, |x| {
                    let m = Matrix::from_vec(e.rows(), e.cols(), x.to_vec());
                    supcon_loss(&m, &labels, tau, v).unwrap().value
                });
                let err = max_relative_error(analytic.as_slice(), &numeric);
                assert!(err <= 1e-4, "{v:?}: {err}");
            }
        }
    }

    #[test]
    fn scaling_an_embedding_changes_nothing() {
        let e = Matrix::from_rows(&[vec![1.0, 2.0], vec![-0.5, 1.0], vec![2.0, 0.1]]);
        let mut scaled = e.clone();
        scaled.row_mut(1).iter_mut().for_each(|v| *v *= 7.5);
        let a = supcon_loss(&e, &[0, 0, 1], 0.5, SupConVariant::IncludeAnchor).unwrap().value;
        let b = supcon_loss(&scaled, &[0, 0, 1], 0.5, SupConVariant::IncludeAnchor).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }
}

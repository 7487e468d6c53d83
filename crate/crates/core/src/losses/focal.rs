//! Focal family (CE, weighted CE, focal, weighted focal) and the vector-scaling loss.

use super::{check_targets, ClassWeights, LossValue};
use crate::error::{Error, Result};
use crate::tensor::{log_softmax, softmax, Matrix};

/// `(1/B) Σ_i −w[y_i] (1 − p_{i,y_i})^γ log p_{i,y_i}` with `p = softmax(logits)`.
///
/// `γ = 0` is weighted cross-entropy; unit weights give plain CE or focal loss.
pub fn focal_loss(
    logits: &Matrix,
    targets: &[usize],
    gamma: f64,
    weights: &ClassWeights,
) -> Result<LossValue> {
    check_targets(logits, targets)?;
    check_weights(logits, weights)?;
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::InvalidArgument(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let z = logits.row(i);
        let logp = log_softmax(z);
        let p = softmax(z);
        let w = weights.as_slice()[y];
        // 1 − p_y summed from the other classes keeps precision when p_y ≈ 1
        let q: f64 = p.iter().enumerate().filter(|&(c, _)| c != y).map(|(_, v)| v).sum();
        let lp = logp[y];
        let modulator = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
        total += -w * modulator * lp;
        // dl/dz_j = −w [(1−p)^γ − γ (1−p)^{γ−1} p log p] (δ_jy − p_j)
        let focus = if gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            gamma * q.powf(gamma - 1.0) * p[y] * lp
        };
        let coef = -w * (modulator - focus) / b;
        for (j, gj) in grad.row_mut(i).iter_mut().enumerate() {
            let delta = if j == y { 1.0 } else { 0.0 };
            *gj = coef * (delta - p[j]);
        }
    }
    Ok(LossValue {
        value: total / b,
        grad,
    })
}

pub fn weighted_cross_entropy(
    logits: &Matrix,
    targets: &[usize],
    weights: &ClassWeights,
) -> Result<LossValue> {
    focal_loss(logits, targets, 0.0, weights)
}

/// Vector-scaling loss: weighted CE on `ẑ_c = (N_c/N_max)^γ z_c + τ log(N_c/N)`.
pub fn vs_loss(
    logits: &Matrix,
    targets: &[usize],
    counts: &[usize],
    gamma_vs: f64,
    tau_vs: f64,
    weights: &ClassWeights,
) -> Result<LossValue> {
    check_targets(logits, targets)?;
    check_weights(logits, weights)?;
    if counts.len() != logits.cols() {
        return Err(Error::shape("vs_loss class counts", logits.cols(), counts.len()));
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(Error::ZeroClassCount { class });
    }
    let n: f64 = counts.iter().map(|&c| c as f64).sum();
    let n_max = *counts.iter().max().expect("non-empty") as f64;
    let scale: Vec<f64> = counts
        .iter()
        .map(|&c| (c as f64 / n_max).powf(gamma_vs))
        .collect();
    let shift: Vec<f64> = counts.iter().map(|&c| tau_vs * (c as f64 / n).ln()).collect();

    let b = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, &y) in targets.iter().enumerate() {
        let adjusted: Vec<f64> = logits
            .row(i)
            .iter()
            .enumerate()
            .map(|(c, z)| scale[c] * z + shift[c])
            .collect();
        let logp = log_softmax(&adjusted);
        let p = softmax(&adjusted);
        let w = weights.as_slice()[y];
        total += -w * logp[y];
        for (c, gc) in grad.row_mut(i).iter_mut().enumerate() {
            let delta = if c == y { 1.0 } else { 0.0 };
            *gc = w * (p[c] - delta) * scale[c] / b;
        }
    }
    Ok(LossValue {
        value: total / b,
        grad,
    })
}

fn check_weights(logits: &Matrix, weights: &ClassWeights) -> Result<()> {
    if weights.len() != logits.cols() {
        return Err(Error::shape("class weights", logits.cols(), weights.len()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Scalar re-derivation of the focal loss for one sample.
    fn focal_oracle(z: &[f64], y: usize, gamma: f64, w: &[f64]) -> f64 {
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p = z[y].exp() / denom;
        -w[y] * (1.0 - p).powf(gamma) * p.ln()
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (Matrix, Vec<usize>, Vec<f64>) {
        let b = rng.gen_range(1..5);
        let c = rng.gen_range(2..6);
        let logits = Matrix::from_vec(b, c, (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect());
        let targets = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let w = (0..c).map(|_| rng.gen_range(0.2..3.0)).collect();
        (logits, targets, w)
    }

    #[test]
    fn hand_values() {
        let unit = ClassWeights::uniform(2);
        let z = Matrix::row_vector(&[0.0, 0.0]);
        let ce = focal_loss(&z, &[0], 0.0, &unit).unwrap().value;
        assert!((ce - LN2).abs() < 1e-12);
        // p_true = 0.5 with γ = 2: 0.25 ln 2
        let fl = focal_loss(&z, &[1], 2.0, &unit).unwrap().value;
        assert!((fl - 0.25 * LN2).abs() < 1e-12);
        assert!((fl - 0.173287).abs() < 1e-6);
    }

    #[test]
    fn confident_prediction_has_vanishing_loss() {
        let unit = ClassWeights::uniform(3);
        let z = Matrix::row_vector(&[40.0, 0.0, -5.0]);
        for gamma in [0.0, 0.5, 2.0, 5.0] {
            let l = focal_loss(&z, &[0], gamma, &unit).unwrap();
            assert!(l.value < 1e-15, "gamma {gamma}: {}", l.value);
            assert!(l.grad.all_finite());
        }
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (z, t, w) = random_case(&mut rng);
            let gamma = rng.gen_range(0.0..4.0);
            let cw = ClassWeights::new(w.clone()).unwrap();
            let got = focal_loss(&z, &t, gamma, &cw).unwrap().value;
            let want: f64 = t
                .iter()
                .enumerate()
                .map(|(i, &y)| focal_oracle(z.row(i), y, gamma, &w))
                .sum::<f64>()
                / t.len() as f64;
            assert!((got - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn gamma_zero_is_weighted_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (z, t, w) = random_case(&mut rng);
            let cw = ClassWeights::new(w.clone()).unwrap();
            let f = focal_loss(&z, &t, 0.0, &cw).unwrap().value;
            let ce: f64 = t
                .iter()
                .enumerate()
                .map(|(i, &y)| -w[y] * log_softmax(z.row(i))[y])
                .sum::<f64>()
                / t.len() as f64;
            assert!((f - ce).abs() < 1e-10);
        }
    }

    #[test]
    fn focal_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (z, t, w) = random_case(&mut rng);
            let gamma = rng.gen_range(0.0..3.0);
            let cw = ClassWeights::new(w).unwrap();
            let analytic = focal_loss(&z, &t, gamma, &cw).unwrap().grad;
            let numeric = central_difference(z.as_slice(), 1e-5, |x| {
                let m = Matrix::from_vec(z.rows(), z.cols(), x.to_vec());
                focal_loss(&m, &t, gamma, &cw).unwrap().value
            });
            let err = max_relative_error(analytic.as_slice(), &numeric);
            assert!(err <= 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn vs_hand_value() {
        // z = [1, 0], counts [3, 1], γ = 0.3, τ = 1, true class 0, w = [2/3, 2]
        let s1 = (1.0f64 / 3.0).powf(0.3);
        let a0 = 1.0 + (0.75f64).ln();
        let a1 = s1 * 0.0 + (0.25f64).ln();
        let want = (2.0 / 3.0) * (1.0 + (a1 - a0).exp()).ln();
        let w = ClassWeights::new(vec![2.0 / 3.0, 2.0]).unwrap();
        let got = vs_loss(&Matrix::row_vector(&[1.0, 0.0]), &[0], &[3, 1], 0.3, 1.0, &w)
            .unwrap()
            .value;
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.077).abs() < 5e-4, "{got}");
    }

    #[test]
    fn vs_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let (z, t, w) = random_case(&mut rng);
            let cw = ClassWeights::new(w).unwrap();
            let ce = weighted_cross_entropy(&z, &t, &cw).unwrap().value;
            let counts: Vec<usize> = (0..z.cols()).map(|_| rng.gen_range(1..50)).collect();
            let plain = vs_loss(&z, &t, &counts, 0.0, 0.0, &cw).unwrap().value;
            assert_eq!(plain, ce);
            let balanced = vec![7; z.cols()];
            let tau = rng.gen_range(0.0..3.0);
            let shifted = vs_loss(&z, &t, &balanced, 0.3, tau, &cw).unwrap().value;
            assert!((shifted - ce).abs() < 1e-8);
        }
    }

    #[test]
    fn vs_zero_count_is_an_error() {
        let w = ClassWeights::uniform(2);
        let z = Matrix::row_vector(&[0.0, 0.0]);
        assert!(matches!(
            vs_loss(&z, &[0], &[3, 0], 0.3, 1.0, &w),
            Err(Error::ZeroClassCount { class: 1 })
        ));
    }

    #[test]
    fn vs_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let (z, t, w) = random_case(&mut rng);
            let counts: Vec<usize> = (0..z.cols()).map(|_| rng.gen_range(1..100)).collect();
            let (g, tau) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..2.0));
            let cw = ClassWeights::new(w).unwrap();
            let analytic = vs_loss(&z, &t, &counts, g, tau, &cw).unwrap().grad;
            let numeric = central_difference(z.as_slice(), 1e-5, |x| {
                let m = Matrix::from_vec(z.rows(), z.cols(), x.to_vec());
                vs_loss(&m, &t, &counts, g, tau, &cw).unwrap().value
            });
            assert!(max_relative_error(analytic.as_slice(), &numeric) <= 1e-4);
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let w = ClassWeights::uniform(2);
        let z = Matrix::row_vector(&[0.0, 0.0]);
        assert!(focal_loss(&z, &[2], 0.0, &w).is_err());
        assert!(focal_loss(&z, &[0, 1], 0.0, &w).is_err());
        assert!(focal_loss(&z, &[0], 0.0, &ClassWeights::uniform(3)).is_err());
    }
}

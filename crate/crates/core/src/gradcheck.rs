//! Central finite differences for verifying analytic gradients.

/// Magnitudes below this are compared in absolute rather than relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference(point: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Worst `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)` over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let g = central_difference(&[1.0, 2.0], 1e-5, |v| v[0] * v[0] + 3.0 * v[0] * v[1]);
        assert!(max_relative_error(&g, &[8.0, 3.0]) < 1e-8);
    }

    #[test]
    fn floor_applies_near_zero() {
        assert!(max_relative_error(&[1e-9], &[0.0]) < 1e-5);
        assert!((max_relative_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-12);
    }
}

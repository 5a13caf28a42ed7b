//! Central-difference gradients, the independent oracle for `backward`.

use super::Tensor;

/// Entries whose magnitudes are both below this are compared absolutely.
///
/// Central differences with step 1e−5 carry rounding noise near
/// `1e−16 · |f| / 1e−5 ≈ 1e−11` for unit-scale `f`, so smaller gradient
/// entries cannot be resolved to a relative error of 1e−6 by the oracle.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// `(f(x + ε·e_i) − f(x − ε·e_i)) / 2ε` for every coordinate `i` of `x`.
///
/// `f` only ever sees plain (unlinked) tensors.
pub fn finite_diff_gradient<E>(mut f: impl FnMut(&Tensor) -> Result<f64, E>, x: &Tensor, eps: f64) -> Result<Tensor, E> {
    let base = x.to_vec();
    let mut grad = Vec::with_capacity(base.len());
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + eps;
        let up = f(&Tensor::plain(x.shape().to_vec(), probe.clone()))?;
        probe[i] = base[i] - eps;
        let down = f(&Tensor::plain(x.shape().to_vec(), probe.clone()))?;
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(Tensor::plain(x.shape().to_vec(), grad))
}

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Worst [`relative_error`] over paired entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_slice(&[0.3, -1.2, 4.0]);
        let g = finite_diff_gradient(|t| Ok::<_, Infallible>(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn self_dot_gradient() {
        let x = Tensor::from_slice(&[1.0, 2.0]);
        let g = finite_diff_gradient(|t| t.dot(t).map(|d| d.item()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, 0.0) < 1e-3);
    }
}

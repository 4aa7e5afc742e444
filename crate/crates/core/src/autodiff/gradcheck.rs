//! Central finite differences, the oracle for every backward rule.

use crate::tensor::Tensor;

/// Default step in 64-bit arithmetic.
pub const DEFAULT_EPS: f64 = 1e-5;

/// `(f(θ + ε·e_i) − f(θ − ε·e_i)) / 2ε` for every coordinate of every tensor.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], eps: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for t in 0..params.len() {
        let mut grad = Tensor::zeros(params[t].shape().to_vec());
        for i in 0..params[t].numel() {
            grad.data_mut()[i] = central(&mut f, &mut work, (t, i), eps);
        }
        out.push(grad);
    }
    out
}

/// Central differences at selected `(tensor, flat index)` coordinates only.
pub fn finite_diff_coords<F>(mut f: F, params: &[Tensor], coords: &[(usize, usize)], eps: f64) -> Vec<f64>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(eps > 0.0, "finite-difference step must be positive");
    let mut work = params.to_vec();
    coords.iter().map(|&c| central(&mut f, &mut work, c, eps)).collect()
}

fn central<F: FnMut(&[Tensor]) -> f64>(f: &mut F, work: &mut [Tensor], (t, i): (usize, usize), eps: f64) -> f64 {
    let orig = work[t].data()[i];
    work[t].data_mut()[i] = orig + eps;
    let plus = f(work);
    work[t].data_mut()[i] = orig - eps;
    let minus = f(work);
    work[t].data_mut()[i] = orig;
    (plus - minus) / (2.0 * eps)
}

/// First coordinate where `|analytic − numeric| > atol + rtol·|numeric|`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare(analytic: &[f64], numeric: &[f64], atol: f64, rtol: f64) -> Result<(), Mismatch> {
    assert_eq!(analytic.len(), numeric.len());
    for (index, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !((a - n).abs() <= atol + rtol * n.abs()) {
            return Err(Mismatch { index, analytic: a, numeric: n });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_grad(|p| p[0].data()[0].powi(2), &[Tensor::scalar(3.0)], DEFAULT_EPS);
        assert!((g[0].data()[0] - 6.0).abs() < 1e-9);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let params = [Tensor::full([2, 3], 1.5), Tensor::scalar(-2.0)];
        let g = finite_diff_grad(|_| 4.2, &params, DEFAULT_EPS);
        assert!(g.iter().flat_map(|t| t.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn coordinate_subset_matches_full_sweep() {
        let params = [Tensor::from_fn([3], |i| i as f64 + 0.5)];
        let f = |p: &[Tensor]| p[0].data().iter().map(|v| v.powi(3)).sum::<f64>();
        let full = finite_diff_grad(f, &params, DEFAULT_EPS);
        let sub = finite_diff_coords(f, &params, &[(0, 2), (0, 0)], DEFAULT_EPS);
        assert_eq!(sub, vec![full[0].data()[2], full[0].data()[0]]);
    }

    #[test]
    fn compare_reports_first_violation() {
        assert!(compare(&[1.0, 2.0], &[1.0, 2.0005], 1e-4, 1e-3).is_ok());
        let err = compare(&[1.0, 2.0, 3.0], &[1.0, 2.5, 3.5], 1e-4, 1e-3).unwrap_err();
        assert_eq!(err.index, 1);
    }
}

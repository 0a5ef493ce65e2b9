//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub numeric: f64,
    pub analytic: f64,
}

/// Relative error with a `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic` against `(f(x + h·e_i) - f(x - h·e_i)) / 2h` at every
/// element of `x`.
pub fn finite_diff_check(
    f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
) -> Result<GradCheckReport> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_at(f, x, analytic, h, &all)
}

/// Like [`finite_diff_check`] but probes only `indices`.
pub fn finite_diff_check_at(
    mut f: impl FnMut(&Tensor<f64>) -> f64,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    h: f64,
    indices: &[usize],
) -> Result<GradCheckReport> {
    if x.shape() != analytic.shape() {
        return Err(Error::shape("finite_diff_check", x.shape(), analytic.shape()));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        numeric: 0.0,
        analytic: 0.0,
    };
    let mut probe = x.clone();
    for &i in indices {
        let x0 = x.data()[i];
        probe.set(i, x0 + h)?;
        let plus = f(&probe);
        probe.set(i, x0 - h)?;
        let minus = f(&probe);
        probe.set(i, x0)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at element {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.data()[i];
        let err = relative_error(numeric, a);
        if err > report.max_rel_error || i == indices[0] {
            report = GradCheckReport {
                max_rel_error: err.max(report.max_rel_error),
                worst_index: i,
                numeric,
                analytic: a,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[3], vec![0.5, -2.0, 7.0]).unwrap();
        let r = finite_diff_check(|t| t.sum(), &x, &Tensor::ones(&[3]), 1e-3).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn quadratic_is_exact_for_central_differences() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(&[2], vec![2.0, 4.0]).unwrap();
        let r = finite_diff_check(|t| t.data().iter().map(|v| v * v).sum(), &x, &g, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
    }

    #[test]
    fn detects_ten_percent_error() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(&[2], vec![2.2, 4.4]).unwrap();
        let r = finite_diff_check(|t| t.data().iter().map(|v| v * v).sum(), &x, &g, 1e-4).unwrap();
        assert!((r.max_rel_error - 0.1 / 1.1).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = finite_diff_check(|t| t.data()[0].ln(), &x, &Tensor::ones(&[1]), 1e-3);
        assert!(r.is_err());
    }
}

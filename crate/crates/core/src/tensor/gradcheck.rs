//! Central finite-difference verification of analytic gradients.

use crate::{Error, Result, Scalar};

/// Floor under the relative-error denominator.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, RELATIVE_ERROR_FLOOR)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter index where the maximum was attained.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// `(L(θ + ε e_i) - L(θ - ε e_i)) / 2ε` for every coordinate `i`.
pub fn numerical_gradient<T: Scalar, F>(mut loss: F, params: &[T], epsilon: T) -> Result<Vec<T>>
where
    F: FnMut(&[T]) -> T,
{
    if epsilon <= T::zero() {
        return Err(Error::config("finite-difference epsilon must be > 0"));
    }
    let base = loss(params);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("loss at probe point is {base}")));
    }
    let mut probe = params.to_vec();
    let two = T::one() + T::one();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = loss(&probe);
        probe[i] = orig - epsilon;
        let minus = loss(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss around parameter {i} is not finite"
            )));
        }
        grad.push((plus - minus) / (two * epsilon));
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn finite_difference_check<T: Scalar, F>(
    loss: F,
    params: &[T],
    analytic: &[T],
    epsilon: T,
) -> Result<GradCheckReport>
where
    F: FnMut(&[T]) -> T,
{
    finite_difference_check_with_floor(loss, params, analytic, epsilon, RELATIVE_ERROR_FLOOR)
}

/// [`finite_difference_check`] with a custom relative-error floor, for
/// reduced precision where tiny gradients drown in rounding noise.
pub fn finite_difference_check_with_floor<T: Scalar, F>(
    loss: F,
    params: &[T],
    analytic: &[T],
    epsilon: T,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[T]) -> T,
{
    if analytic.len() != params.len() {
        return Err(Error::shape(format!(
            "{} analytic gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let numeric = numerical_gradient(loss, params, epsilon)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: params.len(),
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let (a, n) = (a.to_f64_lossy(), n.to_f64_lossy());
        let err = relative_error_with_floor(a, n, floor);
        if err > report.max_relative_error || err.is_nan() {
            report = GradCheckReport {
                max_relative_error: if err.is_nan() { f64::INFINITY } else { err },
                worst_index: i,
                analytic_at_worst: a,
                numeric_at_worst: n,
                ..report
            };
        }
    }
    Ok(report)
}

//! Scalar helpers shared across the variational machinery.

pub use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::GofError;

/// Logistic function g(t) = 1 / (1 + exp(-t)).
pub fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Inverse logistic, defined on (0, 1).
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// log g(t), computed without overflow for large |t|.
pub fn log_logistic(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

const LAMBDA_XI_EPS: f64 = 1e-8;

/// Coefficient of the quadratic logistic bound, (g(xi) - 1/2) / (2 xi).
///
/// The singularity at xi = 0 is removable; below `1e-8` the limit 1/8 is
/// returned.
pub fn lambda(xi: f64) -> Result<f64, GofError> {
    if xi < 0.0 {
        return Err(GofError::InvalidArgument(format!(
            "lambda requires xi >= 0, got {xi}"
        )));
    }
    if xi < LAMBDA_XI_EPS {
        Ok(0.125)
    } else {
        Ok((logistic(xi) - 0.5) / (2.0 * xi))
    }
}

/// `lambda` for inputs already known to be nonnegative.
pub(crate) fn lambda_unchecked(xi: f64) -> f64 {
    if xi < LAMBDA_XI_EPS {
        0.125
    } else {
        (logistic(xi) - 0.5) / (2.0 * xi)
    }
}

/// log(sum_i exp(x_i)) with max subtraction; -inf for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn lambda_limit_at_zero() {
        assert_abs_diff_eq!(lambda(0.0).unwrap(), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(lambda(1e-9).unwrap(), 0.125, epsilon = 1e-12);
    }

    #[test]
    fn lambda_at_one() {
        // (g(1) - 0.5) / 2 with g(1) = 1/(1+e^-1)
        let expected = (1.0 / (1.0 + (-1.0f64).exp()) - 0.5) / 2.0;
        assert_abs_diff_eq!(lambda(1.0).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(lambda(1.0).unwrap(), 0.11552928, epsilon = 1e-8);
    }

    #[test]
    fn lambda_at_ten() {
        let expected = (logistic(10.0) - 0.5) / 20.0;
        assert_abs_diff_eq!(lambda(10.0).unwrap(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(lambda(10.0).unwrap(), 0.0249977, epsilon = 1e-6);
    }

    #[test]
    fn lambda_rejects_negative() {
        assert!(lambda(-0.1).is_err());
    }

    #[test]
    fn log_logistic_matches_naive() {
        for &t in &[-30.0, -2.0, 0.0, 1.5, 25.0] {
            assert_abs_diff_eq!(log_logistic(t), logistic(t).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_sum_exp_handles_large_offsets() {
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert_abs_diff_eq!(v, 1000.0 + 2.0f64.ln(), epsilon = 1e-12);
    }
}

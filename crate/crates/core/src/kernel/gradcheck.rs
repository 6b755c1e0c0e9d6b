use crate::error::{DuplexError, Result};

/// Absolute differences at or below this are treated as agreement.
pub const ABS_FLOOR: f64 = 1e-8;

/// Compares `analytic` with central differences of a loss.
///
/// `loss_at(i, h)` must return the loss with coordinate `i` shifted by `h`
/// (and leave the underlying state unchanged afterwards). Returns the maximum
/// elementwise relative error `|a − n| / max(|a|, |n|)`, counting entries whose
/// absolute difference is within [`ABS_FLOOR`] as exact.
pub fn finite_diff_check<F>(n: usize, analytic: &[f64], eps: f64, mut loss_at: F) -> Result<f64>
where
    F: FnMut(usize, f64) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(DuplexError::InvalidArgument(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    if analytic.len() != n {
        return Err(DuplexError::DimensionMismatch {
            op: "finite_diff_check",
            left: (n, 1),
            right: (analytic.len(), 1),
        });
    }
    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let plus = loss_at(i, eps)?;
        let minus = loss_at(i, -eps)?;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(DuplexError::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let diff = (a - numeric).abs();
        if diff <= ABS_FLOOR {
            continue;
        }
        worst = worst.max(diff / a.abs().max(numeric.abs()));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        // f(x) = Σ c_i x_i² + x_0 x_1
        let x = [0.7, -1.3, 2.2];
        let c = [1.5, 0.25, 3.0];
        let f = |x: &[f64]| c.iter().zip(x).map(|(c, x)| c * x * x).sum::<f64>() + x[0] * x[1];
        let grad = [2.0 * c[0] * x[0] + x[1], 2.0 * c[1] * x[1] + x[0], 2.0 * c[2] * x[2]];
        let err = finite_diff_check(3, &grad, 1e-4, |i, h| {
            let mut xp = x;
            xp[i] += h;
            Ok(f(&xp))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_detected() {
        let err = finite_diff_check(1, &[3.0], 1e-5, |_, h| Ok((1.0 + h) * (1.0 + h))).unwrap();
        assert!((err - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn relu_kink_avoided_by_nudging() {
        // relu(x)² at x=0 has a kink in its derivative; nudging by 1e-3 avoids it
        let f = |x: f64| x.max(0.0).powi(2);
        let x = 0.0 + 1e-3;
        let err = finite_diff_check(1, &[2.0 * x], 1e-5, |_, h| Ok(f(x + h))).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite_loss() {
        assert!(finite_diff_check(1, &[0.0], 1e-2, |_, _| Ok(0.0)).is_err());
        assert!(matches!(
            finite_diff_check(1, &[0.0], 1e-5, |_, _| Ok(f64::NAN)),
            Err(DuplexError::NonFinite(_))
        ));
    }
}

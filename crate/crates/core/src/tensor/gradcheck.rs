use super::{Result, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Coordinate where the worst error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error `|a − n| / max(|a|, |n|, floor)`. The floor keeps
/// coordinates whose true gradient is zero from dividing roundoff by zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Compares `analytic` (the gradient of `f` at `theta`) coordinate by
/// coordinate against the five-point central difference
/// `(−f(θ+2εeᵢ) + 8f(θ+εeᵢ) − 8f(θ−εeᵢ) + f(θ−2εeᵢ)) / 12ε`, whose
/// truncation error is O(ε⁴). That allows a larger ε and so less roundoff.
pub fn grad_check<F>(theta: &[f64], analytic: &[f64], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(TensorError::NonFinite(format!("grad_check eps must be > 0, got {eps}")));
    }
    if theta.len() != analytic.len() {
        return Err(TensorError::ShapeMismatch {
            op: "grad_check",
            expected: vec![theta.len()],
            got: vec![analytic.len()],
        });
    }
    let mut point = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..theta.len() {
        let mut at = |h: f64| {
            point[i] = theta[i] + h;
            f(&point)
        };
        let (up2, up, down, down2) = (at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps));
        point[i] = theta[i];
        if ![up2, up, down, down2].iter().all(|v| v.is_finite()) {
            return Err(TensorError::NonFinite(format!("f at coordinate {i}")));
        }
        let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || i == 0 {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let theta = [0.3, -1.2, 2.5, 0.0];
        let grad: Vec<f64> = theta.iter().map(|t| 2.0 * t).collect();
        let r = grad_check(&theta, &grad, 1e-6, |th| th.iter().map(|t| t * t).sum()).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
    }

    #[test]
    fn quartic_is_exact_for_large_steps() {
        // the stencil is exact for polynomials up to degree 4
        let theta = [0.7, -0.4];
        let grad: Vec<f64> = theta.iter().map(|t| 4.0 * t * t * t).collect();
        let r = grad_check(&theta, &grad, 1e-1, |th| th.iter().map(|t| t.powi(4)).sum()).unwrap();
        assert!(r.max_rel_error < 1e-12, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let theta = [1.0, 2.0];
        let r = grad_check(&theta, &[2.0, 3.0], 1e-6, |th| th.iter().map(|t| t * t).sum()).unwrap();
        assert!(r.max_rel_error > 0.2);
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let r = grad_check(&[0.0], &[0.0], 1e-3, |th| if th[0] > 0.0 { f64::NAN } else { 0.0 });
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn non_positive_eps_is_rejected() {
        assert!(grad_check(&[0.0], &[0.0], 0.0, |_| 0.0).is_err());
    }
}

use statrs::distribution::{ContinuousCDF, StudentsT};

use super::{MetricError, Result};

/// Result of a two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    /// `p < 0.05 / n_comparisons`.
    pub significant: bool,
    /// Differences had zero variance; `p` is then 1 (equal means) or 0.
    pub degenerate: bool,
}

/// Paired t-test of `candidate − reference` with a Bonferroni threshold.
pub fn paired_t_test(reference: &[f64], candidate: &[f64], n_comparisons: usize) -> Result<TTest> {
    if reference.len() != candidate.len() {
        return Err(MetricError::LengthMismatch(reference.len(), candidate.len()));
    }
    let n = reference.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples(n));
    }
    let alpha = 0.05 / n_comparisons.max(1) as f64;
    let diffs: Vec<f64> = candidate.iter().zip(reference).map(|(c, r)| c - r).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
        return Ok(TTest {
            t,
            p,
            significant: p < alpha,
            degenerate: true,
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("n >= 2 gives positive degrees of freedom");
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p,
        significant: p < alpha,
        degenerate: false,
    })
}

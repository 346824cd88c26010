use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
pub const REPLICATION_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t_statistic: f64,
    pub raw_p: f64,
    pub corrected_p: f64,
    pub num_tests: usize,
    pub significant: bool,
}

impl SignificanceResult {
    pub(crate) fn from_p(t_statistic: f64, raw_p: f64, num_tests: usize) -> Self {
        let corrected_p = (raw_p * num_tests as f64).min(1.0);
        SignificanceResult {
            t_statistic,
            raw_p,
            corrected_p,
            num_tests,
            significant: corrected_p < SIGNIFICANCE_LEVEL,
        }
    }
}

/// Two-tailed p-value of a t statistic with `dof` degrees of freedom.
pub fn two_tailed_p(t: f64, dof: f64) -> f64 {
    let dist = StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom");
    (2.0 * dist.cdf(-t.abs())).min(1.0)
}

/// Paired two-tailed t-test on `a - b` with a Bonferroni correction over
/// `num_tests` comparisons. Constant differences give p = 1 when they are
/// zero and p = 0 otherwise.
pub fn paired_ttest_bonferroni(a: &[f64], b: &[f64], num_tests: usize) -> Result<SignificanceResult> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Contract("paired t-test needs at least two pairs".into()));
    }
    if num_tests == 0 {
        return Err(Error::Contract("num_tests must be at least 1".into()));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        };
        return Ok(SignificanceResult::from_p(t, p, num_tests));
    }
    let t = mean / (var / n).sqrt();
    Ok(SignificanceResult::from_p(t, two_tailed_p(t, n - 1.0), num_tests))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicationVerdict {
    pub observed: f64,
    pub reported: f64,
    /// Signed, `(observed - reported) / reported`.
    pub relative_diff: f64,
    pub replicated: bool,
}

pub fn replication_check(observed: f64, reported: f64) -> Result<ReplicationVerdict> {
    if !(reported > 0.0) {
        return Err(Error::Contract(format!(
            "reported value must be positive, got {reported}"
        )));
    }
    let relative_diff = (observed - reported) / reported;
    Ok(ReplicationVerdict {
        observed,
        reported,
        relative_diff,
        replicated: relative_diff.abs() <= REPLICATION_TOLERANCE,
    })
}

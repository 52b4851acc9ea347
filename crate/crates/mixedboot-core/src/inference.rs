//! Percentile confidence intervals, bootstrap p-values, and coverage scoring
//! over repeated simulations.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::engines::{BootstrapMethodId, BootstrapRun};
use crate::error::{Error, Result};

/// Minimum number of usable replicate values for a percentile interval.
pub const MIN_CI_SAMPLES: usize = 20;

/// Maximum tolerated fraction of failed replicates before interval
/// computation refuses (silent attrition biases the tails).
pub const MAX_FAILURE_FRACTION: f64 = 0.10;

/// A two-sided percentile interval from a bootstrap sample.
#[derive(Debug, Clone)]
pub struct PercentileCI {
    pub target: String,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
    /// Number of usable replicate values the interval was computed from.
    pub b_effective: usize,
}

impl PercentileCI {
    pub fn contains(&self, truth: f64) -> bool {
        self.lower <= truth && truth <= self.upper
    }
}

/// Linearly interpolated empirical quantile at position `1 + (m-1)p` on the
/// sorted sample (1-based), the convention fixed for this crate so ports can
/// agree exactly.
fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    let pos = (m - 1) as f64 * p;
    let lo = pos as usize; // floor for pos >= 0
    if lo + 1 >= m {
        return sorted[m - 1];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Percentile CI from raw sample values (already filtered to usable rows).
pub fn percentile_ci(samples: &[f64], level: f64, target: &str) -> Result<PercentileCI> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Invalid(format!("level {level} out of (0,1)")));
    }
    if samples.len() < MIN_CI_SAMPLES {
        return Err(Error::TooFewReplicates { got: samples.len(), min: MIN_CI_SAMPLES });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite sample in percentile input".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let alpha = 1.0 - level;
    Ok(PercentileCI {
        target: String::from(target),
        level,
        lower: interpolated_quantile(&sorted, alpha / 2.0),
        upper: interpolated_quantile(&sorted, 1.0 - alpha / 2.0),
        b_effective: samples.len(),
    })
}

/// Proportion of samples at or below the null value.
pub fn bootstrap_pvalue(samples: &[f64], null_value: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("p-value requires at least one sample".into()));
    }
    let count = samples.iter().filter(|&&v| v <= null_value).count();
    Ok(count as f64 / samples.len() as f64)
}

/// All percentile CIs for one bootstrap run: the p+2 parameter columns then
/// every plugin statistic, refusing when the failure fraction exceeds
/// [`MAX_FAILURE_FRACTION`].
pub fn run_percentile_cis(run: &BootstrapRun, level: f64) -> Result<Vec<PercentileCI>> {
    let failed = run.n_failed();
    if (failed as f64) > MAX_FAILURE_FRACTION * run.b as f64 {
        return Err(Error::ExcessiveFailures { failed, total: run.b });
    }
    let names = crate::engines::theta_column_names(run.p);
    let mut cis = Vec::with_capacity(run.n_cols() + run.stat_names.len());
    for (col, name) in names.iter().enumerate() {
        cis.push(percentile_ci(&run.ok_values(col), level, name)?);
    }
    for (k, name) in run.stat_names.iter().enumerate() {
        cis.push(percentile_ci(&run.ok_stat_values(k), level, name)?);
    }
    Ok(cis)
}

/// Empirical coverage of one (method, target) cell across simulations.
#[derive(Debug, Clone)]
pub struct CoverageReport {
    pub method: BootstrapMethodId,
    pub target: String,
    /// Fraction of scored simulations whose interval contains the truth.
    pub coverage: f64,
    /// Simulations scored (truth compared against an interval).
    pub r_effective: usize,
    /// Simulations that produced no interval for this target.
    pub failures: usize,
}

/// Score a sequence of per-simulation intervals against the shared truth.
/// `intervals` holds one optional CI per simulation (None when that
/// simulation failed to produce one).
pub fn coverage(
    method: BootstrapMethodId,
    target: &str,
    truth: f64,
    intervals: &[Option<PercentileCI>],
) -> CoverageReport {
    let mut covered = 0usize;
    let mut scored = 0usize;
    for ci in intervals.iter().flatten() {
        scored += 1;
        if ci.contains(truth) {
            covered += 1;
        }
    }
    CoverageReport {
        method,
        target: String::from(target),
        coverage: if scored == 0 { f64::NAN } else { covered as f64 / scored as f64 },
        r_effective: scored,
        failures: intervals.len() - scored,
    }
}

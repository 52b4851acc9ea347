//! Error taxonomy shared across the crate.

use alloc::string::String;

use crate::data::ThetaVector;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, thiserror::Error)]
pub enum Error {
    /// Malformed inputs: shape mismatches, empty pools, out-of-domain values.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// The (weighted) GLS normal equations are singular.
    #[error("singular design: {0}")]
    SingularDesign(String),

    /// The optimizer exhausted its iteration budget; carries the best point found.
    #[error(
        "fit did not converge after {iterations} iterations \
         (loglik {loglik:.6}, projected gradient norm {grad_norm:.3e})"
    )]
    NonConvergence {
        best: ThetaVector,
        loglik: f64,
        grad_norm: f64,
        iterations: usize,
    },

    /// A resampling pool has no variation to resample (e.g. all residuals zero).
    #[error("degenerate resampling pool: {0}")]
    DegeneratePool(String),

    /// Every replicate of a bootstrap run failed to refit.
    #[error("all {0} bootstrap replicates failed to refit")]
    AllReplicatesFailed(usize),

    /// Postscaling a replicate column whose mean is zero.
    #[error("postscaling failed for column {0}: replicate mean is zero")]
    Postscale(String),

    /// Too many failed replicates to summarize honestly.
    #[error("{failed}/{total} replicates failed (more than 10%); refusing to summarize")]
    ExcessiveFailures { failed: usize, total: usize },

    /// Below the minimum sample size for a percentile interval.
    #[error("too few successful replicates for a percentile interval: {got} < {min}")]
    TooFewReplicates { got: usize, min: usize },

    /// More than 5% of simulated datasets failed to fit.
    #[error("simulation study aborted: {failed}/{total} datasets failed to fit")]
    StudyDegenerate { failed: usize, total: usize },
}

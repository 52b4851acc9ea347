//! Centering/scaling transforms applied to the cluster-mean predictors and
//! within-cluster residuals before resampling.
//!
//! Each constructor returns a [`ResamplingPools`]: a cluster-effect pool, one
//! residual pool per cluster (or a single global pool), and donor-selection
//! weights. The transforms differ in how pools are recentered and rescaled so
//! their empirical moments match the fitted variance components, and in
//! whether donor clusters are chosen proportional to size or uniformly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::fit::FitResult;
use crate::math;

/// How a donor cluster is selected for each target cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DonorScheme {
    /// Probability proportional to cluster size, n_i / N.
    Pps,
    /// Uniform over clusters, 1 / D.
    Srs,
}

/// Which transform generated a pool set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemeTag {
    Preb1,
    Mreb1,
    Reb1,
    Identity,
    Cgr,
}

/// Transformed pools a bootstrap engine draws from.
#[derive(Debug, Clone)]
pub struct ResamplingPools {
    /// Transformed cluster effects, length D.
    pub u_pool: Vec<f64>,
    /// Transformed residuals, one vector per cluster (lengths n_i) — except
    /// when `global_residual_pool` is set, a single vector of all N values.
    pub e_pools: Vec<Vec<f64>>,
    /// Donor-cluster selection probabilities, length D, summing to 1.
    pub donor_weights: Vec<f64>,
    pub scheme_tag: SchemeTag,
    /// Residual draws come from the single pooled vector, skipping the
    /// donor-cluster step entirely.
    pub global_residual_pool: bool,
}

fn check_fit_shapes(fit: &FitResult, data: &ClusteredDataset) -> Result<()> {
    if fit.u_hat.len() != data.n_clusters() || fit.e_hat.len() != data.n_obs() {
        return Err(Error::Invalid(
            "fit residual vectors do not match the dataset shape".into(),
        ));
    }
    Ok(())
}

fn pps_weights(data: &ClusteredDataset) -> Vec<f64> {
    let n_total = data.n_obs() as f64;
    data.cluster_sizes().iter().map(|&n| n as f64 / n_total).collect()
}

fn srs_weights(d: usize) -> Vec<f64> {
    vec![1.0 / d as f64; d]
}

/// Center `u_hat` and rescale so the pool mean-square equals `sigma2_u`.
///
/// With `uncentered_denominator` the scale divisor is the mean-square of the
/// *raw* values, computed through the exact decomposition
/// `mean(u^2) = mean((u - m)^2) + m^2`; the centered mean-square is shared
/// with the centered-denominator path, so the two transforms agree bit-for-bit
/// whenever `m^2` vanishes below its rounding (balanced fits drive the mean
/// to solver precision).
///
/// A zero `sigma2_u` short-circuits to an all-zero pool: the scale factor is
/// applied before the division, so no 0/0 arises.
fn scaled_u_pool(
    u_hat: &[f64],
    sigma2_u: f64,
    uncentered_denominator: bool,
    label: &str,
) -> Result<Vec<f64>> {
    let d = u_hat.len() as f64;
    if sigma2_u == 0.0 {
        return Ok(vec![0.0; u_hat.len()]);
    }
    let mean = u_hat.iter().sum::<f64>() / d;
    let centered: Vec<f64> = u_hat.iter().map(|u| u - mean).collect();
    let msq_centered = centered.iter().map(|c| c * c).sum::<f64>() / d;
    let denom =
        if uncentered_denominator { msq_centered + mean * mean } else { msq_centered };
    if !(denom > 0.0) {
        return Err(Error::DegeneratePool(String::from(label)));
    }
    let scale = math::sqrt(sigma2_u) / math::sqrt(denom);
    Ok(centered.iter().map(|c| c * scale).collect())
}

/// Per-cluster residual pools rescaled by a common factor
/// `sigma_e / sqrt(sum_i weight_i * (sum_j e_ij^2))`. The caller supplies one
/// divisor-weight per cluster as an exact integer reciprocal so that schemes
/// whose weights coincide on balanced data produce bit-identical pools.
fn scaled_e_pools(
    fit: &FitResult,
    data: &ClusteredDataset,
    cluster_weight: impl Fn(usize) -> f64,
    label: &str,
) -> Result<Vec<Vec<f64>>> {
    let mut acc = 0.0;
    for i in 0..data.n_clusters() {
        let mut s_i = 0.0;
        for j in data.cluster_rows(i) {
            s_i += fit.e_hat[j] * fit.e_hat[j];
        }
        acc += s_i * cluster_weight(i);
    }
    if !(acc > 0.0) {
        return Err(Error::DegeneratePool(String::from(label)));
    }
    let scale = math::sqrt(fit.theta_hat.sigma2_e) / math::sqrt(acc);
    Ok((0..data.n_clusters())
        .map(|i| data.cluster_rows(i).map(|j| fit.e_hat[j] * scale).collect())
        .collect())
}

/// Pools for the size-weighted reflated bootstrap: centered-and-rescaled
/// cluster effects, residuals rescaled with the pooled 1/N divisor, and
/// size-proportional donor weights.
pub fn preb1_pools(fit: &FitResult, data: &ClusteredDataset) -> Result<ResamplingPools> {
    check_fit_shapes(fit, data)?;
    let inv_n = 1.0 / (data.n_obs() as f64);
    Ok(ResamplingPools {
        u_pool: scaled_u_pool(
            &fit.u_hat,
            fit.theta_hat.sigma2_u,
            false,
            "cluster-effect pool has zero variance",
        )?,
        e_pools: scaled_e_pools(fit, data, |_| inv_n, "residual pool is all zero")?,
        donor_weights: pps_weights(data),
        scheme_tag: SchemeTag::Preb1,
        global_residual_pool: false,
    })
}

/// Pools for the modified reflated bootstrap: the same cluster-effect pool,
/// residuals rescaled with per-cluster 1/(D n_i) divisor weights, and uniform
/// donor weights. On balanced data every divisor weight equals 1/N exactly,
/// so the pools coincide bit-for-bit with [`preb1_pools`].
pub fn mreb1_pools(fit: &FitResult, data: &ClusteredDataset) -> Result<ResamplingPools> {
    check_fit_shapes(fit, data)?;
    let d = data.n_clusters();
    let sizes = data.cluster_sizes();
    Ok(ResamplingPools {
        u_pool: scaled_u_pool(
            &fit.u_hat,
            fit.theta_hat.sigma2_u,
            false,
            "cluster-effect pool has zero variance",
        )?,
        e_pools: scaled_e_pools(
            fit,
            data,
            |i| 1.0 / ((d * sizes[i]) as f64),
            "residual pool is all zero",
        )?,
        donor_weights: srs_weights(d),
        scheme_tag: SchemeTag::Mreb1,
        global_residual_pool: false,
    })
}

/// Pools for the earlier reflated bootstrap this family modifies: cluster
/// effects centered but rescaled against the mean-square of the *uncentered*
/// values, residuals as in [`preb1_pools`], uniform donor weights.
pub fn reb1_pools(fit: &FitResult, data: &ClusteredDataset) -> Result<ResamplingPools> {
    check_fit_shapes(fit, data)?;
    let inv_n = 1.0 / (data.n_obs() as f64);
    Ok(ResamplingPools {
        u_pool: scaled_u_pool(
            &fit.u_hat,
            fit.theta_hat.sigma2_u,
            true,
            "cluster-effect pool has zero variance",
        )?,
        e_pools: scaled_e_pools(fit, data, |_| inv_n, "residual pool is all zero")?,
        donor_weights: srs_weights(data.n_clusters()),
        scheme_tag: SchemeTag::Reb1,
        global_residual_pool: false,
    })
}

/// Untransformed pools for the no-reflation variants: raw cluster-mean
/// predictors and raw centered residuals, donor weights per the requested
/// scheme. Never fails.
pub fn identity_pools(
    fit: &FitResult,
    data: &ClusteredDataset,
    donor_scheme: DonorScheme,
) -> Result<ResamplingPools> {
    check_fit_shapes(fit, data)?;
    Ok(ResamplingPools {
        u_pool: fit.u_hat.clone(),
        e_pools: (0..data.n_clusters())
            .map(|i| data.cluster_rows(i).map(|j| fit.e_hat[j]).collect())
            .collect(),
        donor_weights: match donor_scheme {
            DonorScheme::Pps => pps_weights(data),
            DonorScheme::Srs => srs_weights(data.n_clusters()),
        },
        scheme_tag: SchemeTag::Identity,
        global_residual_pool: false,
    })
}

/// Pools for the shrunken-predictor semiparametric bootstrap: shrunken
/// cluster predictors rescaled (without centering) to mean-square `sigma2_u`,
/// and one global pool of all N rescaled residuals drawn from directly.
pub fn cgr_pools(fit: &FitResult, data: &ClusteredDataset) -> Result<ResamplingPools> {
    check_fit_shapes(fit, data)?;
    let d = data.n_clusters() as f64;
    let msq_u = fit.u_eblup.iter().map(|u| u * u).sum::<f64>() / d;
    if !(msq_u > 0.0) {
        return Err(Error::DegeneratePool(
            "shrunken-predictor pool is all zero".into(),
        ));
    }
    let scale_u = math::sqrt(fit.theta_hat.sigma2_u) / math::sqrt(msq_u);
    let inv_n = 1.0 / (data.n_obs() as f64);
    let mut acc = 0.0;
    for i in 0..data.n_clusters() {
        let mut s_i = 0.0;
        for j in data.cluster_rows(i) {
            s_i += fit.eps_hat[j] * fit.eps_hat[j];
        }
        acc += s_i * inv_n;
    }
    if !(acc > 0.0) {
        return Err(Error::DegeneratePool(
            "shrunken-fit residual pool is all zero".into(),
        ));
    }
    let scale_e = math::sqrt(fit.theta_hat.sigma2_e) / math::sqrt(acc);
    Ok(ResamplingPools {
        u_pool: fit.u_eblup.iter().map(|u| u * scale_u).collect(),
        e_pools: vec![fit.eps_hat.iter().map(|e| e * scale_e).collect()],
        donor_weights: srs_weights(data.n_clusters()),
        scheme_tag: SchemeTag::Cgr,
        global_residual_pool: true,
    })
}

/// Exact bootstrap moments of a single pool draw, computed by enumerating
/// selection probabilities (donor weights for the cluster step, uniform
/// within the chosen pool) rather than by sampling.
#[derive(Debug, Clone, Copy)]
pub struct EnumeratedMoments {
    pub u_mean: f64,
    pub u_meansq: f64,
    pub e_mean: f64,
    pub e_meansq: f64,
}

pub fn enumerated_moments(pools: &ResamplingPools) -> EnumeratedMoments {
    let d = pools.u_pool.len() as f64;
    let u_mean = pools.u_pool.iter().sum::<f64>() / d;
    let u_meansq = pools.u_pool.iter().map(|u| u * u).sum::<f64>() / d;
    let (mut e_mean, mut e_meansq) = (0.0, 0.0);
    if pools.global_residual_pool {
        let pool = &pools.e_pools[0];
        let m = pool.len() as f64;
        e_mean = pool.iter().sum::<f64>() / m;
        e_meansq = pool.iter().map(|e| e * e).sum::<f64>() / m;
    } else {
        for (i, pool) in pools.e_pools.iter().enumerate() {
            let w = pools.donor_weights[i] / pool.len() as f64;
            for &e in pool {
                e_mean += w * e;
                e_meansq += w * e * e;
            }
        }
    }
    EnumeratedMoments { u_mean, u_meansq, e_mean, e_meansq }
}

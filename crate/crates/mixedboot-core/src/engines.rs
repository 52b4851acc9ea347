//! Bootstrap engines: every resampling scheme behind one interface.
//!
//! An engine is prepared once per (data, fit, config), after which replicate
//! `b` is a pure function of the preparation and `b` alone — its randomness
//! comes from a dedicated stream keyed by the replicate index, so serial and
//! parallel execution assemble identical runs. Refits reuse the original
//! fit's design statistics and warm-start from its estimates.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClusteredDataset, Criterion, ThetaVector};
use crate::error::{Error, Result};
use crate::fit::{self, DesignStats, FitOptions, FitResult};
use crate::reflate::{self, DonorScheme, ResamplingPools};
use crate::resample::{draw_exp1, draw_normal, CumulativeWeights, RandomSource};

/// Identifies one bootstrap method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BootstrapMethodId {
    /// Size-weighted donor selection, no reflation.
    Preb0,
    /// Size-weighted donor selection with reflated pools.
    Preb1,
    /// As `Preb0`, then replicate-matrix postscaling.
    Preb2,
    /// Uniform donor selection with per-cluster-weighted residual reflation.
    Mreb1,
    /// Uniform donor selection, no reflation.
    Reb0,
    /// Uniform donor selection, uncentered-denominator reflation.
    Reb1,
    /// As `Reb0`, then replicate-matrix postscaling.
    Reb2,
    /// Own-cluster residuals only, no reflation.
    Rebnc0,
    /// Own-cluster residuals only, uncentered-denominator reflation.
    Rebnc1,
    /// Gaussian draws from the fitted variance components.
    Parametric,
    /// Whole-cluster resampling with replacement.
    Cluster,
    /// Exponentially weighted likelihood refits.
    GenCluster,
    /// Shrunken-predictor draws with one global residual pool.
    Cgr,
}

impl BootstrapMethodId {
    pub const ALL: [Self; 13] = [
        Self::Preb0,
        Self::Preb1,
        Self::Preb2,
        Self::Mreb1,
        Self::Reb0,
        Self::Reb1,
        Self::Reb2,
        Self::Rebnc0,
        Self::Rebnc1,
        Self::Parametric,
        Self::Cluster,
        Self::GenCluster,
        Self::Cgr,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Preb0 => "preb0",
            Self::Preb1 => "preb1",
            Self::Preb2 => "preb2",
            Self::Mreb1 => "mreb1",
            Self::Reb0 => "reb0",
            Self::Reb1 => "reb1",
            Self::Reb2 => "reb2",
            Self::Rebnc0 => "rebnc0",
            Self::Rebnc1 => "rebnc1",
            Self::Parametric => "parametric",
            Self::Cluster => "cluster",
            Self::GenCluster => "gencluster",
            Self::Cgr => "cgr",
        }
    }
}

impl core::str::FromStr for BootstrapMethodId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown bootstrap method '{s}'")))
    }
}

impl core::fmt::Display for BootstrapMethodId {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplicateStatus {
    Ok,
    /// Converged with `sigma2_u` on the boundary; carries values.
    Boundary,
    /// Refit failed; the row carries NaN and is excluded downstream.
    Failed,
}

/// A named statistic recomputed from each replicate's parameter row.
#[derive(Debug, Clone)]
pub struct StatisticPlugin {
    pub name: String,
    form: StatisticForm,
}

#[derive(Debug, Clone)]
enum StatisticForm {
    /// sigma2_u / sigma2_e.
    Lambda,
    /// c' beta for a fixed coefficient vector of length p.
    LinearCombo(Vec<f64>),
}

impl StatisticPlugin {
    pub fn lambda() -> Self {
        Self { name: String::from("lambda"), form: StatisticForm::Lambda }
    }

    pub fn linear_combo(name: &str, coefficients: Vec<f64>) -> Self {
        Self { name: String::from(name), form: StatisticForm::LinearCombo(coefficients) }
    }

    /// Number of beta coefficients this plugin requires, if constrained.
    pub fn required_p(&self) -> Option<usize> {
        match &self.form {
            StatisticForm::Lambda => None,
            StatisticForm::LinearCombo(c) => Some(c.len()),
        }
    }

    pub fn evaluate(&self, theta_row: &[f64], p: usize) -> f64 {
        match &self.form {
            StatisticForm::Lambda => theta_row[p] / theta_row[p + 1],
            StatisticForm::LinearCombo(c) => {
                c.iter().zip(&theta_row[..p]).map(|(a, b)| a * b).sum()
            }
        }
    }
}

/// Engine controls. The refit criterion is always the original fit's
/// criterion, so it is not configured here.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Number of bootstrap replicates.
    pub b: usize,
    pub seed: u64,
    pub plugins: Vec<StatisticPlugin>,
    pub fit_opts: FitOptions,
}

impl EngineConfig {
    pub fn new(b: usize, seed: u64) -> Self {
        Self { b, seed, plugins: vec![StatisticPlugin::lambda()], fit_opts: FitOptions::default() }
    }
}

/// One bootstrap run: B replicate parameter rows plus plugin statistics.
#[derive(Debug, Clone)]
pub struct BootstrapRun {
    pub method: BootstrapMethodId,
    pub b: usize,
    pub p: usize,
    pub seed: u64,
    /// Row-major B x (p+2): beta components, sigma2_u, sigma2_e. Failed rows
    /// are NaN.
    pub theta_star: Vec<f64>,
    /// Row-major B x S plugin values; NaN on failed rows.
    pub stats_star: Vec<f64>,
    pub stat_names: Vec<String>,
    pub status: Vec<ReplicateStatus>,
}

impl BootstrapRun {
    pub fn n_cols(&self) -> usize {
        self.p + 2
    }

    pub fn theta_row(&self, b_index: usize) -> &[f64] {
        &self.theta_star[b_index * self.n_cols()..(b_index + 1) * self.n_cols()]
    }

    pub fn n_failed(&self) -> usize {
        self.status.iter().filter(|s| **s == ReplicateStatus::Failed).count()
    }

    pub fn n_ok(&self) -> usize {
        self.b - self.n_failed()
    }

    /// Values of one parameter column over non-failed replicates, in
    /// replicate order.
    pub fn ok_values(&self, col: usize) -> Vec<f64> {
        let cols = self.n_cols();
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s != ReplicateStatus::Failed)
            .map(|(r, _)| self.theta_star[r * cols + col])
            .collect()
    }

    /// Values of one plugin-statistic column over non-failed replicates.
    pub fn ok_stat_values(&self, stat_index: usize) -> Vec<f64> {
        let s = self.stat_names.len();
        self.status
            .iter()
            .enumerate()
            .filter(|(_, st)| **st != ReplicateStatus::Failed)
            .map(|(r, _)| self.stats_star[r * s + stat_index])
            .collect()
    }
}

/// Column names matching `theta_star`'s layout.
pub fn theta_column_names(p: usize) -> Vec<String> {
    let mut names: Vec<String> = (0..p).map(|k| format!("beta{k}")).collect();
    names.push(String::from("sigma2_u"));
    names.push(String::from("sigma2_e"));
    names
}

enum DonorKind {
    /// Donor index per target cluster from this table.
    Weighted(CumulativeWeights),
    /// Each cluster is its own donor; no randomness consumed.
    Own,
    /// No donor step; residual draws come from the single global pool.
    Global,
}

enum PreparedKind {
    Semiparametric {
        pools: ResamplingPools,
        u_table: CumulativeWeights,
        donor: DonorKind,
        e_tables: Vec<CumulativeWeights>,
    },
    Parametric {
        sd_u: f64,
        sd_e: f64,
    },
    Cluster {
        pick_table: CumulativeWeights,
    },
    GenCluster,
}

/// What one replicate drew, for inspection and oracle tests.
#[derive(Debug, Clone)]
pub enum ReplicateDraws {
    /// Synthetic-response engines: cluster effects, donor indices (empty when
    /// there is no donor step), residual draws, and the assembled responses.
    Synthetic { u_star: Vec<f64>, donors: Vec<usize>, e_star: Vec<f64>, y_star: Vec<f64> },
    /// Whole-cluster resampling: the chosen cluster indices.
    ClusterPick { indices: Vec<usize> },
    /// Weighted-likelihood resampling: the cluster weights.
    Weights { w: Vec<f64> },
}

/// An engine bound to its inputs, ready to produce replicates. Immutable;
/// replicate production is safe to fan out across threads.
pub struct PreparedEngine<'a> {
    method: BootstrapMethodId,
    data: &'a ClusteredDataset,
    criterion: Criterion,
    theta_hat: ThetaVector,
    b: usize,
    seed: u64,
    fit_opts: FitOptions,
    plugins: Vec<StatisticPlugin>,
    kind: PreparedKind,
    /// X beta_hat per row (empty for engines that do not synthesize y).
    fitted: Vec<f64>,
    ds: DesignStats,
}

/// One replicate's outcome: the parameter row (empty when failed).
#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub index: usize,
    pub theta: Vec<f64>,
    pub status: ReplicateStatus,
}

fn postscales(method: BootstrapMethodId) -> bool {
    matches!(method, BootstrapMethodId::Preb2 | BootstrapMethodId::Reb2)
}

/// Build the pools and donor machinery for `method` and freeze everything a
/// replicate needs.
pub fn prepare<'a>(
    method: BootstrapMethodId,
    data: &'a ClusteredDataset,
    fit: &'a FitResult,
    config: &EngineConfig,
) -> Result<PreparedEngine<'a>> {
    if !fit.converged {
        return Err(Error::Invalid("bootstrap requires a converged fit".into()));
    }
    if config.b == 0 {
        return Err(Error::Invalid("replicate count must be positive".into()));
    }
    for plugin in &config.plugins {
        if let Some(need) = plugin.required_p() {
            if need != data.p() {
                return Err(Error::Invalid(format!(
                    "statistic '{}' expects {} coefficients, design has {}",
                    plugin.name,
                    need,
                    data.p()
                )));
            }
        }
    }
    let d = data.n_clusters();
    let sizes_f: Vec<f64> = data.cluster_sizes().iter().map(|&n| n as f64).collect();

    use BootstrapMethodId as M;
    let kind = match method {
        M::Preb1 => semiparametric(
            reflate::preb1_pools(fit, data)?,
            d,
            DonorKind::Weighted(CumulativeWeights::proportional(&sizes_f)?),
        )?,
        M::Mreb1 => semiparametric(
            reflate::mreb1_pools(fit, data)?,
            d,
            DonorKind::Weighted(CumulativeWeights::equal(d)?),
        )?,
        M::Reb1 => semiparametric(
            reflate::reb1_pools(fit, data)?,
            d,
            DonorKind::Weighted(CumulativeWeights::equal(d)?),
        )?,
        M::Preb0 | M::Preb2 => semiparametric(
            reflate::identity_pools(fit, data, DonorScheme::Pps)?,
            d,
            DonorKind::Weighted(CumulativeWeights::proportional(&sizes_f)?),
        )?,
        M::Reb0 | M::Reb2 => semiparametric(
            reflate::identity_pools(fit, data, DonorScheme::Srs)?,
            d,
            DonorKind::Weighted(CumulativeWeights::equal(d)?),
        )?,
        M::Rebnc0 => {
            semiparametric(reflate::identity_pools(fit, data, DonorScheme::Srs)?, d, DonorKind::Own)?
        }
        M::Rebnc1 => semiparametric(reflate::reb1_pools(fit, data)?, d, DonorKind::Own)?,
        M::Cgr => semiparametric(reflate::cgr_pools(fit, data)?, d, DonorKind::Global)?,
        M::Parametric => PreparedKind::Parametric {
            sd_u: crate::math::sqrt(fit.theta_hat.sigma2_u),
            sd_e: crate::math::sqrt(fit.theta_hat.sigma2_e),
        },
        M::Cluster => PreparedKind::Cluster { pick_table: CumulativeWeights::equal(d)? },
        M::GenCluster => PreparedKind::GenCluster,
    };

    let fitted = match kind {
        PreparedKind::Cluster { .. } | PreparedKind::GenCluster => Vec::new(),
        _ => (0..data.n_obs())
            .map(|j| {
                data.x_row(j)
                    .iter()
                    .zip(&fit.theta_hat.beta)
                    .map(|(x, b)| x * b)
                    .sum()
            })
            .collect(),
    };

    let mut fit_opts = config.fit_opts.clone();
    fit_opts.start_hint = Some((fit.theta_hat.sigma2_u, fit.theta_hat.sigma2_e));
    // The warm start plus the method-of-moments start give each replicate two
    // cheap, well-separated basins; the broader fallback grid is for cold fits.
    fit_opts.multi_start = false;

    Ok(PreparedEngine {
        method,
        data,
        criterion: fit.criterion,
        theta_hat: fit.theta_hat.clone(),
        b: config.b,
        seed: config.seed,
        fit_opts,
        plugins: config.plugins.clone(),
        kind,
        fitted,
        ds: DesignStats::new(data),
    })
}

fn semiparametric(pools: ResamplingPools, d: usize, donor: DonorKind) -> Result<PreparedKind> {
    Ok(PreparedKind::Semiparametric {
        u_table: CumulativeWeights::equal(d)?,
        e_tables: pools
            .e_pools
            .iter()
            .map(|pool| CumulativeWeights::equal(pool.len()))
            .collect::<Result<Vec<_>>>()?,
        donor,
        pools,
    })
}

impl PreparedEngine<'_> {
    pub fn n_replicates(&self) -> usize {
        self.b
    }

    pub fn method(&self) -> BootstrapMethodId {
        self.method
    }

    /// Reproduce exactly what replicate `b_index` draws. Consumes stream
    /// `b_index` of the run seed in a fixed order: cluster effects, donor
    /// indices, then residuals cluster by cluster.
    pub fn replicate_draws(&self, b_index: usize) -> ReplicateDraws {
        let mut rng = RandomSource::new(self.seed, b_index as u64).rng();
        let d = self.data.n_clusters();
        let n = self.data.n_obs();
        match &self.kind {
            PreparedKind::Semiparametric { pools, u_table, donor, e_tables } => {
                let u_idx = u_table.draw(d, &mut rng);
                let u_star: Vec<f64> = u_idx.iter().map(|&k| pools.u_pool[k]).collect();
                let donors: Vec<usize> = match donor {
                    DonorKind::Weighted(table) => table.draw(d, &mut rng),
                    DonorKind::Own => (0..d).collect(),
                    DonorKind::Global => Vec::new(),
                };
                let mut e_star = Vec::with_capacity(n);
                if matches!(donor, DonorKind::Global) {
                    for k in e_tables[0].draw(n, &mut rng) {
                        e_star.push(pools.e_pools[0][k]);
                    }
                } else {
                    for (i, &donor_i) in donors.iter().enumerate() {
                        let pool = &pools.e_pools[donor_i];
                        for k in e_tables[donor_i].draw(self.data.cluster_size(i), &mut rng) {
                            e_star.push(pool[k]);
                        }
                    }
                }
                let y_star = self.assemble_responses(&u_star, &e_star);
                ReplicateDraws::Synthetic { u_star, donors, e_star, y_star }
            }
            PreparedKind::Parametric { sd_u, sd_e } => {
                let u_star = draw_normal(0.0, *sd_u, d, &mut rng).expect("sd >= 0");
                let e_star = draw_normal(0.0, *sd_e, n, &mut rng).expect("sd >= 0");
                let y_star = self.assemble_responses(&u_star, &e_star);
                ReplicateDraws::Synthetic { u_star, donors: Vec::new(), e_star, y_star }
            }
            PreparedKind::Cluster { pick_table } => {
                ReplicateDraws::ClusterPick { indices: pick_table.draw(d, &mut rng) }
            }
            PreparedKind::GenCluster => {
                ReplicateDraws::Weights { w: draw_exp1(d, &mut rng) }
            }
        }
    }

    fn assemble_responses(&self, u_star: &[f64], e_star: &[f64]) -> Vec<f64> {
        let mut y_star = Vec::with_capacity(self.data.n_obs());
        for i in 0..self.data.n_clusters() {
            for j in self.data.cluster_rows(i) {
                y_star.push(self.fitted[j] + u_star[i] + e_star[j]);
            }
        }
        y_star
    }

    /// Run replicate `b_index` end to end. Refit failures become
    /// `ReplicateStatus::Failed` rows; the run continues.
    pub fn replicate(&self, b_index: usize) -> ReplicateRow {
        let core = match self.replicate_draws(b_index) {
            ReplicateDraws::Synthetic { y_star, .. } => {
                fit::refit(self.data, &self.ds, &y_star, self.criterion, &self.fit_opts)
            }
            ReplicateDraws::ClusterPick { indices } => cluster_subset(self.data, &indices)
                .and_then(|sub| {
                    let ds = DesignStats::new(&sub);
                    fit::refit(&sub, &ds, sub.y(), self.criterion, &self.fit_opts)
                }),
            ReplicateDraws::Weights { w } => fit::fit_theta(
                self.data,
                &self.ds,
                self.data.y(),
                self.criterion,
                Some(&w),
                &self.fit_opts,
            ),
        };
        match core {
            Ok(core) => ReplicateRow {
                index: b_index,
                theta: core.theta.to_row(),
                status: if core.boundary {
                    ReplicateStatus::Boundary
                } else {
                    ReplicateStatus::Ok
                },
            },
            Err(_) => {
                ReplicateRow { index: b_index, theta: Vec::new(), status: ReplicateStatus::Failed }
            }
        }
    }

    /// Collect replicate rows (any order) into a run: order by index, apply
    /// postscaling for the `*2` variants, then evaluate plugin statistics.
    pub fn assemble(&self, mut rows: Vec<ReplicateRow>) -> Result<BootstrapRun> {
        if rows.len() != self.b {
            return Err(Error::Invalid(format!(
                "expected {} replicate rows, got {}",
                self.b,
                rows.len()
            )));
        }
        rows.sort_by_key(|r| r.index);
        let p = self.data.p();
        let cols = p + 2;
        let mut theta_star = vec![f64::NAN; self.b * cols];
        let mut status = Vec::with_capacity(self.b);
        for (r, row) in rows.iter().enumerate() {
            if row.index != r {
                return Err(Error::Invalid("replicate indices must cover 0..B".into()));
            }
            if row.status != ReplicateStatus::Failed {
                theta_star[r * cols..(r + 1) * cols].copy_from_slice(&row.theta);
            }
            status.push(row.status);
        }
        if status.iter().all(|s| *s == ReplicateStatus::Failed) {
            return Err(Error::AllReplicatesFailed(self.b));
        }
        if postscales(self.method) {
            postscale_columns(&mut theta_star, &status, p, &self.theta_hat)?;
        }
        let s = self.plugins.len();
        let mut stats_star = vec![f64::NAN; self.b * s];
        for r in 0..self.b {
            if status[r] == ReplicateStatus::Failed {
                continue;
            }
            let row = &theta_star[r * cols..(r + 1) * cols];
            for (k, plugin) in self.plugins.iter().enumerate() {
                stats_star[r * s + k] = plugin.evaluate(row, p);
            }
        }
        Ok(BootstrapRun {
            method: self.method,
            b: self.b,
            p,
            seed: self.seed,
            theta_star,
            stats_star,
            stat_names: self.plugins.iter().map(|pl| pl.name.clone()).collect(),
            status,
        })
    }
}

/// Stack the chosen clusters into a fresh dataset (sizes may differ from the
/// original; cluster order follows the picks).
fn cluster_subset(data: &ClusteredDataset, indices: &[usize]) -> Result<ClusteredDataset> {
    let p = data.p();
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut sizes = Vec::with_capacity(indices.len());
    for &i in indices {
        sizes.push(data.cluster_size(i));
        for j in data.cluster_rows(i) {
            y.push(data.y()[j]);
            x.extend_from_slice(data.x_row(j));
        }
    }
    ClusteredDataset::new(y, x, p, &sizes)
}

/// Postscale the `*2` variants: recenter beta columns additively and rescale
/// variance columns multiplicatively so non-failed column means hit the point
/// estimates.
fn postscale_columns(
    theta_star: &mut [f64],
    status: &[ReplicateStatus],
    p: usize,
    target: &ThetaVector,
) -> Result<()> {
    let cols = p + 2;
    let ok_rows: Vec<usize> = status
        .iter()
        .enumerate()
        .filter(|(_, s)| **s != ReplicateStatus::Failed)
        .map(|(r, _)| r)
        .collect();
    let m = ok_rows.len() as f64;
    for col in 0..p {
        let mean = ok_rows.iter().map(|&r| theta_star[r * cols + col]).sum::<f64>() / m;
        let shift = target.beta[col] - mean;
        for &r in &ok_rows {
            theta_star[r * cols + col] += shift;
        }
    }
    for (col, target_value) in [(p, target.sigma2_u), (p + 1, target.sigma2_e)] {
        let mean = ok_rows.iter().map(|&r| theta_star[r * cols + col]).sum::<f64>() / m;
        if mean == 0.0 {
            return Err(Error::Postscale(format!(
                "replicate mean of column {col} is zero; ratio correction undefined"
            )));
        }
        let factor = target_value / mean;
        for &r in &ok_rows {
            theta_star[r * cols + col] *= factor;
        }
    }
    Ok(())
}

/// Prepare and run every replicate serially.
pub fn run_method(
    method: BootstrapMethodId,
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    let prepared = prepare(method, data, fit, config)?;
    let rows = (0..prepared.n_replicates()).map(|b| prepared.replicate(b)).collect();
    prepared.assemble(rows)
}

pub fn run_preb1(
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    run_method(BootstrapMethodId::Preb1, data, fit, config)
}

pub fn run_mreb1(
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    run_method(BootstrapMethodId::Mreb1, data, fit, config)
}

/// Run one of the donor-resampling variants that share the same machinery.
pub fn run_reb_family(
    variant: BootstrapMethodId,
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    use BootstrapMethodId as M;
    match variant {
        M::Reb0 | M::Reb1 | M::Reb2 | M::Rebnc0 | M::Rebnc1 | M::Preb0 | M::Preb2 => {
            run_method(variant, data, fit, config)
        }
        other => Err(Error::Invalid(format!(
            "{other} is not part of the donor-resampling variant family"
        ))),
    }
}

pub fn run_parametric(
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    run_method(BootstrapMethodId::Parametric, data, fit, config)
}

pub fn run_cluster(
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    run_method(BootstrapMethodId::Cluster, data, fit, config)
}

pub fn run_gencluster(
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    run_method(BootstrapMethodId::GenCluster, data, fit, config)
}

pub fn run_cgr(
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> Result<BootstrapRun> {
    run_method(BootstrapMethodId::Cgr, data, fit, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fit::fit;
    use crate::resample::draw_normal;
    use alloc::vec;

    fn simulated(seed: u64, sizes: &[usize]) -> ClusteredDataset {
        let d = sizes.len();
        let mut rng = RandomSource::new(seed, 0).rng();
        let n: usize = sizes.iter().sum();
        let xs = draw_normal(0.5, 0.29, n, &mut rng).unwrap();
        let us = draw_normal(0.0, 0.2, d, &mut rng).unwrap();
        let es = draw_normal(0.0, 0.4, n, &mut rng).unwrap();
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(2 * n);
        let mut row = 0;
        for (i, &ni) in sizes.iter().enumerate() {
            for _ in 0..ni {
                x.push(1.0);
                x.push(xs[row]);
                y.push(1.0 + 2.0 * xs[row] + us[i] + es[row]);
                row += 1;
            }
        }
        ClusteredDataset::new(y, x, 2, sizes).unwrap()
    }

    #[test]
    fn preb1_smoke_run_is_deterministic() {
        let data = simulated(42, &[3, 5, 2, 7, 4, 3, 6, 2, 5, 3]);
        let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        let cfg = EngineConfig::new(25, 7);
        let run1 = run_preb1(&data, &fitted, &cfg).unwrap();
        let run2 = run_preb1(&data, &fitted, &cfg).unwrap();
        assert_eq!(run1.theta_star.len(), 25 * 4);
        assert_eq!(run1.stat_names, vec![String::from("lambda")]);
        for (a, b) in run1.theta_star.iter().zip(&run2.theta_star) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
        assert!(run1.n_failed() < 25);
        for r in 0..run1.b {
            if run1.status[r] != ReplicateStatus::Failed {
                let row = run1.theta_row(r);
                assert!(row.iter().all(|v| v.is_finite()));
                assert!(row[2] >= 0.0 && row[3] > 0.0);
            }
        }
    }

    #[test]
    fn assembly_is_order_independent() {
        let data = simulated(43, &[4, 2, 6, 3, 5, 4, 2, 3]);
        let fitted = fit(&data, Criterion::Ml, &FitOptions::default()).unwrap();
        let cfg = EngineConfig::new(12, 3);
        let prepared = prepare(BootstrapMethodId::Mreb1, &data, &fitted, &cfg).unwrap();
        let forward: Vec<_> = (0..12).map(|b| prepared.replicate(b)).collect();
        let mut backward: Vec<_> = (0..12).rev().map(|b| prepared.replicate(b)).collect();
        let run_f = prepared.assemble(forward).unwrap();
        let run_b = prepared.assemble(core::mem::take(&mut backward)).unwrap();
        assert_eq!(run_f.theta_star, run_b.theta_star);
        assert_eq!(run_f.status, run_b.status);
    }

    #[test]
    fn own_donor_variants_use_their_own_cluster() {
        let data = simulated(44, &[3, 4, 2, 5, 3, 4]);
        let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        let cfg = EngineConfig::new(4, 11);
        let prepared = prepare(BootstrapMethodId::Rebnc1, &data, &fitted, &cfg).unwrap();
        for b in 0..4 {
            let ReplicateDraws::Synthetic { donors, .. } = prepared.replicate_draws(b) else {
                panic!("semiparametric engine expected");
            };
            assert_eq!(donors, (0..6).collect::<Vec<_>>());
        }
    }

    #[test]
    fn parametric_with_boundary_fit_draws_zero_effects() {
        let data = simulated(45, &[4, 4, 4, 4, 4, 4]);
        let mut fitted = fit(&data, Criterion::Ml, &FitOptions::default()).unwrap();
        // Force a boundary estimate; parametric draws must then be exactly 0.
        fitted.theta_hat.sigma2_u = 0.0;
        fitted.boundary = true;
        let cfg = EngineConfig::new(3, 5);
        let prepared = prepare(BootstrapMethodId::Parametric, &data, &fitted, &cfg).unwrap();
        let ReplicateDraws::Synthetic { u_star, .. } = prepared.replicate_draws(0) else {
            panic!("parametric engine expected");
        };
        assert!(u_star.iter().all(|&u| u == 0.0));
        let run = run_parametric(&data, &fitted, &cfg).unwrap();
        assert!(run.n_ok() > 0);
    }

    #[test]
    fn postscaled_columns_hit_point_estimates() {
        let data = simulated(46, &[2, 5, 3, 6, 4, 2, 5, 3]);
        let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        let cfg = EngineConfig::new(40, 9);
        let run = run_reb_family(BootstrapMethodId::Reb2, &data, &fitted, &cfg).unwrap();
        let cols = run.n_cols();
        for col in 0..cols {
            let vals = run.ok_values(col);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let target = fitted.theta_hat.to_row()[col];
            assert!((mean - target).abs() < 1e-10, "col {col}: {mean} vs {target}");
        }
        // Variance columns stay nonnegative after rescaling.
        for col in [cols - 2, cols - 1] {
            assert!(run.ok_values(col).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn gencluster_unit_weights_reproduce_the_fit() {
        let data = simulated(47, &[3, 5, 4, 2, 6, 3]);
        let fitted = fit(&data, Criterion::Ml, &FitOptions::default()).unwrap();
        let weighted =
            crate::fit::fit_weighted(&data, Criterion::Ml, &[1.0; 6], &FitOptions::default())
                .unwrap();
        assert_eq!(fitted.theta_hat.to_row(), weighted.theta_hat.to_row());
    }

    #[test]
    fn cluster_identity_pick_reproduces_the_fit() {
        let data = simulated(48, &[4, 3, 5, 2, 4, 3]);
        let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        let sub = cluster_subset(&data, &(0..6).collect::<Vec<_>>()).unwrap();
        assert_eq!(sub.y(), data.y());
        let mut opts = FitOptions::default();
        opts.start_hint = Some((fitted.theta_hat.sigma2_u, fitted.theta_hat.sigma2_e));
        opts.multi_start = false;
        let refit = fit(&sub, Criterion::Reml, &opts).unwrap();
        assert_eq!(refit.theta_hat.sigma2_u, fitted.theta_hat.sigma2_u);
        assert_eq!(refit.theta_hat.sigma2_e, fitted.theta_hat.sigma2_e);
    }

    #[test]
    fn method_names_round_trip() {
        for m in BootstrapMethodId::ALL {
            let parsed: BootstrapMethodId = m.as_str().parse().unwrap();
            assert_eq!(parsed, m);
        }
        assert!("nope".parse::<BootstrapMethodId>().is_err());
    }
}

//! Synthetic clustered-data generation and method-by-scenario coverage
//! studies.
//!
//! Randomness layout: dataset `s` of a scenario uses seed
//! `derive_seed(seed, TAG_DATASET, s)`; every bootstrap engine inside
//! simulation `s` shares seed `derive_seed(seed, TAG_ENGINE, s)` (common
//! random numbers across methods, so balanced-case engine equivalences
//! propagate into study output). Replicates then occupy streams keyed by
//! replicate index as usual.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{ClusteredDataset, Criterion};
use crate::engines::{self, BootstrapMethodId, EngineConfig, StatisticPlugin};
use crate::error::{Error, Result};
use crate::fit::{fit, FitOptions};
use crate::inference::{self, CoverageReport, PercentileCI};
use crate::resample::{derive_seed, draw_chisq1_standardized, draw_normal, RandomSource};
use rand::Rng;

const TAG_DATASET: u64 = 1;
const TAG_ENGINE: u64 = 2;

/// Maximum tolerated fraction of simulations whose base fit fails.
pub const MAX_FIT_FAILURE_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SizeScheme {
    /// Every cluster has this size.
    Balanced(usize),
    /// Explicit per-cluster sizes (length must equal D).
    UnbalancedProfile(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EffectDistribution {
    /// Gaussian cluster effects and errors.
    NormalSet1,
    /// Standardized chi-square(1) effects and errors: skewed, heavy-tailed,
    /// mean 0, matching variances.
    Chisq1Set2,
}

/// Everything defining one coverage study.
#[derive(Debug, Clone)]
pub struct SimulationScenario {
    pub name: String,
    pub d: usize,
    pub size_scheme: SizeScheme,
    pub beta: Vec<f64>,
    pub sigma2_u: f64,
    pub sigma2_e: f64,
    pub effect_dist: EffectDistribution,
    /// Number of simulated datasets.
    pub r: usize,
    /// Bootstrap replicates per dataset.
    pub b: usize,
    pub level: f64,
    pub methods: Vec<BootstrapMethodId>,
    pub seed: u64,
    pub criterion: Criterion,
}

impl SimulationScenario {
    pub fn lambda(&self) -> f64 {
        self.sigma2_u / self.sigma2_e
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        match &self.size_scheme {
            SizeScheme::Balanced(n) => vec![*n; self.d],
            SizeScheme::UnbalancedProfile(sizes) => sizes.clone(),
        }
    }

    pub fn n_obs(&self) -> usize {
        self.cluster_sizes().iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Invalid("scenario needs at least 2 clusters".into()));
        }
        if self.beta.is_empty() || self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Invalid("scenario beta must be finite and nonempty".into()));
        }
        if !(self.sigma2_u >= 0.0) || !(self.sigma2_e >= 0.0) {
            return Err(Error::Invalid("scenario variances must be nonnegative".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Invalid("level must be inside (0,1)".into()));
        }
        match &self.size_scheme {
            SizeScheme::Balanced(n) if *n == 0 => {
                return Err(Error::Invalid("balanced cluster size must be positive".into()));
            }
            SizeScheme::UnbalancedProfile(sizes) => {
                if sizes.len() != self.d {
                    return Err(Error::Invalid(format!(
                        "size profile has {} entries for D = {}",
                        sizes.len(),
                        self.d
                    )));
                }
                if sizes.iter().any(|&n| n == 0) {
                    return Err(Error::Invalid("profile sizes must all be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Named study setups: the four distribution-by-size-scheme combinations
    /// at D = 100, beta = (1, 2), sigma2_u = 0.04, sigma2_e = 0.16, with
    /// desk-scale defaults R = 200, B = 200 and all methods enabled.
    pub fn preset(name: &str) -> Result<Self> {
        let (effect_dist, balanced) = match name {
            "set1-balanced" => (EffectDistribution::NormalSet1, true),
            "set1-unbalanced" => (EffectDistribution::NormalSet1, false),
            "set2-balanced" => (EffectDistribution::Chisq1Set2, true),
            "set2-unbalanced" => (EffectDistribution::Chisq1Set2, false),
            other => {
                return Err(Error::Invalid(format!(
                    "unknown preset '{other}'; available: {}",
                    PRESET_NAMES.join(", ")
                )));
            }
        };
        Ok(Self {
            name: String::from(name),
            d: 100,
            size_scheme: if balanced {
                SizeScheme::Balanced(7)
            } else {
                SizeScheme::UnbalancedProfile(default_unbalanced_profile())
            },
            beta: vec![1.0, 2.0],
            sigma2_u: 0.04,
            sigma2_e: 0.16,
            effect_dist,
            r: 200,
            b: 200,
            level: 0.95,
            methods: BootstrapMethodId::ALL.to_vec(),
            seed: 20260822,
            criterion: Criterion::Reml,
        })
    }

    /// Coverage targets in report order: the parameter columns then the
    /// signal-to-noise ratio.
    pub fn targets(&self) -> Vec<String> {
        let mut t = engines::theta_column_names(self.beta.len());
        t.push(String::from("lambda"));
        t
    }

    /// True values aligned with [`Self::targets`].
    pub fn truth_row(&self) -> Vec<f64> {
        let mut row = self.beta.clone();
        row.push(self.sigma2_u);
        row.push(self.sigma2_e);
        row.push(self.lambda());
        row
    }
}

pub const PRESET_NAMES: [&str; 4] =
    ["set1-balanced", "set1-unbalanced", "set2-balanced", "set2-unbalanced"];

/// The fixed 100-cluster size profile used by the unbalanced scenarios:
/// min 1, max 42, total 752, strongly right-skewed. Shipped as data so every
/// run and port sees identical sizes.
pub fn default_unbalanced_profile() -> Vec<usize> {
    let blocks: [(usize, usize); 13] = [
        (26, 1),
        (15, 2),
        (10, 3),
        (8, 4),
        (6, 5),
        (5, 6),
        (4, 7),
        (3, 8),
        (2, 9),
        (2, 10),
        (2, 11),
        (1, 12),
        (1, 13),
    ];
    let mut sizes = Vec::with_capacity(100);
    for (count, size) in blocks {
        for _ in 0..count {
            sizes.push(size);
        }
    }
    sizes.extend_from_slice(&[12, 14, 16, 18, 21, 24, 27, 30, 33, 36, 39, 41, 42, 42, 42]);
    sizes
}

/// Generate dataset `sim_index` of the scenario. Draw order is fixed:
/// covariates row by row, then cluster effects, then unit errors.
pub fn generate_dataset(
    scenario: &SimulationScenario,
    sim_index: usize,
) -> Result<ClusteredDataset> {
    scenario.validate()?;
    let sizes = scenario.cluster_sizes();
    let d = scenario.d;
    let n: usize = sizes.iter().sum();
    let p = scenario.beta.len();
    let seed = derive_seed(scenario.seed, TAG_DATASET, sim_index as u64);
    let mut rng = RandomSource::new(seed, 0).rng();

    let mut x = Vec::with_capacity(n * p);
    for _ in 0..n {
        x.push(1.0);
        for _ in 1..p {
            x.push(rng.random::<f64>());
        }
    }
    let sd_u = crate::math::sqrt(scenario.sigma2_u);
    let sd_e = crate::math::sqrt(scenario.sigma2_e);
    let (u, e) = match scenario.effect_dist {
        EffectDistribution::NormalSet1 => (
            draw_normal(0.0, sd_u, d, &mut rng)?,
            draw_normal(0.0, sd_e, n, &mut rng)?,
        ),
        EffectDistribution::Chisq1Set2 => {
            let mut u = draw_chisq1_standardized(d, &mut rng);
            for v in &mut u {
                *v *= sd_u;
            }
            let mut e = draw_chisq1_standardized(n, &mut rng);
            for v in &mut e {
                *v *= sd_e;
            }
            (u, e)
        }
    };

    let mut y = Vec::with_capacity(n);
    let mut row = 0usize;
    for (i, &n_i) in sizes.iter().enumerate() {
        for _ in 0..n_i {
            let x_row = &x[row * p..(row + 1) * p];
            let mean: f64 = x_row.iter().zip(&scenario.beta).map(|(a, b)| a * b).sum();
            y.push(mean + u[i] + e[row]);
            row += 1;
        }
    }
    ClusteredDataset::new(y, x, p, &sizes)
}

/// Everything one simulation contributes to the study: per-method interval
/// sets (None when the base fit, the engine, or interval computation failed).
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub sim_index: usize,
    pub fit_ok: bool,
    /// One entry per scenario method, aligned with `scenario.methods`.
    pub intervals: Vec<Option<Vec<PercentileCI>>>,
}

/// Run one simulation end to end: generate, fit, bootstrap every method,
/// compute percentile intervals.
pub fn simulate_one(scenario: &SimulationScenario, sim_index: usize) -> Result<SimOutcome> {
    let data = generate_dataset(scenario, sim_index)?;
    let fitted = match fit(&data, scenario.criterion, &FitOptions::default()) {
        Ok(f) => f,
        Err(_) => {
            return Ok(SimOutcome {
                sim_index,
                fit_ok: false,
                intervals: vec![None; scenario.methods.len()],
            });
        }
    };
    let engine_seed = derive_seed(scenario.seed, TAG_ENGINE, sim_index as u64);
    let mut intervals = Vec::with_capacity(scenario.methods.len());
    for &method in &scenario.methods {
        let config = EngineConfig {
            b: scenario.b,
            seed: engine_seed,
            plugins: vec![StatisticPlugin::lambda()],
            fit_opts: FitOptions::default(),
        };
        let cis = engines::run_method(method, &data, &fitted, &config)
            .and_then(|run| inference::run_percentile_cis(&run, scenario.level))
            .ok();
        intervals.push(cis);
    }
    Ok(SimOutcome { sim_index, fit_ok: true, intervals })
}

/// A completed study: the coverage grid plus bookkeeping.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub scenario_name: String,
    pub r: usize,
    pub b: usize,
    pub level: f64,
    pub targets: Vec<String>,
    pub truth: Vec<f64>,
    /// Method-major grid: for each scenario method, one report per target.
    pub reports: Vec<CoverageReport>,
    /// Simulations whose base model fit failed outright.
    pub fit_failures: usize,
}

impl StudyResult {
    /// The report for (method, target), if that pair was part of the study.
    pub fn report(&self, method: BootstrapMethodId, target: &str) -> Option<&CoverageReport> {
        self.reports.iter().find(|r| r.method == method && r.target == target)
    }
}

/// Deterministically fold per-simulation outcomes (any order) into the
/// coverage grid. Fails if more than [`MAX_FIT_FAILURE_FRACTION`] of the
/// base fits failed.
pub fn aggregate(scenario: &SimulationScenario, mut outcomes: Vec<SimOutcome>) -> Result<StudyResult> {
    scenario.validate()?;
    if outcomes.len() != scenario.r {
        return Err(Error::Invalid(format!(
            "expected {} simulation outcomes, got {}",
            scenario.r,
            outcomes.len()
        )));
    }
    outcomes.sort_by_key(|o| o.sim_index);
    let fit_failures = outcomes.iter().filter(|o| !o.fit_ok).count();
    if fit_failures as f64 > MAX_FIT_FAILURE_FRACTION * scenario.r as f64 {
        return Err(Error::StudyDegenerate { failed: fit_failures, total: scenario.r });
    }
    let targets = scenario.targets();
    let truth = scenario.truth_row();
    let mut reports = Vec::with_capacity(scenario.methods.len() * targets.len());
    for (m_idx, &method) in scenario.methods.iter().enumerate() {
        for (t_idx, target) in targets.iter().enumerate() {
            let per_sim: Vec<Option<PercentileCI>> = outcomes
                .iter()
                .map(|o| {
                    o.intervals[m_idx]
                        .as_ref()
                        .map(|cis| cis[t_idx].clone())
                })
                .collect();
            reports.push(inference::coverage(method, target, truth[t_idx], &per_sim));
        }
    }
    Ok(StudyResult {
        scenario_name: scenario.name.clone(),
        r: scenario.r,
        b: scenario.b,
        level: scenario.level,
        targets,
        truth,
        reports,
        fit_failures,
    })
}

/// Run the whole study serially.
pub fn run_study(scenario: &SimulationScenario) -> Result<StudyResult> {
    scenario.validate()?;
    let outcomes = (0..scenario.r)
        .map(|s| simulate_one(scenario, s))
        .collect::<Result<Vec<_>>>()?;
    aggregate(scenario, outcomes)
}

//! Thread-count resolution and the parallel execution drivers.
//!
//! Replicates and simulations are pure functions of their index and assembly
//! sorts by index, so every thread count produces identical numbers; the
//! pool only changes wall time.

use anyhow::{Context, Result};
use mixedboot_core::engines::{self, BootstrapMethodId, BootstrapRun, EngineConfig};
use mixedboot_core::simlab::{self, SimulationScenario, StudyResult};
use mixedboot_core::{ClusteredDataset, FitResult};
use rayon::prelude::*;

/// `--threads` wins, then `MIXEDBOOT_THREADS`, then the machine.
pub fn resolve_threads(flag: Option<usize>) -> usize {
    if let Some(t) = flag {
        return t.max(1);
    }
    if let Ok(raw) = std::env::var("MIXEDBOOT_THREADS") {
        if let Ok(t) = raw.trim().parse::<usize>() {
            if t >= 1 {
                return t;
            }
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("cannot build thread pool")
}

/// Run one bootstrap method with replicates spread across the pool.
pub fn run_bootstrap(
    pool: &rayon::ThreadPool,
    method: BootstrapMethodId,
    data: &ClusteredDataset,
    fit: &FitResult,
    config: &EngineConfig,
) -> mixedboot_core::Result<BootstrapRun> {
    let prepared = engines::prepare(method, data, fit, config)?;
    let rows: Vec<_> =
        pool.install(|| (0..config.b).into_par_iter().map(|i| prepared.replicate(i)).collect());
    prepared.assemble(rows)
}

/// Run a coverage study with simulations spread across the pool.
pub fn run_study(
    pool: &rayon::ThreadPool,
    scenario: &SimulationScenario,
) -> mixedboot_core::Result<StudyResult> {
    scenario.validate()?;
    let outcomes: mixedboot_core::Result<Vec<_>> = pool.install(|| {
        (0..scenario.r).into_par_iter().map(|s| simlab::simulate_one(scenario, s)).collect()
    });
    simlab::aggregate(scenario, outcomes?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixedboot_core::fit::FitOptions;
    use mixedboot_core::simlab::{generate_dataset, EffectDistribution, SizeScheme};
    use mixedboot_core::Criterion;

    fn scenario() -> SimulationScenario {
        SimulationScenario {
            name: "par".into(),
            d: 10,
            size_scheme: SizeScheme::UnbalancedProfile(vec![1, 2, 3, 4, 5, 2, 3, 4, 5, 6]),
            beta: vec![1.0, 2.0],
            sigma2_u: 0.1,
            sigma2_e: 0.3,
            effect_dist: EffectDistribution::NormalSet1,
            r: 4,
            b: 30,
            level: 0.9,
            methods: vec![BootstrapMethodId::Preb1, BootstrapMethodId::Cluster],
            seed: 55,
            criterion: Criterion::Reml,
        }
    }

    #[test]
    fn thread_count_does_not_change_bootstrap_output() {
        let s = scenario();
        let data = generate_dataset(&s, 0).unwrap();
        let fitted = mixedboot_core::fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        let config = EngineConfig::new(40, 99);
        let serial = build_pool(1).unwrap();
        let wide = build_pool(3).unwrap();
        let a =
            run_bootstrap(&serial, BootstrapMethodId::Preb1, &data, &fitted, &config).unwrap();
        let b = run_bootstrap(&wide, BootstrapMethodId::Preb1, &data, &fitted, &config).unwrap();
        let bits = |run: &BootstrapRun| {
            run.theta_star.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn thread_count_does_not_change_study_output() {
        let s = scenario();
        let serial = build_pool(1).unwrap();
        let wide = build_pool(4).unwrap();
        let a = run_study(&serial, &s).unwrap();
        let b = run_study(&wide, &s).unwrap();
        for (ra, rb) in a.reports.iter().zip(&b.reports) {
            assert_eq!(ra.coverage.to_bits(), rb.coverage.to_bits());
            assert_eq!(ra.r_effective, rb.r_effective);
        }
    }

    #[test]
    fn thread_resolution_precedence() {
        assert_eq!(resolve_threads(Some(5)), 5);
        assert_eq!(resolve_threads(Some(0)), 1);
        std::env::set_var("MIXEDBOOT_THREADS", "2");
        assert_eq!(resolve_threads(None), 2);
        assert_eq!(resolve_threads(Some(7)), 7);
        std::env::remove_var("MIXEDBOOT_THREADS");
        assert!(resolve_threads(None) >= 1);
    }
}

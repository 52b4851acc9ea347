//! Engine equivalences and a straight-line replicate oracle.
//!
//! On balanced data the size-weighted, modified, and uncentered reflated
//! bootstraps are one algorithm in three notations; with shared seeds their
//! replicate matrices must agree bit for bit. A from-scratch transcription of
//! the synthetic-response recipe must reproduce engine replicates exactly,
//! and every successful ML replicate must sit at a stationary point of its
//! own replicate likelihood.

use mixedboot_core::engines::{
    prepare, run_method, BootstrapMethodId, EngineConfig, ReplicateDraws, ReplicateStatus,
};
use mixedboot_core::fit::FitOptions;
use mixedboot_core::reflate::preb1_pools;
use mixedboot_core::resample::{CumulativeWeights, RandomSource};
use mixedboot_core::simlab::{generate_dataset, EffectDistribution, SimulationScenario, SizeScheme};
use mixedboot_core::{fit, ClusteredDataset, Criterion, FitResult, ThetaVector};

fn study_data(scheme: SizeScheme, d: usize, seed: u64) -> (ClusteredDataset, FitResult) {
    let scenario = SimulationScenario {
        name: "equiv".into(),
        d,
        size_scheme: scheme,
        beta: vec![1.0, 2.0],
        sigma2_u: 0.04,
        sigma2_e: 0.16,
        effect_dist: EffectDistribution::NormalSet1,
        r: 1,
        b: 100,
        level: 0.95,
        methods: vec![],
        seed,
        criterion: Criterion::Reml,
    };
    let data = generate_dataset(&scenario, 0).unwrap();
    let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
    (data, fitted)
}

fn theta_bits(run: &mixedboot_core::engines::BootstrapRun) -> Vec<u64> {
    run.theta_star.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn balanced_engines_coincide_bit_for_bit() {
    let (data, fitted) = study_data(SizeScheme::Balanced(7), 30, 2024);
    let config = EngineConfig::new(40, 555);
    let preb1 = run_method(BootstrapMethodId::Preb1, &data, &fitted, &config).unwrap();
    let mreb1 = run_method(BootstrapMethodId::Mreb1, &data, &fitted, &config).unwrap();
    let reb1 = run_method(BootstrapMethodId::Reb1, &data, &fitted, &config).unwrap();
    assert_eq!(theta_bits(&preb1), theta_bits(&mreb1));
    assert_eq!(theta_bits(&preb1), theta_bits(&reb1));

    let preb0 = run_method(BootstrapMethodId::Preb0, &data, &fitted, &config).unwrap();
    let reb0 = run_method(BootstrapMethodId::Reb0, &data, &fitted, &config).unwrap();
    assert_eq!(theta_bits(&preb0), theta_bits(&reb0));
}

#[test]
fn unbalanced_engines_differ() {
    let profile = vec![1, 1, 2, 2, 3, 4, 5, 6, 8, 10];
    let (data, fitted) = study_data(SizeScheme::UnbalancedProfile(profile), 10, 2025);
    let config = EngineConfig::new(30, 777);
    let preb1 = run_method(BootstrapMethodId::Preb1, &data, &fitted, &config).unwrap();
    let mreb1 = run_method(BootstrapMethodId::Mreb1, &data, &fitted, &config).unwrap();
    let reb1 = run_method(BootstrapMethodId::Reb1, &data, &fitted, &config).unwrap();
    assert_ne!(theta_bits(&preb1), theta_bits(&mreb1));
    assert_ne!(theta_bits(&preb1), theta_bits(&reb1));
}

/// Re-derive two replicates of the size-weighted reflated bootstrap from its
/// published recipe: draw cluster effects uniformly from the reflated pool,
/// pick one size-weighted donor per cluster, draw that donor's residuals with
/// replacement, add everything to the fitted means, refit warm-started at the
/// original estimate. Must match the engine exactly.
#[test]
fn straight_line_transcription_reproduces_engine_replicates() {
    let (data, fitted) = study_data(SizeScheme::UnbalancedProfile(vec![2, 3, 1, 5, 4, 6, 3, 2, 7, 3]), 10, 99);
    let seed = 1234_u64;
    let b = 4_usize;
    let config = EngineConfig::new(b, seed);
    let run = run_method(BootstrapMethodId::Preb1, &data, &fitted, &config).unwrap();

    let pools = preb1_pools(&fitted, &data).unwrap();
    let d = data.n_clusters();
    let sizes_f: Vec<f64> = data.cluster_sizes().iter().map(|&n| n as f64).collect();
    let u_table = CumulativeWeights::equal(d).unwrap();
    let donor_table = CumulativeWeights::proportional(&sizes_f).unwrap();
    let pool_tables: Vec<CumulativeWeights> =
        pools.e_pools.iter().map(|p| CumulativeWeights::equal(p.len()).unwrap()).collect();
    let fitted_mean: Vec<f64> = (0..data.n_obs())
        .map(|j| {
            data.x_row(j).iter().zip(&fitted.theta_hat.beta).map(|(a, c)| a * c).sum()
        })
        .collect();

    for b_index in 0..b {
        let mut rng = RandomSource::new(seed, b_index as u64).rng();
        let u_star: Vec<f64> =
            u_table.draw(d, &mut rng).into_iter().map(|k| pools.u_pool[k]).collect();
        let donors = donor_table.draw(d, &mut rng);
        let mut y_star = Vec::with_capacity(data.n_obs());
        for i in 0..d {
            let pool = &pools.e_pools[donors[i]];
            let picks = pool_tables[donors[i]].draw(data.cluster_size(i), &mut rng);
            for (offset, k) in data.cluster_rows(i).zip(picks) {
                y_star.push(fitted_mean[offset] + u_star[i] + pool[k]);
            }
        }
        let replicate_data = data.with_responses(y_star).unwrap();
        let opts = FitOptions {
            start_hint: Some((fitted.theta_hat.sigma2_u, fitted.theta_hat.sigma2_e)),
            multi_start: false,
            ..FitOptions::default()
        };
        let refit = fit(&replicate_data, Criterion::Reml, &opts).unwrap();
        let row = run.theta_row(b_index);
        for (mine, engine) in refit.theta_hat.to_row().iter().zip(row) {
            assert_eq!(mine.to_bits(), engine.to_bits(), "replicate {b_index} differs");
        }
    }
}

/// The drawn responses exposed for audit must be exactly what the engine
/// refits: feeding them back through the public fitting entry point with the
/// engine's warm-start settings reproduces each replicate row, and at every
/// interior ML replicate the score of the replicate data vanishes.
#[test]
fn ml_replicates_are_stationary_points_of_their_own_data() {
    let (data, _) = study_data(SizeScheme::Balanced(5), 12, 4242);
    let ml_fit = fit(&data, Criterion::Ml, &FitOptions::default()).unwrap();
    let config = EngineConfig::new(30, 9);
    let prepared = prepare(BootstrapMethodId::Preb1, &data, &ml_fit, &config).unwrap();
    let rows: Vec<_> = (0..30).map(|i| prepared.replicate(i)).collect();
    let run = prepared.assemble(rows).unwrap();

    let mut checked = 0;
    for b_index in 0..30 {
        if checked == 5 {
            break;
        }
        if run.status[b_index] != ReplicateStatus::Ok {
            continue;
        }
        let ReplicateDraws::Synthetic { y_star, .. } = prepared.replicate_draws(b_index) else {
            panic!("synthetic engine must produce synthetic draws");
        };
        let replicate_data = data.with_responses(y_star).unwrap();
        let row = run.theta_row(b_index);
        let p = data.p();
        let theta = ThetaVector::new(row[..p].to_vec(), row[p], row[p + 1]).unwrap();
        let score = mixedboot_core::fit::score_at(&replicate_data, &theta).unwrap();
        let norm = score.iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(norm <= 1e-5, "replicate {b_index} score norm {norm}");
        checked += 1;
    }
    assert!(checked >= 3, "too few interior replicates to audit");
}

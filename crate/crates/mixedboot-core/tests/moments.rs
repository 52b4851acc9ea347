//! Enumerated bootstrap-moment identities on fitted datasets.
//!
//! For the reflated pool constructions the exact (enumerated, not simulated)
//! moments of a single bootstrap draw must reproduce the fitted variance
//! components; the older uncentered construction provably fails the residual
//! second-moment identity once cluster sizes and residual spreads are
//! correlated, and the test pins that failure down on a constructed instance.

use mixedboot_core::fit::FitOptions;
use mixedboot_core::reflate::{cgr_pools, enumerated_moments, mreb1_pools, preb1_pools, reb1_pools};
use mixedboot_core::simlab::{generate_dataset, EffectDistribution, SimulationScenario, SizeScheme};
use mixedboot_core::{fit, ClusteredDataset, Criterion};
use rand::Rng;

const TOL: f64 = 1e-10;

fn fitted_instances() -> Vec<(ClusteredDataset, mixedboot_core::FitResult)> {
    let shapes = [
        SizeScheme::Balanced(5),
        SizeScheme::UnbalancedProfile(vec![1, 2, 2, 3, 4, 5, 6, 7, 8, 10]),
        SizeScheme::Balanced(3),
        SizeScheme::UnbalancedProfile(vec![1, 1, 2, 3, 5, 8, 13, 9, 4, 2]),
    ];
    let dists = [EffectDistribution::NormalSet1, EffectDistribution::Chisq1Set2];
    let mut out = Vec::new();
    for k in 0..25 {
        let scenario = SimulationScenario {
            name: "moments".into(),
            d: 10,
            size_scheme: shapes[k % shapes.len()].clone(),
            beta: vec![1.0, 2.0],
            sigma2_u: 0.2,
            sigma2_e: 0.4,
            effect_dist: dists[k % dists.len()],
            r: 1,
            b: 100,
            level: 0.95,
            methods: vec![],
            seed: 500 + k as u64,
            criterion: Criterion::Reml,
        };
        let data = generate_dataset(&scenario, 0).unwrap();
        let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
        out.push((data, fitted));
    }
    out
}

#[test]
fn reflated_pools_reproduce_fitted_components_exactly() {
    for (k, (data, fitted)) in fitted_instances().iter().enumerate() {
        let s2u = fitted.theta_hat.sigma2_u;
        let s2e = fitted.theta_hat.sigma2_e;
        for (name, pools) in [
            ("size-weighted", preb1_pools(fitted, data).unwrap()),
            ("modified", mreb1_pools(fitted, data).unwrap()),
        ] {
            let m = enumerated_moments(&pools);
            assert!(m.u_mean.abs() <= TOL, "{name} #{k}: E*(u*) = {}", m.u_mean);
            assert!(
                (m.u_meansq - s2u).abs() <= TOL,
                "{name} #{k}: E*(u*^2) = {} vs {s2u}",
                m.u_meansq
            );
            assert!(m.e_mean.abs() <= TOL, "{name} #{k}: E*(e*) = {}", m.e_mean);
            assert!(
                (m.e_meansq - s2e).abs() <= TOL,
                "{name} #{k}: E*(e*^2) = {} vs {s2e}",
                m.e_meansq
            );
        }
    }
}

#[test]
fn shrunken_predictor_pools_match_second_moments() {
    for (data, fitted) in &fitted_instances() {
        if fitted.theta_hat.sigma2_u == 0.0 {
            continue;
        }
        let pools = cgr_pools(fitted, data).unwrap();
        let m = enumerated_moments(&pools);
        assert!((m.u_meansq - fitted.theta_hat.sigma2_u).abs() <= TOL);
        assert!((m.e_meansq - fitted.theta_hat.sigma2_e).abs() <= TOL);
    }
}

/// Unbalanced data whose within-cluster spread is tied to cluster size: the
/// two big clusters are quiet, the two small ones noisy. The uncentered
/// uniform-donor construction averages cluster mean-squares with equal
/// weights but rescales with size weights, so its residual second moment
/// cannot match the fitted component here.
fn heteroscedastic_instance() -> (ClusteredDataset, mixedboot_core::FitResult) {
    let sizes = [2usize, 2, 12, 12];
    let mut rng = mixedboot_core::resample::RandomSource::new(31_337, 0).rng();
    let offsets = [3.0, -3.0, 1.5, -1.5];
    let mut y = Vec::new();
    let mut x = Vec::new();
    for (i, &n_i) in sizes.iter().enumerate() {
        let sd = if n_i <= 2 { 1.2 } else { 0.1 };
        for _ in 0..n_i {
            let z: f64 = rng.random::<f64>() - 0.5;
            // Sum of 4 centered uniforms: symmetric, finite support.
            let noise: f64 = (0..4).map(|_| rng.random::<f64>() - 0.5).sum();
            y.push(offsets[i] + sd * noise);
            x.push(1.0);
            x.push(z);
        }
    }
    let data = ClusteredDataset::new(y, x, 2, &sizes).unwrap();
    let fitted = fit(&data, Criterion::Reml, &FitOptions::default()).unwrap();
    assert!(fitted.theta_hat.sigma2_u > 0.0, "instance must fit interior");
    (data, fitted)
}

#[test]
fn uncentered_construction_breaks_residual_second_moment_when_unbalanced() {
    let (data, fitted) = heteroscedastic_instance();
    let s2e = fitted.theta_hat.sigma2_e;

    let older = enumerated_moments(&reb1_pools(&fitted, &data).unwrap());
    let violation = (older.e_meansq - s2e).abs() / s2e;
    assert!(
        violation > 1e-3,
        "expected a material residual moment violation, got {violation:.2e}"
    );

    // The reflated constructions stay exact on the very same fit.
    for pools in [preb1_pools(&fitted, &data).unwrap(), mreb1_pools(&fitted, &data).unwrap()] {
        let m = enumerated_moments(&pools);
        assert!((m.e_meansq - s2e).abs() <= TOL);
    }
}

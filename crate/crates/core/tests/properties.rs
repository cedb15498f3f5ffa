mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sae_core::spatial::{SarStructure, SpatialParams};
use sae_core::{mse, predict, variance, Dataset, DatasetOptions, EstimationMethod, VarianceMethod};

const METHODS: [EstimationMethod; 4] =
    [EstimationMethod::Ml, EstimationMethod::Reml, EstimationMethod::Moments, EstimationMethod::FhIterative];

fn sigma_hat(ds: &Dataset, m: EstimationMethod) -> f64 {
    variance::estimate(ds, &VarianceMethod::new(m)).unwrap().params.sigma_u2().unwrap()
}

fn permuted(ds: &Dataset, perm: &[usize]) -> Dataset {
    let recs = perm.iter().map(|&i| ds.records()[i].clone()).collect();
    Dataset::new(recs, DatasetOptions::default()).unwrap()
}

fn instance(seed: u64, d: usize) -> Dataset {
    let mut r = rng(seed);
    random_dataset(&mut r, d, 1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn basic_estimators_translation_invariant(seed in any::<u64>(), d in 6usize..25, a0 in -5.0f64..5.0, a1 in -5.0f64..5.0) {
        let ds = instance(seed, d);
        let shift = ds.x() * DVector::from_vec(vec![a0, a1]);
        let moved = ds.with_response(&(ds.y() - shift)).unwrap();
        let flipped = ds.with_response(&(-ds.y())).unwrap();
        for m in METHODS {
            let s = sigma_hat(&ds, m);
            prop_assert!((sigma_hat(&moved, m) - s).abs() <= 1e-6 * (1.0 + s), "{m}");
            prop_assert!((sigma_hat(&flipped, m) - s).abs() <= 1e-6 * (1.0 + s), "{m}");
        }
    }

    #[test]
    fn estimators_nonnegative_and_permutation_invariant(seed in any::<u64>(), d in 6usize..20) {
        let ds = instance(seed, d);
        let mut perm: Vec<usize> = (0..d).collect();
        perm.reverse();
        perm.rotate_left((seed % d as u64) as usize);
        let pds = permuted(&ds, &perm);
        for m in METHODS {
            let s = sigma_hat(&ds, m);
            prop_assert!(s >= 0.0);
            prop_assert!((sigma_hat(&pds, m) - s).abs() <= 1e-7 * (1.0 + s), "{m}");
        }
    }

    #[test]
    fn eblup_convex_and_equivariant(seed in any::<u64>(), d in 6usize..20) {
        let ds = instance(seed, d);
        let fit = variance::estimate(&ds, &VarianceMethod::new(EstimationMethod::Reml)).unwrap();
        let t = predict::eblup(&ds, &fit).unwrap();
        let syn = ds.x() * &fit.beta;
        for (i, row) in t.rows.iter().enumerate() {
            let (lo, hi) = (ds.y()[i].min(syn[i]), ds.y()[i].max(syn[i]));
            prop_assert!(row.predictor >= lo - 1e-12 && row.predictor <= hi + 1e-12);
            let g = row.gamma.unwrap();
            prop_assert!((0.0..=1.0).contains(&g));
        }
        let perm: Vec<usize> = (0..d).rev().collect();
        let pt = predict::eblup(&permuted(&ds, &perm), &fit).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            prop_assert_eq!(&pt.rows[k].area_id, &t.rows[i].area_id);
            prop_assert!((pt.rows[k].predictor - t.rows[i].predictor).abs() < 1e-12);
        }
    }

    #[test]
    fn shrinkage_is_monotone_in_sampling_variance(s in 0.01f64..5.0, d in 6usize..20) {
        let sig: Vec<f64> = (0..d).map(|i| 0.1 + 0.3 * i as f64).collect();
        let gam: Vec<f64> = sig.iter().map(|&v| predict::gamma(s, v).unwrap()).collect();
        prop_assert!(gam.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn analytic_mse_orderings(seed in any::<u64>(), d in 6usize..25) {
        let ds = instance(seed, d);
        let fit = variance::estimate(&ds, &VarianceMethod::new(EstimationMethod::FhIterative)).unwrap();
        let pr = mse::mse_prasad_rao(&ds, &fit).unwrap();
        let da = mse::mse_datta(&ds, &fit).unwrap();
        for i in 0..d {
            prop_assert!(pr.g1[i] <= ds.sigma2()[i]);
            prop_assert!(pr.mse[i] >= pr.g1[i] + pr.g2[i]);
            prop_assert!(da.mse[i] <= pr.mse[i]);
            prop_assert!(da.g4[i] >= 0.0);
        }
    }

    #[test]
    fn gls_scalar_weights_is_ols(seed in any::<u64>(), d in 6usize..25, c in 0.1f64..10.0) {
        let ds = instance(seed, d);
        let g = sae_core::gls_beta(&ds, &(DMatrix::identity(d, d) * c)).unwrap();
        let o = sae_core::ols_beta(&ds).unwrap();
        prop_assert!(rel_vec(&g.beta, &o.beta) < 1e-10);
        prop_assert!((o.leverages.sum() - 2.0).abs() < 1e-12);
        prop_assert!(o.leverages.iter().all(|&h| h > 0.0 && h <= 1.0 + 1e-12));
        let v = sae_core::assemble_v(&ds, 0.4).unwrap();
        let fit = sae_core::gls_beta(&ds, &v).unwrap();
        let ortho = ds.x().transpose() * gj_inverse(&v) * (ds.y() - ds.x() * &fit.beta);
        prop_assert!(ortho.norm() <= 1e-8 * (1.0 + ds.y().norm()));
    }

    #[test]
    fn spatial_nests_basic_at_rho_zero(seed in any::<u64>(), d in 6usize..16, s in 0.05f64..3.0) {
        let ds = instance(seed, d);
        let w = sae_core::two_step_neighbors(ds.records(), 3, 2, Some("altitude")).unwrap();
        let sar = SarStructure::new(&w).unwrap();
        let phi = SpatialParams::new(s, 0.0);
        let (g1s, g2s) = mse::g1_g2_spatial(&ds, &sar, phi).unwrap();
        let g2b = mse::g2_basic(&ds, s).unwrap();
        for i in 0..d {
            let basic = mse::g1_basic(s, ds.sigma2()[i]) + g2b[i];
            prop_assert!((g1s[i] + g2s[i] - basic).abs() <= 1e-10 * (1.0 + basic));
        }
        let sys = sae_core::spatial::SarSystem::new(&ds, &sar, phi).unwrap();
        let (beta, theta) = sys.predict(ds.y());
        let fit = sae_core::FitResult {
            beta,
            beta_covariance: sys.beta_covariance().clone(),
            params: sae_core::VarianceParams::Basic { sigma_u2: s },
            log_likelihood: 0.0,
            method: EstimationMethod::Reml,
            converged: true,
            iterations: 0,
            warnings: vec![],
        };
        let e = predict::eblup(&ds, &fit).unwrap().predictors();
        prop_assert!((e - theta).amax() < 1e-10);
    }

    #[test]
    fn proximity_rows_are_stochastic(seed in any::<u64>(), d in 5usize..25, k1 in 1usize..5, k2s in 0usize..5) {
        let mut r = rng(seed);
        let areas = random_areas(&mut r, d, 0);
        let k1 = k1.min(d - 1);
        let k2 = 1 + k2s % k1;
        let w = sae_core::two_step_neighbors(&areas, k1, k2, Some("altitude")).unwrap();
        for i in 0..d {
            prop_assert_eq!(w.weights[(i, i)], 0.0);
            prop_assert!((w.weights.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert_eq!(w.neighbor_lists[i].len(), k2);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn spatial_reml_translation_invariant(seed in any::<u64>(), a0 in -3.0f64..3.0, a1 in -3.0f64..3.0) {
        use sae_core::sim::{NeighborSpec, Sigma2Law, SimDesign, SimLayout};
        let design = SimDesign::spatial(
            20, 1.0, 0.5, Sigma2Law::Uniform { lo: 0.3, hi: 1.0 },
            NeighborSpec::TwoStep { k1: 4, k2: 2, similarity: Some("altitude".into()) }, seed,
        );
        let layout = SimLayout::new(design).unwrap();
        let ds = layout.draw(0).unwrap().dataset;
        let sar = layout.sar().unwrap();
        let cfg = sae_core::SpatialConfig::new(EstimationMethod::Reml);
        let fit = sae_core::estimate_spatial(&ds, sar, &cfg).unwrap();
        prop_assume!(fit.converged);
        let base = fit.params.spatial().unwrap();
        let shift = ds.x() * DVector::from_vec(vec![a0, a1]);
        for y in [ds.y() - shift, -ds.y()] {
            let p = sae_core::estimate_spatial(&ds.with_response(&y).unwrap(), sar, &cfg).unwrap().params.spatial().unwrap();
            prop_assert!((p.sigma_eps2 - base.sigma_eps2).abs() <= 1e-6 * (1.0 + base.sigma_eps2), "{p:?} vs {base:?}");
            prop_assert!((p.rho - base.rho).abs() <= 1e-6, "{p:?} vs {base:?}");
        }
    }
}

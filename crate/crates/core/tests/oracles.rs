//! Library routines against dense brute-force references on small random
//! instances.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sae_core::spatial::{self, Route, SarStructure, SarSystem, SpatialParams};
use sae_core::{mse, predict, variance, Dataset, EstimationMethod, FitResult, VarianceParams};

const INSTANCES: u64 = 60;

fn random_sar(r: &mut rand_chacha::ChaCha8Rng, ds: &Dataset) -> SarStructure {
    let k1 = r.random_range(2..=4.min(ds.areas() - 1));
    let k2 = r.random_range(1..=k1);
    let w = sae_core::two_step_neighbors(ds.records(), k1, k2, Some("altitude")).unwrap();
    SarStructure::new(&w).unwrap()
}

fn random_rho(r: &mut rand_chacha::ChaCha8Rng, sar: &SarStructure) -> f64 {
    let (lo, hi) = sar.search_interval();
    0.9 * r.random_range(lo..hi)
}

#[test]
fn gls_matches_dense_inverse() {
    for seed in 0..INSTANCES {
        let mut r = rng(seed);
        let d = r.random_range(5..=12);
        let extra = r.random_range(0..3);
        let ds = random_dataset(&mut r, d, extra);
        let b = DMatrix::from_fn(d, d, |_, _| r.random_range(-1.0..1.0));
        let v = &b * b.transpose() + DMatrix::identity(d, d);
        let fit = sae_core::gls_beta(&ds, &v).unwrap();
        let (beta, cov) = gls(ds.x(), ds.y(), &v);
        assert!(rel_vec(&fit.beta, &beta) < 1e-10, "seed {seed}");
        assert!(rel_mat(&fit.beta_cov, &cov) < 1e-10, "seed {seed}");
    }
}

#[test]
fn likelihoods_match_dense_evaluation() {
    for seed in 0..INSTANCES {
        let mut r = rng(100 + seed);
        let d = r.random_range(5..=12);
        let extra = r.random_range(0..3);
        let ds = random_dataset(&mut r, d, extra);
        let s = r.random_range(0.0..3.0);
        let v = sae_core::assemble_v(&ds, s).unwrap();
        let beta = DVector::from_fn(ds.n_params(), |_, _| r.random_range(-1.0..1.0));
        let ml = variance::loglik_ml(&ds, s, &beta).unwrap();
        assert!(rel_err(ml, loglik_ml(ds.x(), ds.y(), &v, &beta)) < 1e-8, "seed {seed}");
        let reml = variance::loglik_reml(&ds, s).unwrap();
        assert!(rel_err(reml, loglik_reml(ds.x(), ds.y(), &v)) < 1e-8, "seed {seed}");
    }
}

#[test]
fn reml_in_column_space() {
    let mut r = rng(7);
    let ds = random_dataset(&mut r, 10, 2);
    let a = DVector::from_vec(vec![0.3, -1.0, 2.0]);
    let y = ds.x() * &a;
    let ds = ds.with_response(&y).unwrap();
    let v = sae_core::assemble_v(&ds, 0.7).unwrap();
    let info = ds.x().transpose() * gj_inverse(&v) * ds.x();
    let expected = -0.5 * log_abs_det(&v) - 0.5 * log_abs_det(&info);
    assert!(rel_err(variance::loglik_reml(&ds, 0.7).unwrap(), expected) < 1e-10);
}

#[test]
fn sar_covariance_matches_explicit_inverse() {
    for seed in 0..INSTANCES {
        let mut r = rng(200 + seed);
        let d = r.random_range(5..=12);
        let ds = random_dataset(&mut r, d, 1);
        let sar = random_sar(&mut r, &ds);
        let rho = random_rho(&mut r, &sar);
        let s2 = r.random_range(0.1..3.0);
        let (omega, g) = spatial::sar_covariance(&sar, SpatialParams::new(s2, rho), ds.sigma2()).unwrap();
        let (o2, g2) = sar_cov(sar.weights(), rho, s2, ds.sigma2());
        assert!(rel_mat(&omega, &o2) < 1e-10, "seed {seed}");
        assert!(rel_mat(&g, &g2) < 1e-10, "seed {seed}");
    }
}

#[test]
fn two_cycle_hand_inverse() {
    let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
    let ids = vec!["a".to_string(), "b".to_string()];
    let sar = SarStructure::new(&sae_core::ProximityMatrix::from_weights(w, &ids).unwrap()).unwrap();
    let (omega, _) = spatial::sar_covariance(&sar, SpatialParams::new(1.0, 0.5), &DVector::from_vec(vec![1.0, 1.0])).unwrap();
    let hand = DMatrix::from_row_slice(2, 2, &[1.25, 1.0, 1.0, 1.25]) / 0.5625;
    assert!(rel_mat(&omega, &hand) < 1e-12);
}

#[test]
fn spatial_likelihood_matches_dense() {
    for seed in 0..INSTANCES {
        let mut r = rng(300 + seed);
        let d = r.random_range(6..=12);
        let extra = r.random_range(0..2);
        let ds = random_dataset(&mut r, d, extra);
        let sar = random_sar(&mut r, &ds);
        let phi = SpatialParams::new(r.random_range(0.05..2.0), random_rho(&mut r, &sar));
        let (_, g) = sar_cov(sar.weights(), phi.rho, phi.sigma_eps2, ds.sigma2());
        let beta = DVector::from_fn(ds.n_params(), |_, _| r.random_range(-1.0..1.0));
        let ml = spatial::spatial_loglik_ml(&ds, &sar, phi, &beta).unwrap();
        assert!(rel_err(ml, loglik_ml(ds.x(), ds.y(), &g, &beta)) < 1e-8, "seed {seed}");
        let reml = spatial::spatial_loglik_reml(&ds, &sar, phi).unwrap();
        assert!(rel_err(reml, loglik_reml(ds.x(), ds.y(), &g)) < 1e-8, "seed {seed}");
        let dense = spatial::evaluate(&ds, &sar, phi, Route::Dense).unwrap().reml();
        assert!(rel_err(dense, reml) < 1e-9, "seed {seed}");
    }
}

#[test]
fn two_step_matches_exhaustive_search() {
    for seed in 0..INSTANCES {
        let mut r = rng(400 + seed);
        let d = r.random_range(4..=12);
        let areas = random_areas(&mut r, d, 0);
        let k1 = r.random_range(1..d);
        let k2 = r.random_range(1..=k1);
        let var = if r.random_bool(0.7) { Some("altitude") } else { None };
        let w = sae_core::two_step_neighbors(&areas, k1, k2, var).unwrap();
        assert_eq!(w.weights, two_step(&areas, k1, k2, var), "seed {seed}");
    }
}

#[test]
fn g4_matches_direct_summation() {
    for seed in 0..INSTANCES {
        let mut r = rng(500 + seed);
        let d = r.random_range(4..=12);
        let ds = random_dataset(&mut r, d, 0);
        let s = r.random_range(0.01..2.0);
        let g4 = mse::g4_datta(&ds, s).unwrap();
        let sig = ds.sigma2();
        let mut a = 0.0;
        let mut b = 0.0;
        for k in 0..d {
            a += 1.0 / ((sig[k] + s) * (sig[k] + s));
            b += 1.0 / (sig[k] + s);
        }
        for i in 0..d {
            let one_minus_gamma = sig[i] / (sig[i] + s);
            let expect = 2.0 * one_minus_gamma.powi(2) * (d as f64 * a - b * b) / b.powi(3);
            assert!(rel_err(g4[i], expect) < 1e-10, "seed {seed}");
        }
    }
}

#[test]
fn g2_basic_matches_dense() {
    for seed in 0..INSTANCES {
        let mut r = rng(600 + seed);
        let d = r.random_range(4..=12);
        let extra = r.random_range(0..2);
        let ds = random_dataset(&mut r, d, extra);
        let s = r.random_range(0.0..2.0);
        let v = sae_core::assemble_v(&ds, s).unwrap();
        let cov = gj_inverse(&(ds.x().transpose() * gj_inverse(&v) * ds.x()));
        let g2 = mse::g2_basic(&ds, s).unwrap();
        for i in 0..d {
            let q = (ds.x().row(i) * &cov * ds.x().row(i).transpose())[(0, 0)];
            let w = ds.sigma2()[i] / (ds.sigma2()[i] + s);
            assert!(rel_err(g2[i], w * w * q) < 1e-10, "seed {seed}");
        }
    }
}

fn basic_fit(ds: &Dataset, s: f64) -> FitResult {
    let v = sae_core::assemble_v(ds, s).unwrap();
    let g = sae_core::gls_beta(ds, &v).unwrap();
    FitResult {
        beta: g.beta,
        beta_covariance: g.beta_cov,
        params: VarianceParams::Basic { sigma_u2: s },
        log_likelihood: 0.0,
        method: EstimationMethod::Reml,
        converged: true,
        iterations: 0,
        warnings: vec![],
    }
}

#[test]
fn eblup_forms_agree() {
    for seed in 0..INSTANCES {
        let mut r = rng(700 + seed);
        let d = r.random_range(4..=12);
        let ds = random_dataset(&mut r, d, 1);
        let s = r.random_range(0.01..2.0);
        let fit = basic_fit(&ds, s);
        let table = predict::eblup(&ds, &fit).unwrap();
        // beta + u with u = sigma_u2 V^-1 (Y - X beta)
        let v = sae_core::assemble_v(&ds, s).unwrap();
        let (beta, _) = gls(ds.x(), ds.y(), &v);
        let u = gj_inverse(&v) * (ds.y() - ds.x() * &beta) * s;
        let theta = ds.x() * &beta + u;
        assert!(rel_vec(&table.predictors(), &theta) < 1e-10, "seed {seed}");
    }
}

#[test]
fn sblup_and_spatial_terms_match_dense() {
    for seed in 0..INSTANCES {
        let mut r = rng(800 + seed);
        let d = r.random_range(6..=12);
        let ds = random_dataset(&mut r, d, 1);
        let sar = random_sar(&mut r, &ds);
        let phi = SpatialParams::new(r.random_range(0.05..2.0), random_rho(&mut r, &sar));
        let (omega, g) = sar_cov(sar.weights(), phi.rho, phi.sigma_eps2, ds.sigma2());
        let (beta, u, theta, g1, g2) = sblup(ds.x(), ds.y(), &omega, &g);
        let sys = SarSystem::new(&ds, &sar, phi).unwrap();
        let (b2, t2) = sys.predict(ds.y());
        assert!(rel_vec(&b2, &beta) < 1e-10, "seed {seed}");
        assert!(rel_vec(&t2, &theta) < 1e-10, "seed {seed}");
        assert!(rel_vec(&sys.random_effects(ds.y(), &b2), &u) < 1e-9, "seed {seed}");
        let (l1, l2) = mse::g1_g2_spatial(&ds, &sar, phi).unwrap();
        assert!(rel_vec(&l1, &g1) < 1e-9, "seed {seed}");
        assert!(rel_vec(&l2, &g2) < 1e-9, "seed {seed}");
    }
}

#[test]
fn interval_grid_is_nonsingular() {
    let mut r = rng(900);
    let areas = random_areas(&mut r, 30, 0);
    let w = sae_core::two_step_neighbors(&areas, 5, 3, Some("altitude")).unwrap();
    let sar = SarStructure::new(&w).unwrap();
    let (lo, hi) = sar.validity_interval();
    assert_eq!(hi, 1.0);
    for k in 1..40 {
        let rho = lo + (hi - lo) * k as f64 / 40.0;
        let a = DMatrix::identity(30, 30) - sar.weights() * rho;
        assert!(log_abs_det(&a).is_finite() && log_abs_det(&a) > -30.0, "rho {rho}");
        assert!((sar.log_abs_det_a(rho) - log_abs_det(&a)).abs() < 1e-8);
    }
    let a = DMatrix::identity(30, 30) - sar.weights();
    assert!(log_abs_det(&a) < -25.0);
    assert!(sar.check_rho(1.0).is_err());
}

#[test]
fn moments_hand_example() {
    let ds = Dataset::from_arrays(DMatrix::from_element(3, 1, 1.0), vec![0.0, 0.0, 3.0], vec![1.0; 3]).unwrap();
    // OLS mean 1, squared residuals 1 + 1 + 4, leverages 1/3
    let hand = (6.0 - 3.0 * (1.0 - 1.0 / 3.0)) / (3.0 - 1.0);
    assert_eq!(variance::moments_raw(&ds).unwrap(), hand);
}


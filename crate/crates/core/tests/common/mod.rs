//! Brute-force reference implementations used as test oracles. Nothing here
//! calls into the library's numerical routines: inverses and determinants
//! come from Gauss-Jordan elimination, distances from 3-D chord lengths.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sae_core::{AreaRecord, Dataset, DatasetOptions};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gj_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut a = m.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap()).unwrap();
        assert!(a[(piv, col)].abs() > 1e-300, "singular matrix in oracle");
        a.swap_rows(col, piv);
        inv.swap_rows(col, piv);
        let p = a[(col, col)];
        for k in 0..n {
            a[(col, k)] /= p;
            inv[(col, k)] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = a[(r, col)];
                if f != 0.0 {
                    for k in 0..n {
                        a[(r, k)] -= f * a[(col, k)];
                        inv[(r, k)] -= f * inv[(col, k)];
                    }
                }
            }
        }
    }
    inv
}

/// `ln |det m|` by Gaussian elimination.
pub fn log_abs_det(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut a = m.clone();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[(i, col)].abs().partial_cmp(&a[(j, col)].abs()).unwrap()).unwrap();
        a.swap_rows(col, piv);
        let p = a[(col, col)];
        acc += p.abs().ln();
        for r in (col + 1)..n {
            let f = a[(r, col)] / p;
            for k in col..n {
                a[(r, k)] -= f * a[(col, k)];
            }
        }
    }
    acc
}

pub fn gls(x: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let vi = gj_inverse(v);
    let cov = gj_inverse(&(x.transpose() * &vi * x));
    let beta = &cov * x.transpose() * &vi * y;
    (beta, cov)
}

pub fn loglik_ml(x: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>, beta: &DVector<f64>) -> f64 {
    let r = y - x * beta;
    -0.5 * log_abs_det(v) - 0.5 * (r.transpose() * gj_inverse(v) * &r)[(0, 0)]
}

pub fn loglik_reml(x: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>) -> f64 {
    let vi = gj_inverse(v);
    let info = x.transpose() * &vi * x;
    let p = &vi - &vi * x * gj_inverse(&info) * x.transpose() * &vi;
    -0.5 * log_abs_det(v) - 0.5 * log_abs_det(&info) - 0.5 * (y.transpose() * p * y)[(0, 0)]
}

/// `(Omega, G)` from an explicit inverse of `I - rho W`.
pub fn sar_cov(w: &DMatrix<f64>, rho: f64, s2: f64, sigma2: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = w.nrows();
    let ainv = gj_inverse(&(DMatrix::identity(n, n) - w * rho));
    let omega = &ainv * ainv.transpose() * s2;
    let g = &omega + DMatrix::from_diagonal(sigma2);
    (omega, g)
}

/// SBLUP at fixed parameters: `(beta, u, theta, g1, g2)`.
pub fn sblup(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    omega: &DMatrix<f64>,
    g: &DMatrix<f64>,
) -> (DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>, DVector<f64>) {
    let gi = gj_inverse(g);
    let (beta, cov) = gls(x, y, g);
    let u = omega * &gi * (y - x * &beta);
    let theta = x * &beta + &u;
    let m = omega - omega * &gi * omega;
    let d = x - omega * &gi * x;
    let n = x.nrows();
    let g1 = DVector::from_fn(n, |i, _| m[(i, i)]);
    let g2 = DVector::from_fn(n, |i, _| (d.row(i) * &cov * d.row(i).transpose())[(0, 0)]);
    (beta, u, theta, g1, g2)
}

fn unit_vector(lon: f64, lat: f64) -> [f64; 3] {
    let (lo, la) = (lon.to_radians(), lat.to_radians());
    [la.cos() * lo.cos(), la.cos() * lo.sin(), la.sin()]
}

/// Chord length on the unit sphere; monotone in great-circle distance.
pub fn chord(a: &AreaRecord, b: &AreaRecord) -> f64 {
    let p = unit_vector(a.longitude.unwrap(), a.latitude.unwrap());
    let q = unit_vector(b.longitude.unwrap(), b.latitude.unwrap());
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Two-step neighbour weights by exhaustive sorting.
pub fn two_step(areas: &[AreaRecord], k1: usize, k2: usize, var: Option<&str>) -> DMatrix<f64> {
    let n = areas.len();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut c: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        c.sort_by(|&a, &b| {
            chord(&areas[i], &areas[a])
                .partial_cmp(&chord(&areas[i], &areas[b]))
                .unwrap()
                .then(areas[a].area_id.cmp(&areas[b].area_id))
        });
        c.truncate(k1);
        if let (Some(name), true) = (var, k2 < k1) {
            let own = areas[i].aux_similarity[name];
            c.sort_by(|&a, &b| {
                let da = (areas[a].aux_similarity[name] - own).abs();
                let db = (areas[b].aux_similarity[name] - own).abs();
                da.partial_cmp(&db).unwrap().then(areas[a].area_id.cmp(&areas[b].area_id))
            });
        }
        for &j in c.iter().take(k2) {
            w[(i, j)] = 1.0 / k2 as f64;
        }
    }
    w
}

/// Random areas with coordinates, altitude and a covariate.
pub fn random_areas(r: &mut ChaCha8Rng, d: usize, p_extra: usize) -> Vec<AreaRecord> {
    (0..d)
        .map(|i| {
            let covs = (0..p_extra).map(|_| r.random_range(-2.0..2.0)).collect();
            AreaRecord::sampled(
                format!("r{i:03}"),
                r.random_range(-1.0..3.0),
                r.random_range(0.2..2.0),
                covs,
                r.random_range(1..80),
            )
            .with_coordinates(r.random_range(-80.0..-70.0), r.random_range(-15.0..-1.0))
            .with_altitude(r.random_range(0.0..4000.0))
        })
        .collect()
}

pub fn random_dataset(r: &mut ChaCha8Rng, d: usize, p_extra: usize) -> Dataset {
    Dataset::new(random_areas(r, d, p_extra), DatasetOptions::default()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

pub fn rel_vec(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

pub fn rel_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

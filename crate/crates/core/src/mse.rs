//! Analytic MSE: the basic-model g1..g4 terms with the Prasad-Rao and Datta
//! estimators, and the spatial g1/g2 decomposition.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::error::{Result, SaeError};
use crate::linalg;
use crate::model::{AreaRecord, Dataset, EstimationMethod, FitResult};
use crate::predict::gamma;
use crate::spatial::{SarStructure, SarSystem, SpatialParams};

/// `gamma_i sigma_i^2`; zero when both variances vanish.
pub fn g1_basic(sigma_u2: f64, sigma_i2: f64) -> f64 {
    if sigma_u2 + sigma_i2 == 0.0 {
        return 0.0;
    }
    sigma_u2 * sigma_i2 / (sigma_u2 + sigma_i2)
}

fn shrink_weights(dataset: &Dataset, sigma_u2: f64) -> Result<DVector<f64>> {
    let v = dataset.sigma2().map(|s| s + sigma_u2);
    if v.iter().any(|&vi| !(vi > 0.0)) {
        return Err(SaeError::SingularCovariance);
    }
    Ok(v)
}

/// `Var(beta) = (X^t V^-1 X)^-1` for the diagonal basic-model covariance.
pub fn beta_covariance(dataset: &Dataset, sigma_u2: f64) -> Result<nalgebra::DMatrix<f64>> {
    let v = shrink_weights(dataset, sigma_u2)?;
    let w = v.map(|vi| 1.0 / vi);
    let info = linalg::weighted_gram(dataset.x(), &w);
    let p = info.nrows();
    let f = linalg::SpdFactor::new(info).map_err(|_| SaeError::RankDeficient { rank: p - 1, cols: p })?;
    Ok(f.inverse())
}

/// Per-area `(1 - gamma_i)^2 X_i Var(beta) X_i^t`.
pub fn g2_basic(dataset: &Dataset, sigma_u2: f64) -> Result<DVector<f64>> {
    let cov = beta_covariance(dataset, sigma_u2)?;
    let x = dataset.x();
    let mut out = DVector::zeros(dataset.areas());
    for i in 0..dataset.areas() {
        let g = gamma(sigma_u2, dataset.sigma2()[i])?;
        out[i] = ((1.0 - g) * (1.0 - g) * linalg::row_quad(x, i, &cov)).max(0.0);
    }
    Ok(out)
}

/// `sigma_i^4 / (sigma_i^2 + sigma_u^2)^3`.
pub fn g3_pr(sigma_u2: f64, sigma_i2: f64) -> Result<f64> {
    let v = sigma_i2 + sigma_u2;
    if !(v > 0.0) {
        return Err(SaeError::Domain("g3 needs sigma_i2 + sigma_u2 > 0".into()));
    }
    Ok(sigma_i2 * sigma_i2 / (v * v * v))
}

/// Asymptotic variance of the moments estimator, `2/D^2 sum (sigma_i^2 + sigma_u^2)^2`.
pub fn pr_variance(sigma2: &DVector<f64>, sigma_u2: f64) -> f64 {
    let d = sigma2.len() as f64;
    2.0 * sigma2.iter().map(|s| (s + sigma_u2) * (s + sigma_u2)).sum::<f64>() / (d * d)
}

/// Datta bias term
/// `2 (1-gamma_i)^2 [D sum v^-2 - (sum v^-1)^2] (sum v^-1)^-3`, `v_j = sigma_j^2 + sigma_u^2`.
pub fn g4_datta(dataset: &Dataset, sigma_u2: f64) -> Result<DVector<f64>> {
    let v = shrink_weights(dataset, sigma_u2)?;
    let d = v.len() as f64;
    let s1: f64 = v.iter().map(|vi| 1.0 / vi).sum();
    // D sum a^2 - (sum a)^2 is shift invariant; centring on a_0 makes it
    // vanish exactly when every a_i is equal.
    let a0 = 1.0 / v[0];
    let (c1, c2) = v.iter().fold((0.0, 0.0), |(c1, c2), vi| {
        let c = 1.0 / vi - a0;
        (c1 + c, c2 + c * c)
    });
    let bracket = (d * c2 - c1 * c1).max(0.0);
    let scale = 2.0 * bracket / (s1 * s1 * s1);
    let mut out = DVector::zeros(v.len());
    for i in 0..v.len() {
        let g = gamma(sigma_u2, dataset.sigma2()[i])?;
        out[i] = (1.0 - g) * (1.0 - g) * scale;
    }
    Ok(out)
}

/// Per-area components of an analytic MSE estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct MseEstimate {
    pub g1: DVector<f64>,
    pub g2: DVector<f64>,
    /// The third term as added, i.e. `2 Var(sigma_u2) g3_i` (basic) or `2 g3_i` (spatial).
    pub g3_term: DVector<f64>,
    /// Subtracted Datta correction; zero for the other estimators.
    pub g4: DVector<f64>,
    pub mse: DVector<f64>,
    pub warnings: Vec<String>,
}

fn basic_sigma_u2(fit: &FitResult) -> Result<f64> {
    fit.params
        .sigma_u2()
        .ok_or_else(|| SaeError::InvalidInput("analytic basic MSE needs a basic-model fit".into()))
}

/// Prasad-Rao estimator `g1 + g2 + 2 Var(sigma_u2) g3`.
pub fn mse_prasad_rao(dataset: &Dataset, fit: &FitResult) -> Result<MseEstimate> {
    let s = basic_sigma_u2(fit)?;
    let mut warnings = Vec::new();
    if fit.method != EstimationMethod::Moments {
        warnings.push(format!("Prasad-Rao MSE assumes a moments fit; got {}", fit.method));
    }
    let d = dataset.areas();
    let g2 = g2_basic(dataset, s)?;
    let var = pr_variance(dataset.sigma2(), s);
    let mut g1 = DVector::zeros(d);
    let mut g3_term = DVector::zeros(d);
    for i in 0..d {
        let si = dataset.sigma2()[i];
        g1[i] = g1_basic(s, si);
        g3_term[i] = 2.0 * var * g3_pr(s, si)?;
    }
    let mse = &g1 + &g2 + &g3_term;
    Ok(MseEstimate { g1, g2, g3_term, g4: DVector::zeros(d), mse, warnings })
}

/// Datta estimator: Prasad-Rao minus `g4`, floored at zero.
pub fn mse_datta(dataset: &Dataset, fit: &FitResult) -> Result<MseEstimate> {
    let s = basic_sigma_u2(fit)?;
    let mut est = mse_prasad_rao(dataset, fit)?;
    est.warnings.clear();
    if fit.method != EstimationMethod::FhIterative {
        est.warnings.push(format!("Datta MSE assumes an FH iterative fit; got {}", fit.method));
    }
    est.g4 = g4_datta(dataset, s)?;
    est.mse = (&est.mse - &est.g4).map(|m| m.max(0.0));
    Ok(est)
}

/// Synthetic-predictor MSE for a nonsampled area: `sigma_u2 + x Var(beta) x^t`.
pub fn mse_nonsampled(dataset: &Dataset, fit: &FitResult, record: &AreaRecord) -> Result<f64> {
    let s = basic_sigma_u2(fit)?;
    let x = dataset.design_row(record)?;
    let cov = beta_covariance(dataset, s)?;
    Ok(s + (x.transpose() * cov * &x)[(0, 0)])
}

/// Spatial `(g1, g2)` at fixed `phi`.
pub fn g1_g2_spatial(dataset: &Dataset, sar: &SarStructure, phi: SpatialParams) -> Result<(DVector<f64>, DVector<f64>)> {
    sar.check_rho(phi.rho)?;
    Ok(SarSystem::new(dataset, sar, phi)?.g1_g2())
}

/// Analytic spatial MSE `g1 + g2 + 2 g3` given a g3 estimate (e.g. from the bootstrap).
pub fn mse_spatial_analytic(dataset: &Dataset, sar: &SarStructure, fit: &FitResult, g3: &DVector<f64>) -> Result<MseEstimate> {
    let phi = fit
        .params
        .spatial()
        .ok_or_else(|| SaeError::InvalidInput("spatial MSE needs a spatial fit".into()))?;
    if g3.len() != dataset.areas() {
        return Err(SaeError::InvalidInput("g3 length differs from dataset".into()));
    }
    let (g1, g2) = g1_g2_spatial(dataset, sar, phi)?;
    let g3_term = g3 * 2.0;
    let mse = &g1 + &g2 + &g3_term;
    Ok(MseEstimate { g1, g2, g3_term, g4: DVector::zeros(dataset.areas()), mse, warnings: Vec::new() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variance::{self, VarianceMethod};
    use alloc::vec;
    use nalgebra::DMatrix;

    fn intercept(y: &[f64], s: &[f64]) -> Dataset {
        Dataset::from_arrays(DMatrix::from_element(y.len(), 1, 1.0), y.to_vec(), s.to_vec()).unwrap()
    }

    #[test]
    fn g1_examples() {
        assert_eq!(g1_basic(1.0, 1.0), 0.5);
        assert_eq!(g1_basic(0.0, 2.0), 0.0);
        assert_eq!(g1_basic(2.0, 0.0), 0.0);
    }

    #[test]
    fn g2_intercept_identity() {
        let d = intercept(&[1.0, 2.0, 3.0, 4.0, 5.0], &[0.5; 5]);
        let g2 = g2_basic(&d, 0.5).unwrap();
        for v in g2.iter() {
            assert!((v - 0.25 / 5.0).abs() < 1e-14);
        }
    }

    #[test]
    fn g3_examples() {
        assert_eq!(g3_pr(1.0, 1.0).unwrap(), 0.125);
        assert_eq!(g3_pr(1.0, 0.0).unwrap(), 0.0);
        assert!(g3_pr(0.0, 0.0).is_err());
        let s = DVector::from_element(10, 0.7);
        assert!((pr_variance(&s, 0.3) - 2.0 * 1.0 / 10.0).abs() < 1e-15);
    }

    #[test]
    fn zero_sampling_variance_gives_zero_mse() {
        let d = intercept(&[1.0, 2.0, 4.0, 8.0], &[0.0; 4]);
        let fit = variance::estimate_moments(&d).unwrap();
        let est = mse_prasad_rao(&d, &fit).unwrap();
        assert!(est.mse.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn datta_homoscedastic_equals_pr() {
        let d = intercept(&[1.0, 2.0, 4.0, 8.0, 3.0], &[1.5; 5]);
        let fit = variance::estimate_fh_iterative(&d, &VarianceMethod::new(EstimationMethod::FhIterative)).unwrap();
        let g4 = g4_datta(&d, fit.params.sigma_u2().unwrap()).unwrap();
        assert!(g4.iter().all(|&g| g == 0.0));
        let pr = mse_prasad_rao(&d, &fit).unwrap();
        let da = mse_datta(&d, &fit).unwrap();
        assert_eq!(pr.mse, da.mse);
        assert!(!pr.warnings.is_empty());
        assert!(da.warnings.is_empty());
    }

    #[test]
    fn datta_heteroscedastic_below_pr() {
        let d = intercept(&[1.0, 2.0, 4.0, 8.0, 3.0], &[0.5, 1.0, 2.0, 3.0, 4.0]);
        let g4 = g4_datta(&d, 1.0).unwrap();
        assert!(g4.iter().all(|&g| g > 0.0));
    }

    #[test]
    fn huge_variance_limit() {
        let d = intercept(&[1.0, 2.0, 4.0, 8.0, 3.0], &[1.0, 1.0, 1.0, 1.0, 1e6]);
        let fit = FitResult {
            beta: DVector::from_vec(vec![3.0]),
            beta_covariance: DMatrix::zeros(1, 1),
            params: crate::model::VarianceParams::Basic { sigma_u2: 2.0 },
            log_likelihood: 0.0,
            method: EstimationMethod::Moments,
            converged: true,
            iterations: 0,
            warnings: Vec::new(),
        };
        let est = mse_prasad_rao(&d, &fit).unwrap();
        let cov = beta_covariance(&d, 2.0).unwrap()[(0, 0)];
        assert!((est.g1[4] - 2.0).abs() < 1e-5);
        assert!((est.g1[4] + est.g2[4] - (2.0 + cov)).abs() < 1e-5);
        assert_eq!(est.mse[4], est.g1[4] + est.g2[4] + est.g3_term[4]);
    }
}

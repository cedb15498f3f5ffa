//! Estimators of the random-effect variance `sigma_u2` in the basic model.
//!
//! Likelihoods omit their additive constants. ML and REML profile `beta`
//! out through GLS, localize the maximum on a grid over `[0, upper]` and
//! then solve the score equation inside the bracketing cells, which keeps
//! the boundary `sigma_u2 = 0` reachable exactly.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SaeError};
use crate::linalg::{self, SpdFactor};
use crate::math;
use crate::model::{self, Dataset, EstimationMethod, FitResult, GlsFit, VarianceParams};
use crate::optimize;

const GRID_POINTS: usize = 40;

/// Estimation method plus optimizer controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceMethod {
    pub tag: EstimationMethod,
    pub max_iterations: usize,
    pub tolerance: f64,
    /// Upper end of the search interval; `None` means 100 times the sample
    /// variance of the OLS residuals.
    pub upper_bound: Option<f64>,
}

impl VarianceMethod {
    pub fn new(tag: EstimationMethod) -> Self {
        Self { tag, max_iterations: 200, tolerance: 1e-8, upper_bound: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(SaeError::InvalidInput("tolerance must be > 0".into()));
        }
        if let Some(u) = self.upper_bound {
            if !(u > 0.0) {
                return Err(SaeError::InvalidInput("upper bound must exceed the lower bound 0".into()));
            }
        }
        if self.max_iterations == 0 {
            return Err(SaeError::InvalidInput("max_iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Default upper bound for variance searches: 100 times the sample variance
/// of the OLS residuals (1 when the fit is exact).
pub fn default_upper_bound(dataset: &Dataset) -> Result<f64> {
    let fit = model::ols_beta(dataset)?;
    let d = fit.residuals.len() as f64;
    let mean = fit.residuals.sum() / d;
    let var = fit.residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / (d - 1.0);
    Ok(if var > 0.0 { 100.0 * var } else { 1.0 })
}

fn variances(dataset: &Dataset, sigma_u2: f64) -> Result<DVector<f64>> {
    if !(sigma_u2 >= 0.0) || !sigma_u2.is_finite() {
        return Err(SaeError::Domain(format!("sigma_u2 = {sigma_u2} must be finite and >= 0")));
    }
    let v = dataset.sigma2().map(|s| s + sigma_u2);
    if v.iter().any(|&vi| !(vi > 0.0)) {
        return Err(SaeError::Domain("sigma_u2 + sigma_i^2 must be > 0 for every area".into()));
    }
    Ok(v)
}

/// ML log-likelihood at `(beta, sigma_u2)`:
/// `-1/2 sum log v_i - 1/2 sum r_i^2 / v_i` with `v_i = sigma_u2 + sigma_i^2`.
pub fn loglik_ml(dataset: &Dataset, sigma_u2: f64, beta: &DVector<f64>) -> Result<f64> {
    if beta.len() != dataset.n_params() {
        return Err(SaeError::InvalidInput("beta length mismatch".into()));
    }
    let v = variances(dataset, sigma_u2)?;
    let r = dataset.y() - dataset.x() * beta;
    Ok(-0.5 * v.iter().map(|&vi| math::ln(vi)).sum::<f64>()
        - 0.5 * r.iter().zip(v.iter()).map(|(ri, vi)| ri * ri / vi).sum::<f64>())
}

/// REML log-likelihood: `-1/2 log|V| - 1/2 log|X^t V^-1 X| - 1/2 Y^t P Y`.
pub fn loglik_reml(dataset: &Dataset, sigma_u2: f64) -> Result<f64> {
    Ok(DiagState::new(dataset, sigma_u2)?.reml())
}

/// Everything the basic-model criteria need at one value of `sigma_u2`.
struct DiagState {
    v: DVector<f64>,
    residuals: DVector<f64>,
    info: SpdFactor,
    gls: GlsFit,
}

impl DiagState {
    fn new(dataset: &Dataset, sigma_u2: f64) -> Result<Self> {
        let v = variances(dataset, sigma_u2)?;
        let w = v.map(|vi| 1.0 / vi);
        let info_m = linalg::weighted_gram(dataset.x(), &w);
        let p = info_m.nrows();
        let info = SpdFactor::new(info_m).map_err(|_| SaeError::RankDeficient { rank: p - 1, cols: p })?;
        let beta = info.solve_vec(&linalg::weighted_cross(dataset.x(), &w, dataset.y()));
        let residuals = dataset.y() - dataset.x() * &beta;
        let beta_cov = info.inverse();
        Ok(Self { v, residuals, info, gls: GlsFit { beta, beta_cov } })
    }

    fn quad(&self) -> f64 {
        self.residuals.iter().zip(self.v.iter()).map(|(r, v)| r * r / v).sum()
    }

    fn log_det_v(&self) -> f64 {
        self.v.iter().map(|&vi| math::ln(vi)).sum()
    }

    fn ml(&self) -> f64 {
        -0.5 * self.log_det_v() - 0.5 * self.quad()
    }

    fn reml(&self) -> f64 {
        -0.5 * self.log_det_v() - 0.5 * self.info.log_det() - 0.5 * self.quad()
    }

    fn score_ml(&self) -> f64 {
        0.5 * self
            .residuals
            .iter()
            .zip(self.v.iter())
            .map(|(r, v)| r * r / (v * v) - 1.0 / v)
            .sum::<f64>()
    }

    /// `d l_REML / d sigma_u2 = 1/2 (Y^t P P Y - tr P)`.
    fn score_reml(&self, x: &DMatrix<f64>) -> f64 {
        let w2 = self.v.map(|v| 1.0 / (v * v));
        let xv2x = linalg::weighted_gram(x, &w2);
        let tr_correction = (&self.gls.beta_cov * xv2x).trace();
        let tr_p = self.v.iter().map(|v| 1.0 / v).sum::<f64>() - tr_correction;
        let ypy2 = self.residuals.iter().zip(self.v.iter()).map(|(r, v)| r * r / (v * v)).sum::<f64>();
        0.5 * (ypy2 - tr_p)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Criterion {
    Ml,
    Reml,
}

impl Criterion {
    fn value(self, s: &DiagState) -> f64 {
        match self {
            Criterion::Ml => s.ml(),
            Criterion::Reml => s.reml(),
        }
    }

    fn score(self, s: &DiagState, dataset: &Dataset) -> f64 {
        match self {
            Criterion::Ml => s.score_ml(),
            Criterion::Reml => s.score_reml(dataset.x()),
        }
    }
}

struct Maximum {
    sigma_u2: f64,
    iterations: usize,
    converged: bool,
    warnings: Vec<String>,
}

fn maximize(dataset: &Dataset, crit: Criterion, cfg: &VarianceMethod) -> Result<Maximum> {
    cfg.validate()?;
    let upper = match cfg.upper_bound {
        Some(u) => u,
        None => default_upper_bound(dataset)?,
    };
    let value = |s: f64| DiagState::new(dataset, s).map(|st| crit.value(&st)).unwrap_or(f64::NEG_INFINITY);
    let score = |s: f64| DiagState::new(dataset, s).map(|st| crit.score(&st, dataset)).unwrap_or(f64::NAN);

    // quadratic spacing resolves the region near zero
    let grid: Vec<f64> = (0..=GRID_POINTS)
        .map(|k| {
            let t = k as f64 / GRID_POINTS as f64;
            upper * t * t
        })
        .collect();
    let values: Vec<f64> = grid.iter().map(|&s| value(s)).collect();
    let mut best = 0;
    for k in 1..grid.len() {
        if values[k] > values[best] {
            best = k;
        }
    }
    if !values[best].is_finite() {
        return Err(SaeError::SingularCovariance);
    }
    let mut warnings = Vec::new();
    if best == GRID_POINTS {
        warnings.push(format!("variance estimate reached the search upper bound {upper}"));
        return Ok(Maximum { sigma_u2: upper, iterations: grid.len(), converged: false, warnings });
    }
    if best == 0 && values[0].is_finite() {
        let s0 = score(0.0);
        if !(s0 > 0.0) {
            return Ok(Maximum { sigma_u2: 0.0, iterations: grid.len(), converged: true, warnings });
        }
    }
    let lo = if best == 0 { 0.0 } else { grid[best - 1] };
    let hi = grid[best + 1];
    let root_tol = 1e-13 * (1.0 + upper);

    // the score may have several sign changes inside the cell pair; try the
    // half that contains the grid maximum's ascent first
    let mid = grid[best];
    let mut candidates: Vec<(f64, f64)> = Vec::new();
    if best > 0 {
        candidates.push((lo, mid));
    }
    candidates.push((mid, hi));
    if best == 0 {
        candidates.push((lo, hi));
    }
    let mut found: Option<optimize::ScalarOutcome> = None;
    for (a, b) in candidates {
        let sa = score(a);
        let sb = score(b);
        if sa > 0.0 && sb < 0.0 {
            if let Some(r) = optimize::brent_root(&score, a, b, root_tol, cfg.max_iterations) {
                if found.map_or(true, |f: optimize::ScalarOutcome| value(r.x) > value(f.x)) {
                    found = Some(r);
                }
            }
        }
    }
    match found {
        Some(r) => {
            let x = if value(r.x) >= values[best] { r.x } else { grid[best] };
            Ok(Maximum { sigma_u2: x, iterations: grid.len() + r.iterations, converged: r.converged, warnings })
        }
        None => {
            let r = optimize::brent_min(|s| -value(s), lo, hi, cfg.tolerance, cfg.max_iterations);
            let x = if -r.fx >= values[best] { r.x } else { grid[best] };
            Ok(Maximum { sigma_u2: x, iterations: grid.len() + r.iterations, converged: r.converged, warnings })
        }
    }
}

fn finish(
    dataset: &Dataset,
    sigma_u2: f64,
    method: EstimationMethod,
    log_likelihood: f64,
    converged: bool,
    iterations: usize,
    warnings: Vec<String>,
) -> Result<FitResult> {
    let st = DiagState::new(dataset, sigma_u2)?;
    Ok(FitResult {
        beta: st.gls.beta,
        beta_covariance: st.gls.beta_cov,
        params: VarianceParams::Basic { sigma_u2 },
        log_likelihood,
        method,
        converged,
        iterations,
        warnings,
    })
}

/// Maximum likelihood with `beta` profiled out.
pub fn estimate_ml(dataset: &Dataset, cfg: &VarianceMethod) -> Result<FitResult> {
    let m = maximize(dataset, Criterion::Ml, cfg)?;
    let ll = DiagState::new(dataset, m.sigma_u2)?.ml();
    finish(dataset, m.sigma_u2, EstimationMethod::Ml, ll, m.converged, m.iterations, m.warnings)
}

/// Restricted maximum likelihood.
pub fn estimate_reml(dataset: &Dataset, cfg: &VarianceMethod) -> Result<FitResult> {
    let m = maximize(dataset, Criterion::Reml, cfg)?;
    let ll = DiagState::new(dataset, m.sigma_u2)?.reml();
    finish(dataset, m.sigma_u2, EstimationMethod::Reml, ll, m.converged, m.iterations, m.warnings)
}

/// Untruncated moments estimate
/// `1/(D-p) sum [(Y_i - X_i b_OLS)^2 - sigma_i^2 (1 - h_i)]`.
pub fn moments_raw(dataset: &Dataset) -> Result<f64> {
    let fit = model::ols_beta(dataset)?;
    let d = dataset.areas();
    let p = dataset.n_params();
    let total: f64 = (0..d)
        .map(|i| fit.residuals[i] * fit.residuals[i] - dataset.sigma2()[i] * (1.0 - fit.leverages[i]))
        .sum();
    Ok(total / (d - p) as f64)
}

/// Prasad-Rao moments estimator, truncated at zero.
pub fn estimate_moments(dataset: &Dataset) -> Result<FitResult> {
    let sigma_u2 = moments_raw(dataset)?.max(0.0);
    let st = DiagState::new(dataset, sigma_u2)?;
    let ll = st.ml();
    finish(dataset, sigma_u2, EstimationMethod::Moments, ll, true, 1, Vec::new())
}

/// Left side of the Fay-Herriot moment equation minus `D - p`, with `beta`
/// re-estimated by GLS at `sigma_u2`.
pub fn fh_equation(dataset: &Dataset, sigma_u2: f64) -> Result<f64> {
    let st = DiagState::new(dataset, sigma_u2)?;
    Ok(st.quad() - (dataset.areas() - dataset.n_params()) as f64)
}

/// Fay-Herriot iterative estimator: alternate GLS for `beta` with a scalar
/// root solve of `sum r_i^2 / (sigma_u2 + sigma_i^2) = D - p`.
pub fn estimate_fh_iterative(dataset: &Dataset, cfg: &VarianceMethod) -> Result<FitResult> {
    cfg.validate()?;
    let target = (dataset.areas() - dataset.n_params()) as f64;
    let sigma2 = dataset.sigma2().clone();
    let upper = match cfg.upper_bound {
        Some(u) => u,
        None => default_upper_bound(dataset)?,
    };
    let min_positive = sigma2.iter().all(|&s| s > 0.0);
    let mut s = moments_raw(dataset)?.max(0.0);
    if s == 0.0 && !min_positive {
        s = 1e-6 * upper;
    }
    let mut converged = false;
    let mut iterations = 0;
    let mut warnings = Vec::new();
    for it in 1..=cfg.max_iterations {
        iterations = it;
        let st = DiagState::new(dataset, s)?;
        let r2: Vec<f64> = st.residuals.iter().map(|r| r * r).collect();
        let h = |t: f64| -> f64 {
            r2.iter().zip(sigma2.iter()).map(|(r, si)| r / (t + si)).sum::<f64>() - target
        };
        let h0 = if min_positive { h(0.0) } else { f64::INFINITY };
        let next = if h0 <= 0.0 {
            0.0
        } else {
            let mut hi = upper.max(s).max(1e-12);
            let mut grow = 0;
            while h(hi) > 0.0 && grow < 200 {
                hi *= 2.0;
                grow += 1;
            }
            let lo = if min_positive { 0.0 } else { hi * 1e-300 };
            match optimize::brent_root(h, lo, hi, 1e-14 * (1.0 + hi), 200) {
                Some(r) => r.x,
                None => {
                    warnings.push(String::from("FH scalar equation has no bracketed root"));
                    s
                }
            }
        };
        let delta = math::abs(next - s);
        s = next;
        if delta < cfg.tolerance * (1.0 + s) {
            converged = true;
            break;
        }
    }
    if s == 0.0 && !min_positive {
        return Err(SaeError::SingularCovariance);
    }
    let ll = DiagState::new(dataset, s)?.ml();
    finish(dataset, s, EstimationMethod::FhIterative, ll, converged, iterations, warnings)
}

/// Dispatches to the estimator named by `cfg.tag`.
pub fn estimate(dataset: &Dataset, cfg: &VarianceMethod) -> Result<FitResult> {
    match cfg.tag {
        EstimationMethod::Ml => estimate_ml(dataset, cfg),
        EstimationMethod::Reml => estimate_reml(dataset, cfg),
        EstimationMethod::Moments => estimate_moments(dataset),
        EstimationMethod::FhIterative => estimate_fh_iterative(dataset, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn ds(x: DMatrix<f64>, y: &[f64], s: &[f64]) -> Dataset {
        Dataset::from_arrays(x, y.to_vec(), s.to_vec()).unwrap()
    }

    fn ones(d: usize) -> DMatrix<f64> {
        DMatrix::from_element(d, 1, 1.0)
    }

    #[test]
    fn loglik_ml_examples() {
        let d = ds(ones(3), &[0.0, 0.0, 0.0], &[1.0, 1.0, 1.0]);
        let beta = DVector::from_element(1, 0.0);
        assert_eq!(loglik_ml(&d, 0.0, &beta).unwrap(), 0.0);
        assert!((loglik_ml(&d, 1.0, &beta).unwrap() + 1.5 * math::ln(2.0)).abs() < 1e-15);
        let z = ds(ones(3), &[0.0, 0.0, 0.0], &[0.0, 1.0, 1.0]);
        assert!(matches!(loglik_ml(&z, 0.0, &beta), Err(SaeError::Domain(_))));
    }

    #[test]
    fn reml_in_column_space() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y: Vec<f64> = (0..4).map(|i| 2.0 - 0.5 * i as f64).collect();
        let s = [0.5, 1.0, 1.5, 2.0];
        let d = ds(x.clone(), &y, &s);
        let su = 0.7;
        let v: Vec<f64> = s.iter().map(|si| si + su).collect();
        let log_det_v: f64 = v.iter().map(|vi| math::ln(*vi)).sum();
        let w = DVector::from_iterator(4, v.iter().map(|vi| 1.0 / vi));
        let info = linalg::weighted_gram(&x, &w);
        let expected = -0.5 * log_det_v - 0.5 * math::ln(info.determinant());
        assert!((loglik_reml(&d, su).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn moments_hand_example() {
        let d = ds(ones(3), &[0.0, 0.0, 3.0], &[1.0, 1.0, 1.0]);
        // residuals^2 = (1, 1, 4), h = 1/3: (6 - 3 * 2/3) / 2 = 2
        assert!((moments_raw(&d).unwrap() - 2.0).abs() < 1e-14);
        let fit = estimate_moments(&d).unwrap();
        assert!((fit.params.sigma_u2().unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn moments_truncates_at_zero() {
        let d = ds(ones(4), &[0.0, 0.1, -0.1, 0.05], &[5.0, 5.0, 5.0, 5.0]);
        assert!(moments_raw(&d).unwrap() < 0.0);
        assert_eq!(estimate_moments(&d).unwrap().params.sigma_u2(), Some(0.0));
    }

    #[test]
    fn boundary_zero_for_ml_and_reml() {
        let d = ds(ones(5), &[0.0, 0.1, -0.1, 0.05, -0.05], &[1.0; 5]);
        for f in [estimate_ml, estimate_reml, estimate_fh_iterative] {
            let fit = f(&d, &VarianceMethod::new(EstimationMethod::Reml)).unwrap();
            assert_eq!(fit.params.sigma_u2(), Some(0.0));
            assert!(fit.converged);
        }
    }

    #[test]
    fn fh_homoscedastic_closed_form() {
        let y = [0.3, 2.0, -1.5, 4.0, 0.0, 1.2, -0.7];
        let x = DMatrix::from_fn(7, 2, |i, j| if j == 0 { 1.0 } else { i as f64 * 0.5 });
        let s = 0.4;
        let d = ds(x.clone(), &y, &[s; 7]);
        let ols = model::ols_beta(&d).unwrap();
        let rss: f64 = ols.residuals.iter().map(|r| r * r).sum();
        let closed = (rss / 5.0 - s).max(0.0);
        let fit = estimate_fh_iterative(&d, &VarianceMethod::new(EstimationMethod::FhIterative)).unwrap();
        assert!(fit.converged);
        assert!((fit.params.sigma_u2().unwrap() - closed).abs() < 1e-9);
        let lhs = fh_equation(&d, fit.params.sigma_u2().unwrap()).unwrap();
        assert!(lhs.abs() < 1e-6);
    }

    #[test]
    fn zero_sampling_variance_gives_regression_variance() {
        let y = [0.3, 2.0, -1.5, 4.0, 0.0, 1.2, -0.7, 2.2];
        let x = DMatrix::from_fn(8, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sqrt() });
        let d = ds(x, &y, &[0.0; 8]);
        let rss: f64 = model::ols_beta(&d).unwrap().residuals.iter().map(|r| r * r).sum();
        let cfg = VarianceMethod::new(EstimationMethod::Ml);
        let ml = estimate_ml(&d, &cfg).unwrap().params.sigma_u2().unwrap();
        let reml = estimate_reml(&d, &cfg).unwrap().params.sigma_u2().unwrap();
        let mom = estimate_moments(&d).unwrap().params.sigma_u2().unwrap();
        let fh = estimate_fh_iterative(&d, &cfg).unwrap().params.sigma_u2().unwrap();
        assert!((ml - rss / 8.0).abs() < 1e-6, "{ml} vs {}", rss / 8.0);
        assert!((reml - rss / 6.0).abs() < 1e-6);
        assert!((mom - rss / 6.0).abs() < 1e-12);
        assert!((fh - rss / 6.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_config() {
        let d = ds(ones(4), &[0.0, 1.0, 2.0, 3.0], &[1.0; 4]);
        let mut cfg = VarianceMethod::new(EstimationMethod::Ml);
        cfg.tolerance = 0.0;
        assert!(estimate_ml(&d, &cfg).is_err());
        let mut cfg = VarianceMethod::new(EstimationMethod::Ml);
        cfg.upper_bound = Some(-1.0);
        assert!(estimate_reml(&d, &cfg).is_err());
        let _ = vec![0];
    }
}

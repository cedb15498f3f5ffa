//! Spatial Fay-Herriot model: SAR random effects `u = rho W u + eps`.
//!
//! The marginal covariance is
//! `G = sigma_eps2 [(I - rho W)^t (I - rho W)]^{-1} + Sigma_e = Omega + Sigma_e`.
//! When every sampling variance and `sigma_eps2` are positive the
//! likelihood is evaluated in precision form,
//! `G^{-1} = S^{-1} - S^{-1} H^{-1} S^{-1}` with `H = C / sigma_eps2 + S^{-1}`,
//! `C = (I - rho W)^t (I - rho W)`, `S = Sigma_e`, which needs one Cholesky
//! factorization and no explicit inverse. Otherwise `G` is formed densely.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{Complex, DMatrix, DVector, Schur};

use crate::error::{Result, SaeError};
use crate::linalg::{self, EnvelopeCholesky, EnvelopeOrder, SpdFactor};
use crate::math;
use crate::model::{Dataset, EstimationMethod, FitResult, GlsFit, VarianceParams};
use crate::optimize::{self, Bounds};
use crate::variance::{self, VarianceMethod};

/// Margin kept between fitted `rho` and the ends of the validity interval.
pub const RHO_MARGIN: f64 = 1e-6;

/// Row-standardized spatial weights with the neighbour lists that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct ProximityMatrix {
    pub weights: DMatrix<f64>,
    /// Per area, the selected neighbours and their weights in selection order.
    pub neighbor_lists: Vec<Vec<(String, f64)>>,
    pub k1: usize,
    pub k2: usize,
    pub similarity_variable: Option<String>,
}

impl ProximityMatrix {
    /// Wraps an explicit weight matrix. Rows must be nonnegative with zero
    /// diagonal and sum to 1 (or be all zero).
    pub fn from_weights(weights: DMatrix<f64>, area_ids: &[String]) -> Result<Self> {
        let d = weights.nrows();
        if weights.ncols() != d || area_ids.len() != d {
            return Err(SaeError::InvalidInput("weight matrix must be D x D with D area ids".into()));
        }
        let neighbor_lists = (0..d)
            .map(|i| {
                (0..d)
                    .filter(|&j| weights[(i, j)] != 0.0)
                    .map(|j| (area_ids[j].clone(), weights[(i, j)]))
                    .collect::<Vec<_>>()
            })
            .collect();
        let m = Self { weights, neighbor_lists, k1: 0, k2: 0, similarity_variable: None };
        m.validate()?;
        Ok(m)
    }

    pub fn areas(&self) -> usize {
        self.weights.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.weights.nrows();
        for i in 0..d {
            if self.weights[(i, i)] != 0.0 {
                return Err(SaeError::InvalidInput(format!("w[{i},{i}] must be 0")));
            }
            let mut sum = 0.0;
            for j in 0..d {
                let w = self.weights[(i, j)];
                if !(w >= 0.0) || !w.is_finite() {
                    return Err(SaeError::InvalidInput(format!("w[{i},{j}] = {w} is not a nonnegative weight")));
                }
                sum += w;
            }
            if sum != 0.0 && math::abs(sum - 1.0) > 1e-12 {
                return Err(SaeError::InvalidInput(format!("row {i} sums to {sum}, not 1")));
            }
        }
        Ok(())
    }
}

/// `(sigma_eps2, rho)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialParams {
    pub sigma_eps2: f64,
    pub rho: f64,
}

impl SpatialParams {
    pub fn new(sigma_eps2: f64, rho: f64) -> Self {
        Self { sigma_eps2, rho }
    }
}

/// Quantities derived from `W` once and reused across parameter values.
#[derive(Debug, Clone)]
pub struct SarStructure {
    w: DMatrix<f64>,
    w_sym: DMatrix<f64>,
    wtw: DMatrix<f64>,
    /// Ordering for the sparse precision route; `None` when the envelope
    /// is too wide to beat a dense factorization.
    envelope: Option<EnvelopeOrder>,
    eigenvalues: Vec<Complex<f64>>,
    interval: (f64, f64),
}

impl SarStructure {
    pub fn new(proximity: &ProximityMatrix) -> Result<Self> {
        proximity.validate()?;
        Self::from_matrix(proximity.weights.clone())
    }

    fn from_matrix(w: DMatrix<f64>) -> Result<Self> {
        let d = w.nrows();
        if d == 0 || w.ncols() != d {
            return Err(SaeError::InvalidInput("W must be square and non-empty".into()));
        }
        let eigenvalues = eigenvalues_of(&w)?;
        if eigenvalues.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(SaeError::EigenFailure);
        }
        let row_stochastic = (0..d).all(|i| math::abs(w.row(i).sum() - 1.0) <= 1e-12);
        let interval = interval_from_eigenvalues(&eigenvalues, row_stochastic);
        let w_sym = &w + w.transpose();
        let wtw = w.transpose() * &w;
        let order = EnvelopeOrder::new(&(w_sym.abs() + wtw.abs()));
        let envelope = (3 * order.envelope_size() < d * (d + 1) / 2).then_some(order);
        Ok(Self { w, w_sym, wtw, envelope, eigenvalues, interval })
    }

    pub fn areas(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn eigenvalues(&self) -> &[Complex<f64>] {
        &self.eigenvalues
    }

    /// Open interval of `rho` around zero on which `I - rho W` is nonsingular.
    pub fn validity_interval(&self) -> (f64, f64) {
        self.interval
    }

    /// Closed interval the optimizer searches.
    pub fn search_interval(&self) -> (f64, f64) {
        (self.interval.0 + RHO_MARGIN, self.interval.1 - RHO_MARGIN)
    }

    pub fn check_rho(&self, rho: f64) -> Result<()> {
        let (min, max) = self.interval;
        if !(rho > min && rho < max) {
            return Err(SaeError::RhoOutOfRange { rho, min, max });
        }
        Ok(())
    }

    /// `I - rho W`.
    pub fn a_matrix(&self, rho: f64) -> DMatrix<f64> {
        let d = self.areas();
        DMatrix::identity(d, d) - &self.w * rho
    }

    /// `C = (I - rho W)^t (I - rho W) = I - rho (W + W^t) + rho^2 W^t W`.
    pub fn c_matrix(&self, rho: f64) -> DMatrix<f64> {
        let d = self.areas();
        let mut c = &self.wtw * (rho * rho) - &self.w_sym * rho;
        for i in 0..d {
            c[(i, i)] += 1.0;
        }
        c
    }

    /// `log |det(I - rho W)|` from the eigenvalues of `W`.
    pub fn log_abs_det_a(&self, rho: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|z| {
                let re = 1.0 - rho * z.re;
                let im = rho * z.im;
                0.5 * math::ln(re * re + im * im)
            })
            .sum()
    }

    /// Solves `(I - rho W) u = v`.
    pub fn solve_a(&self, rho: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.a_matrix(rho).lu().solve(v).ok_or(SaeError::SingularSpatial { rho })
    }

    /// `[(I - rho W)^t (I - rho W)]^{-1}`.
    pub fn c_inverse(&self, rho: f64) -> Result<DMatrix<f64>> {
        let c = SpdFactor::new(self.c_matrix(rho)).map_err(|_| SaeError::SingularSpatial { rho })?;
        Ok(c.inverse())
    }
}

/// Complex eigenvalues of `w`. Shifted QR can stall on permutation-like
/// 0/1 matrices (common for `K2 = 1`), so on failure the spectrum is shifted
/// by `c I` and shifted back.
fn eigenvalues_of(w: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let d = w.nrows();
    for shift in [0.0, 0.37, 1.0] {
        let m = if shift == 0.0 { w.clone() } else { w + DMatrix::identity(d, d) * shift };
        if let Some(schur) = Schur::try_new(m, 1e-14, 100_000) {
            return Ok(schur.complex_eigenvalues().iter().map(|z| z - shift).collect());
        }
    }
    Err(SaeError::EigenFailure)
}

fn interval_from_eigenvalues(eigenvalues: &[Complex<f64>], row_stochastic: bool) -> (f64, f64) {
    let snap = |x: f64| if math::abs(math::abs(x) - 1.0) < 1e-9 { x.signum() } else { x };
    let mut real: Vec<f64> = eigenvalues
        .iter()
        .filter(|z| math::abs(z.im) <= 1e-10 * (1.0 + math::abs(z.re)))
        .map(|z| snap(z.re))
        .collect();
    if row_stochastic {
        // the all-ones vector is an eigenvector with eigenvalue exactly 1
        real.push(1.0);
    }
    let lambda_min = real.iter().cloned().fold(f64::INFINITY, f64::min);
    let lambda_max = real.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rho_min = if lambda_min < -1e-12 { 1.0 / lambda_min } else { -1.0 };
    let rho_max = if lambda_max > 1e-12 { 1.0 / lambda_max } else { 1.0 };
    (rho_min, rho_max)
}

/// `(rho_min, rho_max)` such that `I - rho W` is nonsingular for every `rho`
/// strictly inside. For a row-standardized `W` this is `(1/lambda_min, 1)`
/// with `lambda_min` the most negative real eigenvalue.
pub fn rho_validity_interval(proximity: &ProximityMatrix) -> Result<(f64, f64)> {
    Ok(SarStructure::new(proximity)?.validity_interval())
}

/// `(Omega, G)` with `Omega = sigma_eps2 [(I - rho W)^t (I - rho W)]^{-1}` and
/// `G = Omega + diag(sigma2)`.
pub fn sar_covariance(
    sar: &SarStructure,
    params: SpatialParams,
    sigma2: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_params(sar, params)?;
    if sigma2.len() != sar.areas() {
        return Err(SaeError::InvalidInput("sigma2 length differs from W".into()));
    }
    let d = sar.areas();
    let omega = if params.sigma_eps2 == 0.0 {
        DMatrix::zeros(d, d)
    } else {
        sar.c_inverse(params.rho)? * params.sigma_eps2
    };
    let mut g = omega.clone();
    for i in 0..d {
        g[(i, i)] += sigma2[i];
    }
    Ok((omega, g))
}

fn check_params(sar: &SarStructure, params: SpatialParams) -> Result<()> {
    if !(params.sigma_eps2 >= 0.0) || !params.sigma_eps2.is_finite() {
        return Err(SaeError::Domain(format!("sigma_eps2 = {} must be finite and >= 0", params.sigma_eps2)));
    }
    sar.check_rho(params.rho)
}

/// Likelihood ingredients at one parameter value.
#[derive(Debug, Clone)]
pub struct SpatialLikelihood {
    pub log_det_g: f64,
    pub log_det_info: f64,
    /// `(Y - X beta)^t G^{-1} (Y - X beta)` at the GLS estimate.
    pub quad: f64,
    pub gls: GlsFit,
}

impl SpatialLikelihood {
    pub fn ml(&self) -> f64 {
        -0.5 * self.log_det_g - 0.5 * self.quad
    }

    pub fn reml(&self) -> f64 {
        -0.5 * self.log_det_g - 0.5 * self.log_det_info - 0.5 * self.quad
    }

    pub fn criterion(&self, method: EstimationMethod) -> f64 {
        match method {
            EstimationMethod::Reml => self.reml(),
            _ => self.ml(),
        }
    }
}

/// Which algebraic route [`evaluate`] takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    /// Precision form when possible, dense otherwise.
    Auto,
    /// Always form `G` densely.
    Dense,
}

enum Precision<'a> {
    Dense(SpdFactor),
    Envelope(EnvelopeCholesky<'a>),
}

impl Precision<'_> {
    fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Precision::Dense(f) => f.solve_mat(b),
            Precision::Envelope(f) => f.solve_mat(b),
        }
    }

    fn log_det(&self) -> f64 {
        match self {
            Precision::Dense(f) => f.log_det(),
            Precision::Envelope(f) => f.log_det(),
        }
    }
}

/// Evaluates `log|G|`, the GLS fit and the residual quadratic form.
pub fn evaluate(
    dataset: &Dataset,
    sar: &SarStructure,
    params: SpatialParams,
    route: Route,
) -> Result<SpatialLikelihood> {
    check_params(sar, params)?;
    if sar.areas() != dataset.areas() {
        return Err(SaeError::InvalidInput("W and dataset sizes differ".into()));
    }
    let s = dataset.sigma2();
    let precision_ok = params.sigma_eps2 > 0.0 && s.iter().all(|&si| si > 0.0);
    let x = dataset.x();
    let y = dataset.y();
    let (d, p) = x.shape();
    // G^{-1} [X y]
    let mut rhs = DMatrix::zeros(d, p + 1);
    rhs.view_mut((0, 0), (d, p)).copy_from(x);
    rhs.set_column(p, y);
    let (ginv_rhs, log_det_g) = if params.sigma_eps2 == 0.0 {
        if s.iter().any(|&si| !(si > 0.0)) {
            return Err(SaeError::SingularCovariance);
        }
        let mut out = rhs.clone();
        for i in 0..d {
            for j in 0..=p {
                out[(i, j)] /= s[i];
            }
        }
        (out, s.iter().map(|&si| math::ln(si)).sum::<f64>())
    } else if precision_ok && route == Route::Auto {
        let inv_s = s.map(|si| 1.0 / si);
        // H = C / sigma_eps2 + Sigma_e^{-1}
        let (rho, s2) = (params.rho, params.sigma_eps2);
        let hf = match &sar.envelope {
            Some(order) => Precision::Envelope(order.factor_with(|i, j| {
                let c = rho * rho * sar.wtw[(i, j)] - rho * sar.w_sym[(i, j)];
                if i == j {
                    (1.0 + c) / s2 + inv_s[i]
                } else {
                    c / s2
                }
            })?),
            None => {
                let mut h = sar.c_matrix(rho) / s2;
                for i in 0..d {
                    h[(i, i)] += inv_s[i];
                }
                Precision::Dense(SpdFactor::new(h).map_err(|_| SaeError::SingularCovariance)?)
            }
        };
        let mut scaled = rhs.clone();
        for i in 0..d {
            for j in 0..=p {
                scaled[(i, j)] *= inv_s[i];
            }
        }
        let t = hf.solve_mat(&scaled);
        let mut out = scaled;
        for i in 0..d {
            for j in 0..=p {
                out[(i, j)] -= inv_s[i] * t[(i, j)];
            }
        }
        let log_det = s.iter().map(|&si| math::ln(si)).sum::<f64>()
            + hf.log_det()
            + d as f64 * math::ln(params.sigma_eps2)
            - 2.0 * sar.log_abs_det_a(params.rho);
        (out, log_det)
    } else {
        let (_, g) = sar_covariance(sar, params, s)?;
        let gf = SpdFactor::new(g)?;
        (gf.solve_mat(&rhs), gf.log_det())
    };
    let ginv_x = ginv_rhs.columns(0, p);
    let ginv_y = ginv_rhs.column(p);
    let mut info = x.transpose() * ginv_x;
    linalg::symmetrize(&mut info);
    let cross = x.transpose() * ginv_y;
    let yy = y.dot(&ginv_y);
    let info_f = SpdFactor::new(info).map_err(|_| SaeError::RankDeficient { rank: p - 1, cols: p })?;
    let beta = info_f.solve_vec(&cross);
    let quad = (yy - beta.dot(&cross)).max(0.0);
    Ok(SpatialLikelihood {
        log_det_g,
        log_det_info: info_f.log_det(),
        quad,
        gls: GlsFit { beta, beta_cov: info_f.inverse() },
    })
}

/// Spatial ML log-likelihood at `(beta, phi)`, constant omitted.
pub fn spatial_loglik_ml(
    dataset: &Dataset,
    sar: &SarStructure,
    params: SpatialParams,
    beta: &DVector<f64>,
) -> Result<f64> {
    let ev = evaluate(dataset, sar, params, Route::Auto)?;
    // quad at an arbitrary beta: r^t G^{-1} r = quad_gls + (b - b_gls)^t info (b - b_gls)
    let diff = beta - &ev.gls.beta;
    let info = SpdFactor::new(ev.gls.beta_cov.clone())?.inverse();
    let extra = diff.dot(&(&info * &diff));
    Ok(-0.5 * ev.log_det_g - 0.5 * (ev.quad + extra))
}

/// Spatial REML log-likelihood at `phi`, constant omitted.
pub fn spatial_loglik_reml(dataset: &Dataset, sar: &SarStructure, params: SpatialParams) -> Result<f64> {
    Ok(evaluate(dataset, sar, params, Route::Auto)?.reml())
}

/// Optimizer settings for [`estimate_spatial`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialConfig {
    /// `Ml` or `Reml`.
    pub method: EstimationMethod,
    /// Number of `rho` grid points for the starting search.
    pub rho_grid: usize,
    pub max_iterations: usize,
    /// Simplex convergence tolerance (relative diameter).
    pub tolerance: f64,
    /// Upper bound for `sigma_eps2`; `None` means 100 times the sample
    /// variance of the OLS residuals.
    pub upper_bound: Option<f64>,
    /// Skip the grid and start the simplex here.
    pub warm_start: Option<SpatialParams>,
}

impl SpatialConfig {
    pub fn new(method: EstimationMethod) -> Self {
        Self {
            method,
            rho_grid: 21,
            max_iterations: 1000,
            tolerance: 1e-9,
            upper_bound: None,
            warm_start: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.method, EstimationMethod::Ml | EstimationMethod::Reml) {
            return Err(SaeError::InvalidInput(format!("spatial model supports ML or REML, not {}", self.method)));
        }
        if self.rho_grid < 2 && self.warm_start.is_none() {
            return Err(SaeError::InvalidInput("rho grid needs at least 2 points".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(SaeError::InvalidInput("tolerance must be > 0".into()));
        }
        Ok(())
    }
}

/// Fits `(sigma_eps2, rho)` by ML or REML.
///
/// A grid over `rho` with the `sigma_eps2` profile maximized at each point
/// supplies the start; a bounded Nelder-Mead simplex then refines both
/// parameters jointly. `beta` is the GLS estimate at the optimum.
pub fn estimate_spatial(dataset: &Dataset, sar: &SarStructure, cfg: &SpatialConfig) -> Result<FitResult> {
    cfg.validate()?;
    if sar.areas() != dataset.areas() {
        return Err(SaeError::InvalidInput("W and dataset sizes differ".into()));
    }
    let upper = match cfg.upper_bound {
        Some(u) if u > 0.0 => u,
        Some(_) => return Err(SaeError::InvalidInput("upper bound must be > 0".into())),
        None => variance::default_upper_bound(dataset)?,
    };
    let (rho_lo, rho_hi) = sar.search_interval();
    if !(rho_lo < rho_hi) {
        return Err(SaeError::InvalidInput("empty rho search interval".into()));
    }
    let method = cfg.method;
    let objective = |s2: f64, rho: f64| -> f64 {
        match evaluate(dataset, sar, SpatialParams::new(s2, rho), Route::Auto) {
            Ok(ev) => {
                let v = ev.criterion(method);
                if v.is_finite() {
                    -v
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    };

    let mut evaluations = 0usize;
    let start = match cfg.warm_start {
        Some(p) => SpatialParams::new(p.sigma_eps2.clamp(0.0, upper), p.rho.clamp(rho_lo, rho_hi)),
        None => {
            let basic = variance::estimate_reml(dataset, &VarianceMethod {
                upper_bound: Some(upper),
                ..VarianceMethod::new(EstimationMethod::Reml)
            })?;
            let s_ref = basic.params.sigma_u2().unwrap_or(0.0);
            let scale = variance::default_upper_bound(dataset)? / 100.0;
            let inner_hi = (4.0 * s_ref).max(scale).min(upper);
            let mut best = (f64::INFINITY, SpatialParams::new(s_ref, 0.0));
            let n = cfg.rho_grid;
            for k in 0..n {
                let rho = rho_lo + (rho_hi - rho_lo) * k as f64 / (n - 1) as f64;
                let (s2, val, used) = profile_sigma(&objective, rho, inner_hi, upper);
                evaluations += used;
                if val < best.0 {
                    best = (val, SpatialParams::new(s2, rho));
                }
            }
            // rho = 0 is the basic model; keep it as a candidate
            let v0 = objective(s_ref, 0.0);
            evaluations += 1;
            if v0 < best.0 {
                best = (v0, SpatialParams::new(s_ref, 0.0));
            }
            if !best.0.is_finite() {
                return Err(SaeError::SingularCovariance);
            }
            best.1
        }
    };

    let grid_step = (rho_hi - rho_lo) / (cfg.rho_grid.max(2) - 1) as f64;
    let rho_step = if cfg.warm_start.is_some() { 0.05_f64.min(0.25 * (rho_hi - rho_lo)) } else { 0.5 * grid_step };
    let s_scale = start.sigma_eps2.max(1e-3 * upper / 100.0);
    let s_step = 0.2 * s_scale;
    let bounds = Bounds { lower: alloc::vec![0.0, rho_lo], upper: alloc::vec![upper, rho_hi] };
    let nm = optimize::nelder_mead(
        |x| objective(x[0], x[1]),
        &[start.sigma_eps2, start.rho],
        &[s_step, rho_step],
        &bounds,
        &[s_scale, 1.0],
        cfg.tolerance,
        cfg.max_iterations,
    );
    evaluations += nm.evaluations;
    let mut params = SpatialParams::new(nm.x[0], nm.x[1]);
    let mut best_val = nm.fx;
    // the simplex never evaluates sigma_eps2 = 0 unless projected there
    let zero = objective(0.0, params.rho);
    if zero < best_val {
        params.sigma_eps2 = 0.0;
        best_val = zero;
    }
    if !best_val.is_finite() {
        return Err(SaeError::SingularCovariance);
    }
    let ev = evaluate(dataset, sar, params, Route::Auto)?;
    let mut warnings = Vec::new();
    if !nm.converged {
        warnings.push(format!("simplex stopped after {} iterations without converging", nm.iterations));
    }
    if params.rho < 0.0 {
        warnings.push(format!("negative spatial autocorrelation estimate rho = {}", params.rho));
    }
    if params.sigma_eps2 >= upper * (1.0 - 1e-9) {
        warnings.push(format!("sigma_eps2 reached the search upper bound {upper}"));
    }
    let at_rho_edge = params.rho <= rho_lo + 1e-9 || params.rho >= rho_hi - 1e-9;
    if at_rho_edge {
        warnings.push(String::from("rho estimate sits on the edge of the validity interval"));
    }
    for w in &warnings {
        log::debug!("{w}");
    }
    Ok(FitResult {
        beta: ev.gls.beta.clone(),
        beta_covariance: ev.gls.beta_cov.clone(),
        params: VarianceParams::Spatial(params),
        log_likelihood: ev.criterion(method),
        method,
        converged: nm.converged && !at_rho_edge && params.sigma_eps2 < upper * (1.0 - 1e-9),
        iterations: evaluations,
        warnings,
    })
}

/// Maximizes over `sigma_eps2` at fixed `rho`; returns `(s2, objective, evals)`.
fn profile_sigma<F: Fn(f64, f64) -> f64>(objective: &F, rho: f64, inner_hi: f64, upper: f64) -> (f64, f64, usize) {
    let mut evals = 0;
    let mut hi = inner_hi;
    loop {
        let mut count = 0;
        let r = optimize::brent_min(
            |s2| {
                count += 1;
                objective(s2, rho)
            },
            0.0,
            hi,
            1e-2,
            40,
        );
        evals += count;
        let edge = r.x > hi * 0.99 && hi < upper;
        if !edge {
            let at_zero = objective(0.0, rho);
            evals += 1;
            return if at_zero < r.fx { (0.0, at_zero, evals) } else { (r.x, r.fx, evals) };
        }
        hi = (hi * 4.0).min(upper);
    }
}


/// Dense spatial system at fixed `phi`: BLUP and the analytic MSE terms.
#[derive(Debug, Clone)]
pub struct SarSystem {
    params: SpatialParams,
    x: DMatrix<f64>,
    omega: DMatrix<f64>,
    g: SpdFactor,
    ginv_x: DMatrix<f64>,
    info: SpdFactor,
    beta_cov: DMatrix<f64>,
}

impl SarSystem {
    /// Uses the design and sampling variances of `dataset`; its response is ignored.
    pub fn new(dataset: &Dataset, sar: &SarStructure, params: SpatialParams) -> Result<Self> {
        if sar.areas() != dataset.areas() {
            return Err(SaeError::InvalidInput("W and dataset sizes differ".into()));
        }
        let (omega, g) = sar_covariance(sar, params, dataset.sigma2())?;
        let g = SpdFactor::new(g)?;
        let x = dataset.x().clone();
        let ginv_x = g.solve_mat(&x);
        let mut info_m = x.transpose() * &ginv_x;
        linalg::symmetrize(&mut info_m);
        let p = x.ncols();
        let info = SpdFactor::new(info_m).map_err(|_| SaeError::RankDeficient { rank: p - 1, cols: p })?;
        let beta_cov = info.inverse();
        Ok(Self { params, x, omega, g, ginv_x, info, beta_cov })
    }

    pub fn params(&self) -> SpatialParams {
        self.params
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn beta_covariance(&self) -> &DMatrix<f64> {
        &self.beta_cov
    }

    /// GLS coefficients `(X^t G^-1 X)^-1 X^t G^-1 y`.
    pub fn gls(&self, y: &DVector<f64>) -> DVector<f64> {
        self.info.solve_vec(&(self.ginv_x.transpose() * y))
    }

    /// `Omega G^{-1} (y - X beta)`.
    pub fn random_effects(&self, y: &DVector<f64>, beta: &DVector<f64>) -> DVector<f64> {
        let r = y - &self.x * beta;
        &self.omega * self.g.solve_vec(&r)
    }

    /// `(beta, theta)` with `theta = X beta + Omega G^{-1} (y - X beta)`.
    pub fn predict(&self, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let beta = self.gls(y);
        let u = self.random_effects(y, &beta);
        let theta = &self.x * &beta + u;
        (beta, theta)
    }

    /// Per-area `g1 = [Omega - Omega G^-1 Omega]_ii` and
    /// `g2 = d_i^t (X^t G^-1 X)^-1 d_i` with `d_i = X_i - (Omega G^-1 X)_i`.
    pub fn g1_g2(&self) -> (DVector<f64>, DVector<f64>) {
        let d = self.x.nrows();
        let ginv_omega = self.g.solve_mat(&self.omega);
        let g1 = DVector::from_iterator(
            d,
            (0..d).map(|i| {
                let shrink: f64 = (0..d).map(|k| self.omega[(i, k)] * ginv_omega[(k, i)]).sum();
                (self.omega[(i, i)] - shrink).max(0.0)
            }),
        );
        let dmat = &self.x - &self.omega * &self.ginv_x;
        let g2 = DVector::from_iterator(d, (0..d).map(|i| linalg::row_quad(&dmat, i, &self.beta_cov).max(0.0)));
        (g1, g2)
    }
}

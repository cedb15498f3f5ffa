//! Domain types shared by the basic and spatial models, plus the GLS and
//! OLS machinery both rely on.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, SaeError};
use crate::linalg::{self, SpdFactor};
use crate::spatial::SpatialParams;

/// One area's direct estimate and auxiliary information.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRecord {
    pub area_id: String,
    /// Direct survey estimate; absent for nonsampled areas.
    pub direct_estimate: Option<f64>,
    /// Known design variance of the direct estimate; absent for nonsampled areas.
    pub sampling_variance: Option<f64>,
    /// Covariate row, without the intercept (the dataset adds it).
    pub covariates: Vec<f64>,
    pub longitude: Option<f64>,
    pub latitude: Option<f64>,
    pub altitude: Option<f64>,
    /// Named variables available to the second neighbour-selection step.
    pub aux_similarity: BTreeMap<String, f64>,
    pub sample_size: u32,
}

impl AreaRecord {
    pub fn sampled(
        area_id: impl Into<String>,
        direct_estimate: f64,
        sampling_variance: f64,
        covariates: Vec<f64>,
        sample_size: u32,
    ) -> Self {
        Self {
            area_id: area_id.into(),
            direct_estimate: Some(direct_estimate),
            sampling_variance: Some(sampling_variance),
            covariates,
            longitude: None,
            latitude: None,
            altitude: None,
            aux_similarity: BTreeMap::new(),
            sample_size,
        }
    }

    pub fn nonsampled(area_id: impl Into<String>, covariates: Vec<f64>) -> Self {
        Self {
            area_id: area_id.into(),
            direct_estimate: None,
            sampling_variance: None,
            covariates,
            longitude: None,
            latitude: None,
            altitude: None,
            aux_similarity: BTreeMap::new(),
            sample_size: 0,
        }
    }

    pub fn with_coordinates(mut self, longitude: f64, latitude: f64) -> Self {
        self.longitude = Some(longitude);
        self.latitude = Some(latitude);
        self
    }

    pub fn with_altitude(mut self, altitude: f64) -> Self {
        self.altitude = Some(altitude);
        self.aux_similarity.insert("altitude".to_string(), altitude);
        self
    }

    pub fn with_similarity(mut self, name: impl Into<String>, value: f64) -> Self {
        self.aux_similarity.insert(name.into(), value);
        self
    }

    pub fn is_sampled(&self) -> bool {
        self.sample_size > 0
    }

    /// Similarity variable `name`; `altitude` falls back to the altitude field.
    pub fn similarity(&self, name: &str) -> Option<f64> {
        self.aux_similarity
            .get(name)
            .copied()
            .or_else(|| if name == "altitude" { self.altitude } else { None })
    }

    fn validate(&self, allow_zero_variance: bool) -> Result<()> {
        let bad = |what: &str| Err(SaeError::InvalidInput(format!("area {}: {}", self.area_id, what)));
        if self.sample_size == 0 {
            if self.direct_estimate.is_some() || self.sampling_variance.is_some() {
                return bad("nonsampled area carries a direct estimate");
            }
            return Ok(());
        }
        match (self.direct_estimate, self.sampling_variance) {
            (Some(y), Some(v)) => {
                if !y.is_finite() {
                    return bad("direct estimate is not finite");
                }
                if !v.is_finite() || v < 0.0 {
                    return bad("sampling variance must be finite and >= 0");
                }
                if v == 0.0 && !allow_zero_variance {
                    return bad("zero sampling variance requires allow_zero_variance");
                }
            }
            _ => return bad("sampled area lacks direct estimate or sampling variance"),
        }
        if let Some(lon) = self.longitude {
            if !(-180.0..=180.0).contains(&lon) {
                return bad("longitude outside [-180, 180]");
            }
        }
        if let Some(lat) = self.latitude {
            if !(-90.0..=90.0).contains(&lat) {
                return bad("latitude outside [-90, 90]");
            }
        }
        if self.covariates.iter().any(|c| !c.is_finite()) {
            return bad("non-finite covariate");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetOptions {
    /// Prepend a column of ones to the covariates.
    pub intercept: bool,
    /// Permit `sampling_variance == 0` (such areas get `gamma = 1`).
    pub allow_zero_variance: bool,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self { intercept: true, allow_zero_variance: false }
    }
}

/// The sampled areas of one model-fitting group.
///
/// Immutable once built; `D >= p + 2` and the design matrix has full
/// column rank.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<AreaRecord>,
    x: DMatrix<f64>,
    y: DVector<f64>,
    sigma2: DVector<f64>,
    intercept: bool,
    pub group_label: Option<String>,
}

impl Dataset {
    pub fn new(records: Vec<AreaRecord>, options: DatasetOptions) -> Result<Self> {
        if records.is_empty() {
            return Err(SaeError::InvalidInput("no records".into()));
        }
        let ncov = records[0].covariates.len();
        let mut seen = BTreeMap::new();
        for r in &records {
            r.validate(options.allow_zero_variance)?;
            if !r.is_sampled() {
                return Err(SaeError::InvalidInput(format!(
                    "area {} is nonsampled; datasets hold sampled areas only",
                    r.area_id
                )));
            }
            if r.covariates.len() != ncov {
                return Err(SaeError::InvalidInput(format!(
                    "area {} has {} covariates, expected {}",
                    r.area_id,
                    r.covariates.len(),
                    ncov
                )));
            }
            if seen.insert(r.area_id.clone(), ()).is_some() {
                return Err(SaeError::InvalidInput(format!("duplicate area_id {}", r.area_id)));
            }
        }
        let x = design_matrix(&records, options.intercept);
        let y = DVector::from_iterator(records.len(), records.iter().map(|r| r.direct_estimate.unwrap()));
        let sigma2 =
            DVector::from_iterator(records.len(), records.iter().map(|r| r.sampling_variance.unwrap()));
        Self::check_shape(&x)?;
        Ok(Self { records, x, y, sigma2, intercept: options.intercept, group_label: None })
    }

    /// Builds a dataset straight from arrays; `x` is used as the full design
    /// matrix (no intercept is added). Area ids are `"0"`, `"1"`, ...
    pub fn from_arrays(x: DMatrix<f64>, y: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        let d = x.nrows();
        if y.len() != d || sigma2.len() != d {
            return Err(SaeError::InvalidInput("x, y and sigma2 lengths disagree".into()));
        }
        let records: Vec<AreaRecord> = (0..d)
            .map(|i| {
                AreaRecord::sampled(
                    i.to_string(),
                    y[i],
                    sigma2[i],
                    x.row(i).iter().copied().collect(),
                    1,
                )
            })
            .collect();
        Dataset::new(records, DatasetOptions { intercept: false, allow_zero_variance: true })
    }

    fn check_shape(x: &DMatrix<f64>) -> Result<()> {
        let (d, p) = x.shape();
        if p == 0 {
            return Err(SaeError::InvalidInput("design matrix has no columns".into()));
        }
        if d < p + 2 {
            return Err(SaeError::InsufficientAreas { areas: d, params: p });
        }
        let rank = linalg::numerical_rank(x);
        if rank < p {
            return Err(SaeError::RankDeficient { rank, cols: p });
        }
        Ok(())
    }

    pub fn with_group_label(mut self, label: impl Into<String>) -> Self {
        self.group_label = Some(label.into());
        self
    }

    /// Same areas, design and variances with a new response vector.
    pub fn with_response(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.areas() {
            return Err(SaeError::InvalidInput("response length mismatch".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::InvalidInput("non-finite response".into()));
        }
        let mut out = self.clone();
        for (r, &v) in out.records.iter_mut().zip(y.iter()) {
            r.direct_estimate = Some(v);
        }
        out.y = y.clone();
        Ok(out)
    }

    /// Number of areas `D`.
    pub fn areas(&self) -> usize {
        self.x.nrows()
    }

    /// Number of regression coefficients `p`, intercept included.
    pub fn n_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn records(&self) -> &[AreaRecord] {
        &self.records
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn sigma2(&self) -> &DVector<f64> {
        &self.sigma2
    }

    pub fn has_intercept(&self) -> bool {
        self.intercept
    }

    /// Design row for an arbitrary record with this dataset's intercept convention.
    pub fn design_row(&self, record: &AreaRecord) -> Result<DVector<f64>> {
        let expected = self.n_params() - usize::from(self.intercept);
        if record.covariates.len() != expected {
            return Err(SaeError::InvalidInput(format!(
                "area {} has {} covariates, expected {}",
                record.area_id,
                record.covariates.len(),
                expected
            )));
        }
        let mut row = Vec::with_capacity(self.n_params());
        if self.intercept {
            row.push(1.0);
        }
        row.extend_from_slice(&record.covariates);
        Ok(DVector::from_vec(row))
    }
}

fn design_matrix(records: &[AreaRecord], intercept: bool) -> DMatrix<f64> {
    let ncov = records[0].covariates.len();
    let p = ncov + usize::from(intercept);
    DMatrix::from_fn(records.len(), p, |i, j| {
        if intercept {
            if j == 0 {
                1.0
            } else {
                records[i].covariates[j - 1]
            }
        } else {
            records[i].covariates[j]
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EstimationMethod {
    Ml,
    Reml,
    Moments,
    FhIterative,
}

impl fmt::Display for EstimationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EstimationMethod::Ml => "ML",
            EstimationMethod::Reml => "REML",
            EstimationMethod::Moments => "Moments",
            EstimationMethod::FhIterative => "FH",
        })
    }
}

/// Estimated variance parameters of either model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarianceParams {
    Basic { sigma_u2: f64 },
    Spatial(SpatialParams),
}

impl VarianceParams {
    pub fn sigma_u2(&self) -> Option<f64> {
        match self {
            VarianceParams::Basic { sigma_u2 } => Some(*sigma_u2),
            VarianceParams::Spatial(_) => None,
        }
    }

    pub fn spatial(&self) -> Option<SpatialParams> {
        match self {
            VarianceParams::Spatial(p) => Some(*p),
            VarianceParams::Basic { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// `(X^t V^{-1} X)^{-1}` at the estimated variance parameters.
    pub beta_covariance: DMatrix<f64>,
    pub params: VarianceParams,
    /// Criterion value at the estimate (constants omitted). For moments and
    /// FH fits this is the ML log-likelihood.
    pub log_likelihood: f64,
    pub method: EstimationMethod,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Diagonal covariance `diag(sigma_u2 + sigma_i^2)` of the basic model.
pub fn assemble_v(dataset: &Dataset, sigma_u2: f64) -> Result<DMatrix<f64>> {
    if !(sigma_u2 >= 0.0) || !sigma_u2.is_finite() {
        return Err(SaeError::Domain(format!("sigma_u2 = {sigma_u2} must be finite and >= 0")));
    }
    let diag = dataset.sigma2().map(|s| s + sigma_u2);
    if diag.iter().all(|&v| v == 0.0) {
        return Err(SaeError::SingularCovariance);
    }
    Ok(DMatrix::from_diagonal(&diag))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlsFit {
    pub beta: DVector<f64>,
    /// `(X^t V^{-1} X)^{-1}`.
    pub beta_cov: DMatrix<f64>,
}

/// Generalized least squares under a dense covariance `v`.
pub fn gls_beta(dataset: &Dataset, v: &DMatrix<f64>) -> Result<GlsFit> {
    gls_dense(dataset.x(), dataset.y(), v)
}

pub(crate) fn gls_dense(x: &DMatrix<f64>, y: &DVector<f64>, v: &DMatrix<f64>) -> Result<GlsFit> {
    if v.nrows() != x.nrows() || v.ncols() != x.nrows() {
        return Err(SaeError::InvalidInput("covariance dimension mismatch".into()));
    }
    let vf = SpdFactor::new(v.clone())?;
    let vinv_x = vf.solve_mat(x);
    let vinv_y = vf.solve_vec(y);
    gls_from_products(x.transpose() * &vinv_x, x.transpose() * vinv_y)
}

pub(crate) fn gls_from_products(info: DMatrix<f64>, cross: DVector<f64>) -> Result<GlsFit> {
    let p = info.nrows();
    let f = SpdFactor::new(info).map_err(|_| SaeError::RankDeficient { rank: p.saturating_sub(1), cols: p })?;
    let beta = f.solve_vec(&cross);
    Ok(GlsFit { beta, beta_cov: f.inverse() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub beta: DVector<f64>,
    /// Diagonal of the hat matrix, `h_i = X_i (X^t X)^{-1} X_i^t`.
    pub leverages: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Ordinary least squares with leverages.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<OlsFit> {
    let (d, p) = x.shape();
    if y.len() != d {
        return Err(SaeError::InvalidInput("response length mismatch".into()));
    }
    if d < p {
        return Err(SaeError::InsufficientAreas { areas: d, params: p });
    }
    let rank = linalg::numerical_rank(x);
    if rank < p {
        return Err(SaeError::RankDeficient { rank, cols: p });
    }
    let xtx = SpdFactor::new(x.transpose() * x).map_err(|_| SaeError::RankDeficient { rank, cols: p })?;
    let beta = xtx.solve_vec(&(x.transpose() * y));
    let xtx_inv = xtx.inverse();
    let leverages = DVector::from_iterator(d, (0..d).map(|i| linalg::row_quad(x, i, &xtx_inv)));
    let residuals = y - x * &beta;
    Ok(OlsFit { beta, leverages, residuals })
}

pub fn ols_beta(dataset: &Dataset) -> Result<OlsFit> {
    ols(dataset.x(), dataset.y())
}

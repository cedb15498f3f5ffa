//! EBLUP (basic model) and SEBLUP (spatial model) predictors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DVector;

use crate::error::{Result, SaeError};
use crate::math;
use crate::model::{AreaRecord, Dataset, FitResult};
use crate::spatial::{SarStructure, SarSystem};

/// Shrinkage factor `sigma_u2 / (sigma_u2 + sigma_i2)`.
pub fn gamma(sigma_u2: f64, sigma_i2: f64) -> Result<f64> {
    if !(sigma_u2 >= 0.0) || !(sigma_i2 >= 0.0) {
        return Err(SaeError::Domain(format!("gamma needs nonnegative variances, got ({sigma_u2}, {sigma_i2})")));
    }
    if sigma_u2 == 0.0 && sigma_i2 == 0.0 {
        return Err(SaeError::Domain("gamma undefined when both variances are zero".into()));
    }
    Ok(sigma_u2 / (sigma_u2 + sigma_i2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MethodLabel {
    Direct,
    Eblup,
    Seblup,
}

impl fmt::Display for MethodLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MethodLabel::Direct => "DIRECT",
            MethodLabel::Eblup => "EBLUP",
            MethodLabel::Seblup => "SEBLUP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub area_id: String,
    pub sample_size: u32,
    pub direct: Option<f64>,
    pub direct_se: Option<f64>,
    pub predictor: f64,
    /// Weight on the direct estimate (basic model only).
    pub gamma: Option<f64>,
    pub method: MethodLabel,
    pub mse: Option<f64>,
    pub cv: Option<f64>,
}

/// Coefficient of variation `sqrt(mse) / |predictor|`; absent for a zero predictor.
pub fn coefficient_of_variation(predictor: f64, mse: f64) -> Option<f64> {
    if predictor == 0.0 || !(mse >= 0.0) {
        None
    } else {
        Some(math::sqrt(mse) / math::abs(predictor))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    pub method: MethodLabel,
    pub rows: Vec<PredictionRow>,
}

impl PredictionTable {
    pub fn predictors(&self) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.predictor))
    }

    /// Attaches MSE estimates (in row order) and derives the CVs.
    pub fn set_mse(&mut self, mse: &[f64]) -> Result<()> {
        if mse.len() != self.rows.len() {
            return Err(SaeError::InvalidInput("mse length differs from table".into()));
        }
        for (row, &m) in self.rows.iter_mut().zip(mse) {
            row.mse = Some(m);
            row.cv = coefficient_of_variation(row.predictor, m);
        }
        Ok(())
    }

    /// Clamps predictors into `[lo, hi]` (e.g. proportions); CVs are recomputed.
    pub fn clamp(&mut self, lo: f64, hi: f64) {
        for row in &mut self.rows {
            row.predictor = row.predictor.clamp(lo, hi);
            if let Some(m) = row.mse {
                row.cv = coefficient_of_variation(row.predictor, m);
            }
        }
    }
}

fn row_for(record: &AreaRecord, predictor: f64, gamma: Option<f64>, method: MethodLabel) -> PredictionRow {
    PredictionRow {
        area_id: record.area_id.clone(),
        sample_size: record.sample_size,
        direct: record.direct_estimate,
        direct_se: record.sampling_variance.map(math::sqrt),
        predictor,
        gamma,
        method,
        mse: None,
        cv: None,
    }
}

/// The direct estimates themselves, with `mse = sigma_i^2`.
pub fn direct(dataset: &Dataset) -> PredictionTable {
    let rows = dataset
        .records()
        .iter()
        .map(|r| {
            let y = r.direct_estimate.unwrap_or(f64::NAN);
            let mut row = row_for(r, y, None, MethodLabel::Direct);
            row.mse = r.sampling_variance;
            row.cv = r.sampling_variance.and_then(|v| coefficient_of_variation(y, v));
            row
        })
        .collect();
    PredictionTable { method: MethodLabel::Direct, rows }
}

/// EBLUP `gamma_i Y_i + (1 - gamma_i) X_i beta` for the sampled areas.
pub fn eblup(dataset: &Dataset, fit: &FitResult) -> Result<PredictionTable> {
    eblup_with_nonsampled(dataset, fit, &[])
}

/// EBLUP for the sampled areas followed by the synthetic `X_i beta`
/// (`gamma = 0`) for each nonsampled record.
pub fn eblup_with_nonsampled(dataset: &Dataset, fit: &FitResult, nonsampled: &[AreaRecord]) -> Result<PredictionTable> {
    let sigma_u2 = fit
        .params
        .sigma_u2()
        .ok_or_else(|| SaeError::InvalidInput("EBLUP needs a basic-model fit".into()))?;
    if fit.beta.len() != dataset.n_params() {
        return Err(SaeError::InvalidInput("fit and dataset disagree on p".into()));
    }
    let synthetic = dataset.x() * &fit.beta;
    let mut rows = Vec::with_capacity(dataset.areas() + nonsampled.len());
    for (i, r) in dataset.records().iter().enumerate() {
        let g = gamma(sigma_u2, dataset.sigma2()[i])?;
        let value = g * dataset.y()[i] + (1.0 - g) * synthetic[i];
        rows.push(row_for(r, value, Some(g), MethodLabel::Eblup));
    }
    for r in nonsampled {
        if r.is_sampled() {
            return Err(SaeError::InvalidInput(format!("area {} is sampled", r.area_id)));
        }
        let xrow = dataset.design_row(r)?;
        rows.push(row_for(r, xrow.dot(&fit.beta), Some(0.0), MethodLabel::Eblup));
    }
    Ok(PredictionTable { method: MethodLabel::Eblup, rows })
}

/// SEBLUP `X_i beta(phi) + [Omega G^-1 (Y - X beta(phi))]_i` for the sampled areas.
pub fn seblup(dataset: &Dataset, sar: &SarStructure, fit: &FitResult) -> Result<PredictionTable> {
    let params = fit
        .params
        .spatial()
        .ok_or_else(|| SaeError::InvalidInput("SEBLUP needs a spatial fit".into()))?;
    let sys = SarSystem::new(dataset, sar, params)?;
    let (_, theta) = sys.predict(dataset.y());
    let rows = dataset
        .records()
        .iter()
        .zip(theta.iter())
        .map(|(r, &t)| row_for(r, t, None, MethodLabel::Seblup))
        .collect();
    Ok(PredictionTable { method: MethodLabel::Seblup, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EstimationMethod, VarianceParams};
    use crate::variance::{self, VarianceMethod};
    use alloc::vec;
    use nalgebra::DMatrix;

    fn sample() -> Dataset {
        let x = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        Dataset::from_arrays(x, vec![1.0, 0.5, 2.5, 2.0, 4.5, 4.0], vec![0.5, 1.0, 0.2, 2.0, 0.7, 0.1]).unwrap()
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(gamma(1.0, 1.0).unwrap(), 0.5);
        assert_eq!(gamma(0.0, 3.0).unwrap(), 0.0);
        assert_eq!(gamma(3.0, 0.0).unwrap(), 1.0);
        assert!(gamma(0.0, 0.0).is_err());
        assert!(gamma(-1.0, 1.0).is_err());
    }

    #[test]
    fn zero_variance_gives_synthetic() {
        let d = sample();
        let mut fit = variance::estimate_reml(&d, &VarianceMethod::new(EstimationMethod::Reml)).unwrap();
        fit.params = VarianceParams::Basic { sigma_u2: 0.0 };
        let t = eblup(&d, &fit).unwrap();
        let syn = d.x() * &fit.beta;
        for (r, s) in t.rows.iter().zip(syn.iter()) {
            assert_eq!(r.predictor, *s);
        }
    }

    #[test]
    fn exact_direct_estimate_is_kept() {
        let x = DMatrix::from_element(4, 1, 1.0);
        let d = Dataset::from_arrays(x, vec![1.0, 2.0, 3.0, 7.0], vec![0.0, 1.0, 1.0, 1.0]).unwrap();
        let fit = variance::estimate_moments(&d).unwrap();
        assert!(fit.params.sigma_u2().unwrap() > 0.0);
        let t = eblup(&d, &fit).unwrap();
        assert_eq!(t.rows[0].predictor, 1.0);
        assert_eq!(t.rows[0].gamma, Some(1.0));
    }

    #[test]
    fn nonsampled_are_synthetic() {
        let d = sample();
        let fit = variance::estimate_reml(&d, &VarianceMethod::new(EstimationMethod::Reml)).unwrap();
        let ns = AreaRecord::nonsampled("far", vec![1.0, 10.0]);
        let t = eblup_with_nonsampled(&d, &fit, &[ns]).unwrap();
        let last = t.rows.last().unwrap();
        assert_eq!(last.gamma, Some(0.0));
        assert!((last.predictor - (fit.beta[0] + 10.0 * fit.beta[1])).abs() < 1e-12);
        assert_eq!(last.direct, None);
    }

    #[test]
    fn cv_absent_for_zero_predictor() {
        assert_eq!(coefficient_of_variation(0.0, 1.0), None);
        assert_eq!(coefficient_of_variation(0.5, 0.01), Some(0.2));
    }
}

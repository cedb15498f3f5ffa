//! Bootstrap MSE for the SEBLUP.
//!
//! Each replicate regenerates `Y^b` from the fitted spatial model, refits
//! `phi`, and compares the SEBLUP at the refitted `phi^b` with the SBLUP at
//! the original `phi`. One pass yields both the g3 estimate and the
//! bias-corrected combined MSE.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, SaeError};
use crate::exec;
use crate::math;
use crate::model::{Dataset, EstimationMethod, FitResult};
use crate::spatial::{self, SarStructure, SarSystem, SpatialConfig, SpatialParams};

/// Smallest replicate count accepted outside of tests.
pub const PRODUCTION_MIN_REPLICATES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapMode {
    Parametric,
    Nonparametric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub mode: BootstrapMode,
    /// Settings for the per-replicate refit. The warm start is always
    /// replaced by the original estimate.
    pub estimation: SpatialConfig,
    /// Test hook: skip the refit and use `phi^b = phi`.
    pub freeze_reestimation: bool,
}

impl BootstrapConfig {
    pub fn new(method: EstimationMethod, seed: u64) -> Self {
        let mut estimation = SpatialConfig::new(method);
        estimation.tolerance = 1e-6;
        Self { replicates: 400, seed, mode: BootstrapMode::Parametric, estimation, freeze_reestimation: false }
    }

    pub fn with_mode(mut self, mode: BootstrapMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_replicates(mut self, replicates: usize) -> Self {
        self.replicates = replicates;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(SaeError::InvalidInput("bootstrap needs at least 2 replicates".into()));
        }
        if !matches!(self.estimation.method, EstimationMethod::Ml | EstimationMethod::Reml) {
            return Err(SaeError::InvalidInput("bootstrap refits use ML or REML".into()));
        }
        Ok(())
    }

    /// Rejects replicate counts below [`PRODUCTION_MIN_REPLICATES`].
    pub fn validate_production(&self) -> Result<()> {
        self.validate()?;
        if self.replicates < PRODUCTION_MIN_REPLICATES {
            return Err(SaeError::InvalidInput(format!(
                "bootstrap needs at least {PRODUCTION_MIN_REPLICATES} replicates, got {}",
                self.replicates
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    /// Mean squared SEBLUP-SBLUP difference per area.
    pub g3: DVector<f64>,
    /// `g1 + g2` at the original estimate.
    pub g12: DVector<f64>,
    /// Mean of `g1 + g2` at the replicate estimates.
    pub g12_replicates: DVector<f64>,
    /// `2 g12 - g12_replicates + g3`, floored at `g3` where negative.
    pub mse: DVector<f64>,
    /// Standard deviation of the replicate estimates `phi^b`; zero when
    /// re-estimation is frozen.
    pub phi_se: SpatialParams,
    pub replicates_used: usize,
    pub failures: usize,
    pub warnings: Vec<String>,
}

/// Centers `v` and rescales it to empirical variance `target` (mean of squares).
fn center_scale(v: &DVector<f64>, target: f64) -> DVector<f64> {
    let m = v.mean();
    let c = v.map(|x| x - m);
    let var = c.norm_squared() / c.len() as f64;
    if var > 0.0 {
        c * math::sqrt(target / var)
    } else {
        c
    }
}

enum Generator {
    Parametric { sd_eps: f64 },
    Nonparametric { eps_pool: DVector<f64>, resid_pool: DVector<f64> },
}

struct Replicate {
    sq_diff: DVector<f64>,
    g12: DVector<f64>,
    phi: SpatialParams,
}

/// Runs the bootstrap once, returning g3 and the combined MSE together.
pub fn run(dataset: &Dataset, sar: &SarStructure, fit: &FitResult, cfg: &BootstrapConfig) -> Result<BootstrapOutcome> {
    cfg.validate()?;
    let phi = fit
        .params
        .spatial()
        .ok_or_else(|| SaeError::InvalidInput("bootstrap needs a spatial fit".into()))?;
    sar.check_rho(phi.rho)?;
    let d = dataset.areas();
    let base = SarSystem::new(dataset, sar, phi)?;
    let (g1, g2) = base.g1_g2();
    let g12 = &g1 + &g2;
    let beta = base.gls(dataset.y());
    let mean = dataset.x() * &beta;
    let a_inv = sar.a_matrix(phi.rho).try_inverse().ok_or(SaeError::SingularSpatial { rho: phi.rho })?;
    let sd_e: DVector<f64> = dataset.sigma2().map(math::sqrt);

    let generator = match cfg.mode {
        BootstrapMode::Parametric => Generator::Parametric { sd_eps: math::sqrt(phi.sigma_eps2) },
        BootstrapMode::Nonparametric => {
            let u_hat = base.random_effects(dataset.y(), &beta);
            let eps_hat = sar.a_matrix(phi.rho) * &u_hat;
            let eps_pool = center_scale(&eps_hat, phi.sigma_eps2);
            let resid = DVector::from_iterator(
                d,
                (0..d).map(|i| if sd_e[i] > 0.0 { (dataset.y()[i] - mean[i] - u_hat[i]) / sd_e[i] } else { 0.0 }),
            );
            Generator::Nonparametric { eps_pool, resid_pool: center_scale(&resid, 1.0) }
        }
    };

    let mut refit_cfg = cfg.estimation;
    refit_cfg.warm_start = Some(phi);

    let one = |b: usize| -> Result<Replicate> {
        let mut rng = exec::replicate_rng(cfg.seed, b as u64);
        let (eps, z): (DVector<f64>, DVector<f64>) = match &generator {
            Generator::Parametric { sd_eps } => {
                let e1 = DVector::from_iterator(d, (0..d).map(|_| sd_eps * Distribution::<f64>::sample(&StandardNormal, &mut rng)));
                let e2 = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
                (e1, e2)
            }
            Generator::Nonparametric { eps_pool, resid_pool } => {
                let e1 = DVector::from_iterator(d, (0..d).map(|_| eps_pool[rng.random_range(0..d)]));
                let e2 = DVector::from_iterator(d, (0..d).map(|_| resid_pool[rng.random_range(0..d)]));
                (e1, e2)
            }
        };
        let u = &a_inv * eps;
        let y_b = &mean + u + z.component_mul(&sd_e);
        let (_, sblup) = base.predict(&y_b);
        if cfg.freeze_reestimation {
            return Ok(Replicate { sq_diff: DVector::zeros(d), g12: g12.clone(), phi });
        }
        let ds_b = dataset.with_response(&y_b)?;
        let fit_b = spatial::estimate_spatial(&ds_b, sar, &refit_cfg)?;
        let phi_b: SpatialParams = fit_b.params.spatial().expect("spatial fit");
        let sys_b = SarSystem::new(dataset, sar, phi_b)?;
        let (_, seblup) = sys_b.predict(&y_b);
        let (g1b, g2b) = sys_b.g1_g2();
        let sq_diff = (seblup - sblup).map(|v| v * v);
        if sq_diff.iter().any(|v| !v.is_finite()) {
            return Err(SaeError::Domain("non-finite bootstrap prediction".into()));
        }
        Ok(Replicate { sq_diff, g12: g1b + g2b, phi: phi_b })
    };

    let outcomes = exec::map_indexed(cfg.replicates, one);
    let mut g3 = DVector::zeros(d);
    let mut g12_rep = DVector::zeros(d);
    let mut phis = Vec::with_capacity(cfg.replicates);
    let mut used = 0usize;
    let mut failures = 0usize;
    for (b, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(r) => {
                g3 += r.sq_diff;
                g12_rep += r.g12;
                phis.push(r.phi);
                used += 1;
            }
            Err(e) => {
                log::warn!("bootstrap replicate {b} dropped: {e}");
                failures += 1;
            }
        }
    }
    if failures * 10 > cfg.replicates {
        return Err(SaeError::TooManyFailures { failed: failures, total: cfg.replicates });
    }
    g3 /= used as f64;
    g12_rep /= used as f64;
    if cfg.freeze_reestimation {
        g12_rep = g12.clone();
    }

    let mut warnings = Vec::new();
    if failures > 0 {
        warnings.push(format!("{failures} of {} bootstrap replicates dropped", cfg.replicates));
    }
    let mut mse = &g12 * 2.0 - &g12_rep + &g3;
    let mut floored = 0;
    for i in 0..d {
        if mse[i] < 0.0 {
            mse[i] = g3[i];
            floored += 1;
        }
    }
    if floored > 0 {
        warnings.push(format!("combined bootstrap MSE negative in {floored} areas; replaced by g3"));
    }
    let phi_se = SpatialParams::new(std_dev(phis.iter().map(|p| p.sigma_eps2)), std_dev(phis.iter().map(|p| p.rho)));
    Ok(BootstrapOutcome { g3, g12, g12_replicates: g12_rep, mse, phi_se, replicates_used: used, failures, warnings })
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    // Shifted by the first value so identical inputs give exactly zero.
    let v0 = values.clone().next().unwrap_or(0.0);
    let (s1, s2) = values.fold((0.0, 0.0), |(s1, s2), v| (s1 + (v - v0), s2 + (v - v0) * (v - v0)));
    math::sqrt(((s2 - s1 * s1 / n as f64) / (n - 1) as f64).max(0.0))
}

/// Parametric bootstrap estimate of g3.
pub fn parametric_bootstrap_g3(dataset: &Dataset, sar: &SarStructure, fit: &FitResult, cfg: &BootstrapConfig) -> Result<DVector<f64>> {
    let cfg = cfg.clone().with_mode(BootstrapMode::Parametric);
    Ok(run(dataset, sar, fit, &cfg)?.g3)
}

/// Nonparametric bootstrap estimate of g3, resampling the fitted
/// innovations and the standardized residuals.
pub fn nonparametric_bootstrap_g3(dataset: &Dataset, sar: &SarStructure, fit: &FitResult, cfg: &BootstrapConfig) -> Result<DVector<f64>> {
    let cfg = cfg.clone().with_mode(BootstrapMode::Nonparametric);
    Ok(run(dataset, sar, fit, &cfg)?.g3)
}

/// Bias-corrected bootstrap MSE `2 (g1 + g2)(phi) - mean_b (g1 + g2)(phi^b) + g3`.
pub fn mse_bootstrap_combined(dataset: &Dataset, sar: &SarStructure, fit: &FitResult, cfg: &BootstrapConfig) -> Result<DVector<f64>> {
    Ok(run(dataset, sar, fit, cfg)?.mse)
}

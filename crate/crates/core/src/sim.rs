//! Synthetic data with known truth for Monte-Carlo checks.
//!
//! A [`SimLayout`] fixes everything that does not change between replicates
//! (covariates, coordinates, sample sizes, sampling variances, `W`); each
//! replicate then draws fresh random effects and sampling errors.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};

use crate::error::{Result, SaeError};
use crate::exec;
use crate::model::{AreaRecord, Dataset, DatasetOptions};
use crate::neighbors;
use crate::spatial::{ProximityMatrix, SarStructure, SpatialConfig};
use crate::variance::{self, VarianceMethod};
use crate::{math, predict};

#[derive(Debug, Clone, PartialEq)]
pub enum Sigma2Law {
    Constant(f64),
    Uniform { lo: f64, hi: f64 },
    /// Five equal-size consecutive groups with the given variances.
    PatternOfFive([f64; 5]),
    /// `c / n_i`, tying precision to the sample size.
    InverseSampleSize(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectsLaw {
    Basic { sigma_u2: f64 },
    Spatial { sigma_eps2: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum NeighborSpec {
    TwoStep { k1: usize, k2: usize, similarity: Option<String> },
    Explicit(DMatrix<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorLaw {
    Gaussian,
    /// `sd * (E - 1)` with `E ~ Exp(1)`: mean zero, right-skewed.
    ShiftedExponential,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoordinateLaw {
    pub longitude: (f64, f64),
    pub latitude: (f64, f64),
    pub altitude: (f64, f64),
}

impl Default for CoordinateLaw {
    fn default() -> Self {
        Self { longitude: (-81.0, -69.0), latitude: (-18.0, 0.0), altitude: (0.0, 4500.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimDesign {
    pub areas: usize,
    /// Covariates besides the intercept, each drawn standard normal.
    pub covariates: usize,
    /// Length `covariates + 1`, intercept first.
    pub beta: Vec<f64>,
    pub effects: EffectsLaw,
    pub sigma2_law: Sigma2Law,
    /// Inclusive uniform range of sample sizes.
    pub sample_size: (u32, u32),
    pub coordinates: CoordinateLaw,
    /// Required for spatial effects; optional otherwise.
    pub neighbors: Option<NeighborSpec>,
    pub error_law: ErrorLaw,
    pub seed: u64,
}

impl SimDesign {
    pub fn basic(areas: usize, sigma_u2: f64, sigma2_law: Sigma2Law, seed: u64) -> Self {
        Self {
            areas,
            covariates: 1,
            beta: alloc::vec![1.0, 0.5],
            effects: EffectsLaw::Basic { sigma_u2 },
            sigma2_law,
            sample_size: (2, 60),
            coordinates: CoordinateLaw::default(),
            neighbors: None,
            error_law: ErrorLaw::Gaussian,
            seed,
        }
    }

    pub fn spatial(areas: usize, sigma_eps2: f64, rho: f64, sigma2_law: Sigma2Law, neighbors: NeighborSpec, seed: u64) -> Self {
        Self {
            effects: EffectsLaw::Spatial { sigma_eps2, rho },
            neighbors: Some(neighbors),
            ..Self::basic(areas, 0.0, sigma2_law, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.len() != self.covariates + 1 {
            return Err(SaeError::InvalidInput("beta must have covariates + 1 entries".into()));
        }
        if self.sample_size.0 == 0 || self.sample_size.0 > self.sample_size.1 {
            return Err(SaeError::InvalidInput("sample size range must satisfy 1 <= lo <= hi".into()));
        }
        let nonneg = |v: f64| v >= 0.0 && v.is_finite();
        let ok = match &self.sigma2_law {
            Sigma2Law::Constant(s) | Sigma2Law::InverseSampleSize(s) => nonneg(*s),
            Sigma2Law::Uniform { lo, hi } => nonneg(*lo) && nonneg(*hi) && lo <= hi,
            Sigma2Law::PatternOfFive(v) => v.iter().all(|&s| nonneg(s)),
        };
        if !ok {
            return Err(SaeError::InvalidInput("invalid sampling-variance law".into()));
        }
        match self.effects {
            EffectsLaw::Basic { sigma_u2 } if !nonneg(sigma_u2) => Err(SaeError::InvalidInput("sigma_u2 must be >= 0".into())),
            EffectsLaw::Spatial { sigma_eps2, .. } if !nonneg(sigma_eps2) => {
                Err(SaeError::InvalidInput("sigma_eps2 must be >= 0".into()))
            }
            EffectsLaw::Spatial { .. } if self.neighbors.is_none() => {
                Err(SaeError::InvalidInput("spatial effects need a neighbour specification".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One synthetic replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDraw {
    pub dataset: Dataset,
    pub theta: DVector<f64>,
    pub u: DVector<f64>,
}

/// The fixed part of a design.
#[derive(Debug, Clone)]
pub struct SimLayout {
    design: SimDesign,
    template: Dataset,
    proximity: Option<ProximityMatrix>,
    sar: Option<SarStructure>,
    /// `(I - rho W)^-1`, precomputed for spatial effects.
    a_inv: Option<DMatrix<f64>>,
    mean: DVector<f64>,
}

fn draw_noise(rng: &mut ChaCha8Rng, law: ErrorLaw) -> f64 {
    match law {
        ErrorLaw::Gaussian => StandardNormal.sample(rng),
        ErrorLaw::ShiftedExponential => {
            let e: f64 = Exp1.sample(rng);
            e - 1.0
        }
    }
}

impl SimLayout {
    pub fn new(design: SimDesign) -> Result<Self> {
        design.validate()?;
        let d = design.areas;
        let mut rng = exec::replicate_rng(design.seed, u64::MAX);
        let c = design.coordinates;
        let mut records = Vec::with_capacity(d);
        for i in 0..d {
            let covs: Vec<f64> = (0..design.covariates).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = rng.random_range(design.sample_size.0..=design.sample_size.1);
            let lon = rng.random_range(c.longitude.0..=c.longitude.1);
            let lat = rng.random_range(c.latitude.0..=c.latitude.1);
            let alt = rng.random_range(c.altitude.0..=c.altitude.1);
            let s2 = match &design.sigma2_law {
                Sigma2Law::Constant(s) => *s,
                Sigma2Law::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
                Sigma2Law::PatternOfFive(v) => v[(i * 5 / d).min(4)],
                Sigma2Law::InverseSampleSize(k) => k / n as f64,
            };
            records.push(
                AreaRecord::sampled(format!("A{i:04}"), 0.0, s2, covs, n)
                    .with_coordinates(lon, lat)
                    .with_altitude(alt),
            );
        }
        let template = Dataset::new(records, DatasetOptions { intercept: true, allow_zero_variance: true })?;
        let beta = DVector::from_column_slice(&design.beta);
        let mean = template.x() * beta;

        let proximity = match &design.neighbors {
            None => None,
            Some(NeighborSpec::TwoStep { k1, k2, similarity }) => {
                Some(neighbors::two_step_neighbors(template.records(), *k1, *k2, similarity.as_deref())?)
            }
            Some(NeighborSpec::Explicit(w)) => {
                let ids: Vec<String> = template.records().iter().map(|r| r.area_id.clone()).collect();
                Some(ProximityMatrix::from_weights(w.clone(), &ids)?)
            }
        };
        let sar = proximity.as_ref().map(SarStructure::new).transpose()?;
        let a_inv = match (design.effects, &sar) {
            (EffectsLaw::Spatial { rho, .. }, Some(s)) => {
                s.check_rho(rho)?;
                let a = s.a_matrix(rho);
                Some(a.try_inverse().ok_or(SaeError::SingularSpatial { rho })?)
            }
            _ => None,
        };
        Ok(Self { design, template, proximity, sar, a_inv, mean })
    }

    pub fn design(&self) -> &SimDesign {
        &self.design
    }

    /// The realized areas with a zero response.
    pub fn template(&self) -> &Dataset {
        &self.template
    }

    pub fn proximity(&self) -> Option<&ProximityMatrix> {
        self.proximity.as_ref()
    }

    pub fn sar(&self) -> Option<&SarStructure> {
        self.sar.as_ref()
    }

    /// Draws replicate `index` from its own stream.
    pub fn draw(&self, index: u64) -> Result<SimDraw> {
        let d = self.design.areas;
        let mut rng = exec::replicate_rng(self.design.seed, index);
        let law = self.design.error_law;
        let u = match self.design.effects {
            EffectsLaw::Basic { sigma_u2 } => {
                let sd = math::sqrt(sigma_u2);
                DVector::from_iterator(d, (0..d).map(|_| sd * draw_noise(&mut rng, law)))
            }
            EffectsLaw::Spatial { sigma_eps2, .. } => {
                let sd = math::sqrt(sigma_eps2);
                let eps = DVector::from_iterator(d, (0..d).map(|_| sd * draw_noise(&mut rng, law)));
                self.a_inv.as_ref().expect("spatial layout") * eps
            }
        };
        let theta = &self.mean + &u;
        let sigma2 = self.template.sigma2();
        let y = DVector::from_iterator(d, (0..d).map(|i| theta[i] + math::sqrt(sigma2[i]) * draw_noise(&mut rng, law)));
        Ok(SimDraw { dataset: self.template.with_response(&y)?, theta, u })
    }
}

/// Realizes the design and returns replicate 0.
pub fn generate(design: SimDesign) -> Result<SimDraw> {
    SimLayout::new(design)?.draw(0)
}

/// Predictor evaluated by [`empirical_mse`].
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    Direct,
    Eblup(VarianceMethod),
    /// Uses the layout's true `W`.
    Seblup(SpatialConfig),
}

/// Point predictions of `estimator` on one replicate.
pub fn predict_with(layout: &SimLayout, estimator: &Estimator, dataset: &Dataset) -> Result<DVector<f64>> {
    match estimator {
        Estimator::Direct => Ok(dataset.y().clone()),
        Estimator::Eblup(cfg) => {
            let fit = variance::estimate(dataset, cfg)?;
            Ok(predict::eblup(dataset, &fit)?.predictors())
        }
        Estimator::Seblup(cfg) => {
            let sar = layout
                .sar()
                .ok_or_else(|| SaeError::InvalidInput("SEBLUP simulation needs a neighbour specification".into()))?;
            let fit = crate::spatial::estimate_spatial(dataset, sar, cfg)?;
            Ok(predict::seblup(dataset, sar, &fit)?.predictors())
        }
    }
}

/// Runs `f` on replicates `0..replicates` and returns the successes in
/// index order plus the failure count. Errors when more than 10% fail.
pub fn run_replicates<T, F>(layout: &SimLayout, replicates: usize, f: F) -> Result<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(&SimDraw) -> Result<T> + Sync + Send,
{
    let outcomes = exec::map_indexed(replicates, |r| layout.draw(r as u64).and_then(|draw| f(&draw)));
    let mut ok = Vec::with_capacity(replicates);
    let mut failed = 0;
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(v) => ok.push(v),
            Err(e) => {
                log::warn!("replicate {r} failed: {e}");
                failed += 1;
            }
        }
    }
    if failed * 10 > replicates {
        return Err(SaeError::TooManyFailures { failed, total: replicates });
    }
    Ok((ok, failed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMse {
    /// Mean of `(theta_hat_i - theta_i)^2` over the successful replicates.
    pub mse: DVector<f64>,
    pub replicates: usize,
    pub failures: usize,
}

impl EmpiricalMse {
    pub fn mean(&self) -> f64 {
        self.mse.mean()
    }
}

/// Monte-Carlo MSE of `estimator` over `replicates` draws of `layout`.
pub fn empirical_mse(layout: &SimLayout, estimator: &Estimator, replicates: usize) -> Result<EmpiricalMse> {
    if replicates < 100 {
        return Err(SaeError::InvalidInput("empirical MSE needs at least 100 replicates".into()));
    }
    let (sq, failures) = run_replicates(layout, replicates, |draw| {
        let pred = predict_with(layout, estimator, &draw.dataset)?;
        Ok((pred - &draw.theta).map(|e| e * e))
    })?;
    let mut mse = DVector::zeros(layout.design.areas);
    for s in &sq {
        mse += s;
    }
    mse /= sq.len() as f64;
    Ok(EmpiricalMse { mse, replicates: sq.len(), failures })
}

/// Names the similarity variable a design's neighbour spec refers to.
pub fn similarity_name(design: &SimDesign) -> Option<String> {
    match &design.neighbors {
        Some(NeighborSpec::TwoStep { similarity: Some(s), .. }) => Some(s.to_string()),
        _ => None,
    }
}

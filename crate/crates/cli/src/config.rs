//! Run settings and the simulation design file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use sae_core::sim::{CoordinateLaw, EffectsLaw, ErrorLaw, NeighborSpec, Sigma2Law, SimDesign};
use sae_core::{BootstrapMode, DMatrix, EstimationMethod};
use serde::{Deserialize, Serialize};

use crate::io::{self, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceChoice {
    Ml,
    Reml,
    Moments,
    Fh,
}

impl From<VarianceChoice> for EstimationMethod {
    fn from(v: VarianceChoice) -> Self {
        match v {
            VarianceChoice::Ml => EstimationMethod::Ml,
            VarianceChoice::Reml => EstimationMethod::Reml,
            VarianceChoice::Moments => EstimationMethod::Moments,
            VarianceChoice::Fh => EstimationMethod::FhIterative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SpatialMethodChoice {
    Ml,
    Reml,
}

impl From<SpatialMethodChoice> for EstimationMethod {
    fn from(v: SpatialMethodChoice) -> Self {
        match v {
            SpatialMethodChoice::Ml => EstimationMethod::Ml,
            SpatialMethodChoice::Reml => EstimationMethod::Reml,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MseChoice {
    /// Prasad-Rao for the EBLUP.
    Pr,
    /// Datta for the EBLUP.
    Datta,
    /// `g1 + g2 + 2 g3` for the SEBLUP, with g3 from the bootstrap.
    AnalyticSpatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum BootstrapChoice {
    Parametric,
    Nonparametric,
}

impl From<BootstrapChoice> for BootstrapMode {
    fn from(v: BootstrapChoice) -> Self {
        match v {
            BootstrapChoice::Parametric => BootstrapMode::Parametric,
            BootstrapChoice::Nonparametric => BootstrapMode::Nonparametric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialSettings {
    pub k1: usize,
    pub k2: usize,
    pub similarity: Option<String>,
    pub method: SpatialMethodChoice,
    pub rho_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub mode: BootstrapChoice,
    pub replicates: usize,
    pub seed: u64,
}

/// Everything a `fit` or `mse` run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub schema: Schema,
    pub variance_method: VarianceChoice,
    pub spatial: Option<SpatialSettings>,
    pub mse: Option<MseChoice>,
    pub bootstrap: Option<BootstrapSettings>,
    /// Clamp reported predictors into this range.
    pub clamp: Option<(f64, f64)>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(s) = &self.spatial {
            if s.k2 == 0 || s.k2 > s.k1 {
                bail!("need 1 <= K2 <= K1");
            }
        }
        if self.mse == Some(MseChoice::AnalyticSpatial) {
            if self.spatial.is_none() {
                bail!("--mse analytic-spatial needs --spatial");
            }
            if self.bootstrap.is_none() {
                bail!("--mse analytic-spatial takes g3 from the bootstrap; add --bootstrap");
            }
        }
        if self.bootstrap.is_some() && self.spatial.is_none() {
            bail!("the bootstrap applies to the spatial model; add --spatial");
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                bail!("clamp range must satisfy lo < hi");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub input: PathBuf,
    pub schema: Schema,
    pub k1_values: Vec<usize>,
    pub similarity: Vec<String>,
    pub method: SpatialMethodChoice,
    pub rho_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum EffectsConfig {
    Basic { sigma_u2: f64 },
    Spatial { sigma_eps2: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SamplingVarianceConfig {
    Constant { value: f64 },
    Uniform { lo: f64, hi: f64 },
    PatternOfFive { values: [f64; 5] },
    /// `c / n`.
    InverseN { c: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeighborConfig {
    pub k1: Option<usize>,
    pub k2: Option<usize>,
    pub similarity: Option<String>,
    /// Explicit weight matrix file, relative to the design file.
    pub matrix: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub areas: usize,
    #[serde(default = "default_covariates")]
    pub covariates: usize,
    pub beta: Vec<f64>,
    pub seed: u64,
    /// Which replicate of the design to write.
    #[serde(default)]
    pub replicate: u64,
    pub effects: EffectsConfig,
    pub sampling_variance: SamplingVarianceConfig,
    #[serde(default = "default_sample_size")]
    pub sample_size: [u32; 2],
    pub longitude: Option<[f64; 2]>,
    pub latitude: Option<[f64; 2]>,
    pub altitude: Option<[f64; 2]>,
    pub neighbors: Option<NeighborConfig>,
    #[serde(default)]
    pub error_law: ErrorLawConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorLawConfig {
    #[default]
    Gaussian,
    ShiftedExponential,
}

fn default_covariates() -> usize {
    1
}

fn default_sample_size() -> [u32; 2] {
    [2, 60]
}

impl SimConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Builds the design; relative matrix paths resolve against `base`.
    pub fn to_design(&self, base: &Path) -> Result<SimDesign> {
        let coords = CoordinateLaw::default();
        let pair = |p: Option<[f64; 2]>, d: (f64, f64)| p.map_or(d, |[a, b]| (a, b));
        let neighbors = match &self.neighbors {
            None => None,
            Some(NeighborConfig { matrix: Some(m), .. }) => {
                let rows = io::read_matrix(&base.join(m))?;
                let d = rows.len();
                if rows.iter().any(|r| r.len() != d) {
                    bail!("weight matrix must be square");
                }
                Some(NeighborSpec::Explicit(DMatrix::from_fn(d, d, |i, j| rows[i][j])))
            }
            Some(NeighborConfig { k1: Some(k1), k2, similarity, .. }) => Some(NeighborSpec::TwoStep {
                k1: *k1,
                k2: k2.unwrap_or(*k1),
                similarity: similarity.clone(),
            }),
            Some(_) => bail!("neighbors needs k1 (and optionally k2, similarity) or matrix"),
        };
        let design = SimDesign {
            areas: self.areas,
            covariates: self.covariates,
            beta: self.beta.clone(),
            effects: match self.effects {
                EffectsConfig::Basic { sigma_u2 } => EffectsLaw::Basic { sigma_u2 },
                EffectsConfig::Spatial { sigma_eps2, rho } => EffectsLaw::Spatial { sigma_eps2, rho },
            },
            sigma2_law: match &self.sampling_variance {
                SamplingVarianceConfig::Constant { value } => Sigma2Law::Constant(*value),
                SamplingVarianceConfig::Uniform { lo, hi } => Sigma2Law::Uniform { lo: *lo, hi: *hi },
                SamplingVarianceConfig::PatternOfFive { values } => Sigma2Law::PatternOfFive(*values),
                SamplingVarianceConfig::InverseN { c } => Sigma2Law::InverseSampleSize(*c),
            },
            sample_size: (self.sample_size[0], self.sample_size[1]),
            coordinates: CoordinateLaw {
                longitude: pair(self.longitude, coords.longitude),
                latitude: pair(self.latitude, coords.latitude),
                altitude: pair(self.altitude, coords.altitude),
            },
            neighbors,
            error_law: match self.error_law {
                ErrorLawConfig::Gaussian => ErrorLaw::Gaussian,
                ErrorLawConfig::ShiftedExponential => ErrorLaw::ShiftedExponential,
            },
            seed: self.seed,
        };
        design.validate()?;
        Ok(design)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_design_file() {
        let text = r#"
            areas = 40
            beta = [1.0, 0.5]
            seed = 9
            sample_size = [3, 30]
            [effects]
            kind = "spatial"
            sigma_eps2 = 1.0
            rho = 0.8
            [sampling_variance]
            law = "inverse-n"
            c = 4.0
            [neighbors]
            k1 = 7
        "#;
        let cfg: SimConfig = toml::from_str(text).unwrap();
        let d = cfg.to_design(Path::new(".")).unwrap();
        assert_eq!(d.neighbors, Some(NeighborSpec::TwoStep { k1: 7, k2: 7, similarity: None }));
        assert_eq!(d.sigma2_law, Sigma2Law::InverseSampleSize(4.0));
        assert_eq!(d.sample_size, (3, 30));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = "areas = 4\nbeta=[1.0]\nseed=1\nbogus=1\n[effects]\nkind=\"basic\"\nsigma_u2=1.0\n[sampling_variance]\nlaw=\"constant\"\nvalue=1.0\n";
        assert!(toml::from_str::<SimConfig>(text).is_err());
    }
}

//! Area-level small-area estimation under the Fay-Herriot model and its
//! spatial (SAR random effects) extension.
//!
//! The crate is `no_std` and only needs `alloc`. Enable the `parallel`
//! feature to spread Monte-Carlo and bootstrap replicates over a rayon pool;
//! results are bit-identical with or without it.
//!
//! Module map:
//!
//! - [`model`]: area records, datasets, GLS/OLS machinery.
//! - [`variance`]: ML, REML, moments and Fay-Herriot estimators of the
//!   random-effect variance.
//! - [`spatial`]: proximity matrices, SAR covariance and ML/REML for
//!   `(sigma_eps2, rho)`.
//! - [`predict`]: EBLUP and SEBLUP.
//! - [`mse`]: analytic MSE (Prasad-Rao, Datta, spatial `g1`/`g2`).
//! - [`bootstrap`]: parametric and nonparametric bootstrap for the SEBLUP MSE.
//! - [`neighbors`]: two-step nearest-neighbour proximity matrices and the
//!   `(K1, K2)` sensitivity sweep.
//! - [`sim`]: synthetic designs with known truth.
//! - [`report`]: coefficient-of-variation tables.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod bootstrap;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod math;
pub mod model;
pub mod mse;
pub mod neighbors;
pub mod optimize;
pub mod predict;
pub mod report;
pub mod sim;
pub mod spatial;
pub mod variance;

pub use error::{Result, SaeError};
pub use model::{
    assemble_v, gls_beta, ols, ols_beta, AreaRecord, Dataset, DatasetOptions, EstimationMethod,
    FitResult, GlsFit, OlsFit, VarianceParams,
};
pub use bootstrap::{BootstrapConfig, BootstrapMode, BootstrapOutcome};
pub use mse::{mse_datta, mse_prasad_rao, MseEstimate};
pub use nalgebra::{DMatrix, DVector};
pub use neighbors::{sensitivity_sweep, two_step_neighbors, SweepCell, SweepResult};
pub use predict::{eblup, seblup, MethodLabel, PredictionRow, PredictionTable};
pub use report::{cv_table, CvBins, CvTable};
pub use sim::{SimDesign, SimLayout};
pub use spatial::{estimate_spatial, ProximityMatrix, SarStructure, SpatialConfig, SpatialParams};
pub use variance::{estimate, VarianceMethod};

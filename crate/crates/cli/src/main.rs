use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use sae::config::{
    BootstrapChoice, BootstrapSettings, MseChoice, RunConfig, SpatialMethodChoice, SpatialSettings, SweepConfig,
    VarianceChoice,
};
use sae::io::{Schema, DEFAULT_CUTS};
use sae::run::{self, Manifest};
use sae_core::CvBins;

#[derive(Parser)]
#[command(name = "sae", version, about = "Fay-Herriot and spatial Fay-Herriot small area estimation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SAE_THREADS")]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, env = "SAE_OUTPUT_DIR", default_value = "sae-output")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the models and write predictions.
    Fit(FitArgs),
    /// Like `fit`, with MSE estimation on by default.
    Mse(FitArgs),
    /// Grid of spatial fits over (K1, K2).
    Sweep(SweepArgs),
    /// Write one simulated dataset and its ground truth.
    Simulate {
        /// TOML design file.
        design: PathBuf,
    },
    /// Cross-tabulate CV by sample size from a predictions file.
    CvTable {
        predictions: PathBuf,
        /// Upper bounds of the sample size bins.
        #[arg(long, value_delimiter = ',', default_values_t = [6u32, 10, 20, 50])]
        size_bins: Vec<u32>,
        /// Upper bounds of the CV bins.
        #[arg(long, value_delimiter = ',', default_values_t = [0.10, 0.20, 0.30])]
        cv_bins: Vec<f64>,
    },
}

#[derive(Args)]
struct SchemaArgs {
    #[arg(long)]
    input: PathBuf,
    /// Covariate columns (default: every column starting with `x`).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Extra columns usable as similarity variables.
    #[arg(long, value_delimiter = ',')]
    similarity: Vec<String>,
    /// Column used to split the areas into groups.
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_CUTS)]
    cuts: Vec<f64>,
    /// Fit all areas together even when --group-by is set.
    #[arg(long)]
    pooled: bool,
    /// Omit the intercept column.
    #[arg(long)]
    no_intercept: bool,
    #[arg(long)]
    allow_zero_variance: bool,
}

impl SchemaArgs {
    fn schema(&self) -> Schema {
        Schema {
            covariates: self.covariates.clone(),
            similarity: self.similarity.clone(),
            group_by: self.group_by.clone(),
            cuts: self.cuts.clone(),
            pooled: self.pooled,
            intercept: !self.no_intercept,
            allow_zero_variance: self.allow_zero_variance,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long, value_enum, default_value = "reml")]
    variance_method: VarianceChoice,
    /// Also fit the spatial (SAR) model.
    #[arg(long)]
    spatial: bool,
    #[arg(long, default_value_t = 5)]
    k1: usize,
    /// Defaults to K1 (no second step).
    #[arg(long)]
    k2: Option<usize>,
    #[arg(long)]
    similarity_var: Option<String>,
    #[arg(long, default_value_t = 21)]
    rho_grid: usize,
    #[arg(long, value_enum, default_value = "reml")]
    spatial_method: SpatialMethodChoice,
    #[arg(long, value_enum)]
    mse: Option<MseChoice>,
    #[arg(long, value_enum)]
    bootstrap: Option<BootstrapChoice>,
    #[arg(long, default_value_t = 400)]
    replicates: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Clamp reported predictors to LO,HI.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    clamp: Option<Vec<f64>>,
}

impl FitArgs {
    fn config(&self, mse_command: bool) -> Result<RunConfig> {
        let spatial = self.spatial.then(|| SpatialSettings {
            k1: self.k1,
            k2: self.k2.unwrap_or(self.k1),
            similarity: self.similarity_var.clone(),
            method: self.spatial_method,
            rho_grid: self.rho_grid,
        });
        let mut mse = self.mse;
        let mut mode = self.bootstrap;
        if mse_command {
            mse.get_or_insert(MseChoice::Pr);
            if spatial.is_some() {
                mode.get_or_insert(BootstrapChoice::Parametric);
            }
        }
        let bootstrap = mode.map(|mode| BootstrapSettings { mode, replicates: self.replicates, seed: self.seed });
        let clamp = match self.clamp.as_deref() {
            None => None,
            Some(&[lo, hi]) => Some((lo, hi)),
            Some(_) => bail!("--clamp takes LO,HI"),
        };
        let mut schema = self.schema.schema();
        if let Some(v) = &self.similarity_var {
            if v != "altitude" && !schema.similarity.contains(v) {
                schema.similarity.push(v.clone());
            }
        }
        Ok(RunConfig {
            input: self.schema.input.clone(),
            schema,
            variance_method: self.variance_method,
            spatial,
            mse,
            bootstrap,
            clamp,
        })
    }
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    /// K1 values to try.
    #[arg(long, value_delimiter = ',', default_values_t = 1..=10)]
    k1: Vec<usize>,
    /// Similarity variables for the second step.
    #[arg(long, value_delimiter = ',', default_value = "altitude")]
    similarity_var: Vec<String>,
    #[arg(long, value_enum, default_value = "reml")]
    spatial_method: SpatialMethodChoice,
    #[arg(long, default_value_t = 21)]
    rho_grid: usize,
}

fn execute(cli: Cli) -> Result<Manifest> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Fit(a) => run::run_fit("fit", &a.config(false)?, &cli.out),
        Command::Mse(a) => run::run_fit("mse", &a.config(true)?, &cli.out),
        Command::Sweep(a) => {
            let mut schema = a.schema.schema();
            for v in &a.similarity_var {
                if v != "altitude" && !schema.similarity.contains(v) {
                    schema.similarity.push(v.clone());
                }
            }
            let cfg = SweepConfig {
                input: a.schema.input.clone(),
                schema,
                k1_values: a.k1,
                similarity: a.similarity_var,
                method: a.spatial_method,
                rho_grid: a.rho_grid,
            };
            run::run_sweep(&cfg, &cli.out)
        }
        Command::Simulate { design } => run::run_simulate(&design, &cli.out),
        Command::CvTable { predictions, size_bins, cv_bins } => {
            let bins = CvBins { size_upper: size_bins, cv_upper: cv_bins };
            run::run_cv_table(&predictions, &bins, &cli.out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(m) if m.ok() => ExitCode::SUCCESS,
        Ok(m) => {
            eprintln!("sae: run finished with status {}; see manifest.json", m.status);
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("sae: {e:#}");
            ExitCode::FAILURE
        }
    }
}

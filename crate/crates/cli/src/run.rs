//! Subcommand orchestration: fitting per group, writing outputs and the
//! run manifest.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use sae_core::bootstrap::{self, BootstrapConfig};
use sae_core::mse;
use sae_core::predict::{self, PredictionTable};
use sae_core::report::{self, CvBins};
use sae_core::sim::SimLayout;
use sae_core::{FitResult, MethodLabel, SarStructure, SpatialConfig, VarianceMethod};
use serde::Serialize;

use crate::config::{MseChoice, RunConfig, SimConfig, SweepConfig};
use crate::io::{self, Group, MseRow};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapReport {
    pub seed: u64,
    /// Bootstrap standard errors of the spatial estimates.
    pub sigma_eps2_se: f64,
    pub rho_se: f64,
    pub replicates_used: usize,
    pub failures: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub model: String,
    pub method: String,
    pub beta: Vec<f64>,
    pub sigma_u2: Option<f64>,
    pub sigma_eps2: Option<f64>,
    pub rho: Option<f64>,
    pub rho_interval: Option<(f64, f64)>,
    pub log_likelihood: f64,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
    pub bootstrap: Option<BootstrapReport>,
}

impl FitReport {
    fn new(model: &str, fit: &FitResult) -> Self {
        let spatial = fit.params.spatial();
        Self {
            model: model.into(),
            method: fit.method.to_string(),
            beta: fit.beta.iter().copied().collect(),
            sigma_u2: fit.params.sigma_u2(),
            sigma_eps2: spatial.map(|p| p.sigma_eps2),
            rho: spatial.map(|p| p.rho),
            rho_interval: None,
            log_likelihood: fit.log_likelihood,
            converged: fit.converged,
            iterations: fit.iterations,
            warnings: fit.warnings.clone(),
            bootstrap: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub similarity: Option<String>,
    pub optimal: Option<(usize, usize)>,
    pub file: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GroupReport {
    pub label: String,
    pub areas: usize,
    pub nonsampled: usize,
    pub fits: Vec<FitReport>,
    pub sweeps: Vec<SweepReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub groups: Vec<GroupReport>,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
    /// `ok` when every fit converged, `not-converged` or `failed` otherwise.
    pub status: String,
}

impl Manifest {
    fn new(command: &str, config: impl Serialize) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config)?,
            groups: Vec::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            status: "ok".into(),
        })
    }

    fn finish(&mut self) {
        if self.groups.iter().any(|g| g.error.is_some()) {
            self.status = "failed".into();
        } else if self.groups.iter().flat_map(|g| &g.fits).any(|f| !f.converged) {
            self.status = "not-converged".into();
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

fn ensure_dir(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

struct GroupOutput {
    tables: Vec<PredictionTable>,
    mse_rows: Vec<MseRow>,
    report: GroupReport,
}

fn mse_rows(group: &str, table: &PredictionTable, estimator: &str, est: &mse::MseEstimate) -> Vec<MseRow> {
    table
        .rows
        .iter()
        .enumerate()
        .take(est.mse.len())
        .map(|(i, r)| MseRow {
            group: group.into(),
            area_id: r.area_id.clone(),
            method: r.method.to_string(),
            estimator: estimator.into(),
            g1: Some(est.g1[i]),
            g2: Some(est.g2[i]),
            g3: Some(est.g3_term[i]),
            g4: Some(est.g4[i]),
            mse: est.mse[i],
        })
        .collect()
}

fn fit_group(cfg: &RunConfig, index: usize, group: &Group, report: &mut GroupReport) -> Result<(Vec<PredictionTable>, Vec<MseRow>)> {
    let ds = &group.dataset;
    let label = &group.label;
    let mut tables = vec![predict::direct(ds)];
    let mut rows = Vec::new();

    let fit = sae_core::estimate(ds, &VarianceMethod::new(cfg.variance_method.into()))?;
    report.fits.push(FitReport::new("basic", &fit));
    let mut eblup = predict::eblup_with_nonsampled(ds, &fit, &group.nonsampled)?;
    if let Some(choice) = cfg.mse {
        let est = match choice {
            MseChoice::Datta => mse::mse_datta(ds, &fit)?,
            _ => mse::mse_prasad_rao(ds, &fit)?,
        };
        report.fits.last_mut().expect("pushed").warnings.extend(est.warnings.iter().cloned());
        let mut values: Vec<f64> = est.mse.iter().copied().collect();
        for r in &group.nonsampled {
            values.push(mse::mse_nonsampled(ds, &fit, r)?);
        }
        eblup.set_mse(&values)?;
        let name = if choice == MseChoice::Datta { "datta" } else { "prasad-rao" };
        rows.extend(mse_rows(label, &eblup, name, &est));
        for (k, r) in group.nonsampled.iter().enumerate() {
            rows.push(MseRow {
                group: label.clone(),
                area_id: r.area_id.clone(),
                method: MethodLabel::Eblup.to_string(),
                estimator: "synthetic".into(),
                g1: None,
                g2: None,
                g3: None,
                g4: None,
                mse: values[ds.areas() + k],
            });
        }
    }
    tables.push(eblup);

    if let Some(sp) = &cfg.spatial {
        let w = sae_core::two_step_neighbors(ds.records(), sp.k1, sp.k2, sp.similarity.as_deref())?;
        let sar = SarStructure::new(&w)?;
        let mut scfg = SpatialConfig::new(sp.method.into());
        scfg.rho_grid = sp.rho_grid;
        let sfit = sae_core::estimate_spatial(ds, &sar, &scfg)?;
        let mut sreport = FitReport::new("spatial", &sfit);
        sreport.rho_interval = Some(sar.validity_interval());
        let mut seblup = predict::seblup(ds, &sar, &sfit)?;
        if let Some(bs) = &cfg.bootstrap {
            let mut bcfg = BootstrapConfig::new(sp.method.into(), bs.seed.wrapping_add(index as u64))
                .with_replicates(bs.replicates)
                .with_mode(bs.mode.into());
            bcfg.estimation.rho_grid = sp.rho_grid;
            bcfg.validate_production()?;
            let out = bootstrap::run(ds, &sar, &sfit, &bcfg)?;
            let est = if cfg.mse == Some(MseChoice::AnalyticSpatial) {
                mse::mse_spatial_analytic(ds, &sar, &sfit, &out.g3)?
            } else {
                let (g1, g2) = mse::g1_g2_spatial(ds, &sar, sfit.params.spatial().expect("spatial"))?;
                mse::MseEstimate {
                    g1,
                    g2,
                    g3_term: out.g3.clone(),
                    g4: sae_core::DVector::zeros(ds.areas()),
                    mse: out.mse.clone(),
                    warnings: out.warnings.clone(),
                }
            };
            seblup.set_mse(est.mse.as_slice())?;
            let name = if cfg.mse == Some(MseChoice::AnalyticSpatial) { "analytic-spatial" } else { "bootstrap-combined" };
            rows.extend(mse_rows(label, &seblup, name, &est));
            sreport.bootstrap = Some(BootstrapReport {
                seed: bcfg.seed,
                sigma_eps2_se: out.phi_se.sigma_eps2,
                rho_se: out.phi_se.rho,
                replicates_used: out.replicates_used,
                failures: out.failures,
                warnings: out.warnings,
            });
        }
        report.fits.push(sreport);
        tables.push(seblup);
    }
    if let Some((lo, hi)) = cfg.clamp {
        for t in &mut tables[1..] {
            t.clamp(lo, hi);
        }
    }
    Ok((tables, rows))
}

fn merge(outputs: &[GroupOutput]) -> Vec<PredictionTable> {
    let mut merged: Vec<PredictionTable> = Vec::new();
    for o in outputs {
        for t in &o.tables {
            match merged.iter_mut().find(|m| m.method == t.method) {
                Some(m) => m.rows.extend(t.rows.iter().cloned()),
                None => merged.push(t.clone()),
            }
        }
    }
    merged.sort_by_key(|t| t.method);
    merged
}

fn sampled_only(tables: &[PredictionTable]) -> Vec<PredictionTable> {
    tables
        .iter()
        .map(|t| PredictionTable { method: t.method, rows: t.rows.iter().filter(|r| r.sample_size > 0).cloned().collect() })
        .collect()
}

fn write_cv(out: &Path, tables: &[PredictionTable], manifest: &mut Manifest) -> Result<()> {
    let sampled = sampled_only(tables);
    let named: Vec<(String, &PredictionTable)> = sampled.iter().map(|t| (t.method.to_string(), t)).collect();
    let table = report::cv_table(&named, &CvBins::default())?;
    manifest.warnings.extend(table.warnings.iter().cloned());
    io::write_cv_table(&out.join("cv_table.csv"), &table)?;
    manifest.outputs.push("cv_table.csv".into());
    Ok(())
}

/// Checks that would otherwise fail midway through a run.
fn precheck(cfg: &RunConfig, loaded: &io::Loaded) -> Result<()> {
    if let Some(sp) = &cfg.spatial {
        for g in &loaded.groups {
            if let Some(r) = g.dataset.records().iter().find(|r| r.longitude.is_none() || r.latitude.is_none()) {
                bail!("spatial model needs coordinates; area {} has none", r.area_id);
            }
            if sp.k1 >= g.dataset.areas() {
                bail!("group {} has {} areas, too few for K1 = {}", g.label, g.dataset.areas(), sp.k1);
            }
        }
        if let Some(s) = &sp.similarity {
            if !loaded.similarity.contains(s) {
                bail!("similarity variable {s} is not in the input");
            }
        }
    }
    Ok(())
}

/// `fit` and `mse`: predictions, MSE, CV table, plots and manifest.
pub fn run_fit(command: &str, cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let loaded = io::load_dataset(&cfg.input, &cfg.schema)?;
    precheck(cfg, &loaded)?;
    ensure_dir(out)?;
    let mut manifest = Manifest::new(command, cfg)?;

    let outputs: Vec<GroupOutput> = loaded
        .groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut report = GroupReport {
                label: g.label.clone(),
                areas: g.dataset.areas(),
                nonsampled: g.nonsampled.len(),
                ..GroupReport::default()
            };
            match fit_group(cfg, i, g, &mut report) {
                Ok((tables, mse_rows)) => GroupOutput { tables, mse_rows, report },
                Err(e) => {
                    report.error = Some(format!("{e:#}"));
                    GroupOutput { tables: Vec::new(), mse_rows: Vec::new(), report }
                }
            }
        })
        .collect();

    let merged = merge(&outputs);
    io::write_predictions(&out.join("predictions.csv"), &merged)?;
    manifest.outputs.push("predictions.csv".into());
    if cfg.mse.is_some() || cfg.bootstrap.is_some() {
        let rows: Vec<MseRow> = outputs.iter().flat_map(|o| o.mse_rows.iter().cloned()).collect();
        io::write_mse(&out.join("mse.csv"), &rows)?;
        manifest.outputs.push("mse.csv".into());
        write_cv(out, &merged, &mut manifest)?;
    }
    io::write_plot(&out.join("plot_estimates.csv"), &merged, |r| Some(r.predictor))?;
    io::write_plot(&out.join("plot_cv.csv"), &merged, |r| r.cv)?;
    manifest.outputs.extend(["plot_estimates.csv".to_string(), "plot_cv.csv".to_string()]);
    manifest.groups = outputs.into_iter().map(|o| o.report).collect();
    manifest.finish();
    io::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// `sweep`: the `(K1, K2)` grid per group and similarity variable.
pub fn run_sweep(cfg: &SweepConfig, out: &Path) -> Result<Manifest> {
    if cfg.k1_values.is_empty() {
        bail!("empty K1 range");
    }
    let loaded = io::load_dataset(&cfg.input, &cfg.schema)?;
    for g in &loaded.groups {
        if let Some(r) = g.dataset.records().iter().find(|r| r.longitude.is_none()) {
            bail!("sweep needs coordinates; area {} has none", r.area_id);
        }
    }
    for s in &cfg.similarity {
        if !loaded.similarity.contains(s) {
            bail!("similarity variable {s} is not in the input");
        }
    }
    ensure_dir(out)?;
    let mut manifest = Manifest::new("sweep", cfg)?;
    let mut scfg = SpatialConfig::new(cfg.method.into());
    scfg.rho_grid = cfg.rho_grid;
    for (gi, g) in loaded.groups.iter().enumerate() {
        let mut report = GroupReport {
            label: g.label.clone(),
            areas: g.dataset.areas(),
            nonsampled: g.nonsampled.len(),
            ..GroupReport::default()
        };
        match sae_core::sensitivity_sweep(&g.dataset, &cfg.k1_values, &cfg.similarity, &scfg) {
            Ok(results) => {
                for res in results {
                    let tag = res.similarity_variable.clone().unwrap_or_else(|| "geographic".into());
                    let file = format!("sweep_g{}_{tag}.csv", gi + 1);
                    io::write_sweep(&out.join(&file), &g.label, &res)?;
                    manifest.outputs.push(file.clone());
                    if res.optimal.is_none() {
                        report.error = Some(format!("no converged cell for {tag}"));
                    }
                    report.sweeps.push(SweepReport { similarity: res.similarity_variable, optimal: res.optimal, file });
                }
            }
            Err(e) => report.error = Some(format!("{e:#}")),
        }
        manifest.groups.push(report);
    }
    manifest.finish();
    io::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct SimEcho<'a> {
    design_file: &'a Path,
    design: &'a SimConfig,
}

/// `simulate`: one replicate of a design as `dataset.csv` plus `truth.csv`.
pub fn run_simulate(design_file: &Path, out: &Path) -> Result<Manifest> {
    let cfg = SimConfig::from_file(design_file)?;
    let base = design_file.parent().unwrap_or(Path::new("."));
    let layout = SimLayout::new(cfg.to_design(base)?)?;
    let draw = layout.draw(cfg.replicate)?;
    ensure_dir(out)?;
    let covs: Vec<String> = (1..=cfg.covariates).map(|k| format!("x{k}")).collect();
    let sim = vec!["altitude".to_string()];
    io::write_dataset(&out.join("dataset.csv"), draw.dataset.records(), &covs, &sim)?;
    io::write_truth(&out.join("truth.csv"), draw.dataset.records(), draw.theta.as_slice(), draw.u.as_slice())?;
    let mut manifest = Manifest::new("simulate", SimEcho { design_file, design: &cfg })?;
    manifest.outputs = vec!["dataset.csv".into(), "truth.csv".into()];
    io::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

#[derive(Serialize)]
struct CvEcho<'a> {
    predictions: &'a Path,
    size_upper: &'a [u32],
    cv_upper: &'a [f64],
}

/// `cv-table`: cross-tabulates an existing predictions file.
pub fn run_cv_table(predictions: &Path, bins: &CvBins, out: &Path) -> Result<Manifest> {
    let tables = io::read_predictions(predictions)?;
    ensure_dir(out)?;
    let sampled = sampled_only(&tables);
    let named: Vec<(String, &PredictionTable)> = sampled.iter().map(|t| (t.method.to_string(), t)).collect();
    let table = report::cv_table(&named, bins)?;
    io::write_cv_table(&out.join("cv_table.csv"), &table)?;
    let mut manifest =
        Manifest::new("cv-table", CvEcho { predictions, size_upper: &bins.size_upper, cv_upper: &bins.cv_upper })?;
    manifest.warnings = table.warnings;
    manifest.outputs = vec!["cv_table.csv".into()];
    io::write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

//! CSV input and output.
//!
//! Numbers are written with 17 significant digits so every value survives a
//! write/read round trip exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use sae_core::report::CvTable;
use sae_core::{AreaRecord, Dataset, DatasetOptions, MethodLabel, PredictionRow, PredictionTable, SweepResult};
use serde::{Deserialize, Serialize};

pub const REQUIRED_COLUMNS: [&str; 6] = ["area_id", "y", "var_y", "n", "lon", "lat"];
pub const PREDICTION_COLUMNS: [&str; 8] = ["area_id", "n", "direct", "direct_se", "predictor", "method", "mse", "cv"];
pub const DEFAULT_CUTS: [f64; 2] = [0.30, 0.55];

/// Formats `x` with 17 significant digits, trailing zeros removed.
pub fn fmt_num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    let s = if (-5..17).contains(&e) {
        let decimals = (16 - e).max(0) as usize;
        format!("{x:.decimals$}")
    } else {
        return format!("{x:.16e}");
    };
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

/// How columns of the input file map onto area records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    /// Covariate columns; `None` selects every column whose name starts with `x`.
    pub covariates: Option<Vec<String>>,
    /// Extra columns usable as neighbour-similarity variables (`alt` is always available as `altitude`).
    pub similarity: Vec<String>,
    pub group_by: Option<String>,
    /// Strictly increasing cut points for `group_by`.
    pub cuts: Vec<f64>,
    pub pooled: bool,
    pub intercept: bool,
    pub allow_zero_variance: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            covariates: None,
            similarity: Vec::new(),
            group_by: None,
            cuts: DEFAULT_CUTS.to_vec(),
            pooled: false,
            intercept: true,
            allow_zero_variance: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Group {
    pub label: String,
    pub dataset: Dataset,
    pub nonsampled: Vec<AreaRecord>,
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub groups: Vec<Group>,
    pub covariates: Vec<String>,
    pub similarity: Vec<String>,
    pub rows: usize,
    pub sampled_rows: usize,
}

impl Loaded {
    pub fn nonsampled(&self) -> usize {
        self.groups.iter().map(|g| g.nonsampled.len()).sum()
    }
}

fn group_labels(cuts: &[f64]) -> Vec<String> {
    let mut out = Vec::with_capacity(cuts.len() + 1);
    for (k, c) in cuts.iter().enumerate() {
        out.push(if k == 0 { format!("<{c}") } else { format!("{}-{c}", cuts[k - 1]) });
    }
    out.push(format!(">={}", cuts.last().copied().unwrap_or(0.0)));
    out
}

pub fn load_dataset(path: &Path, schema: &Schema) -> Result<Loaded> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_dataset(file, schema).with_context(|| format!("reading {}", path.display()))
}

pub fn read_dataset<R: Read>(reader: R, schema: &Schema) -> Result<Loaded> {
    if !schema.cuts.windows(2).all(|w| w[0] < w[1]) {
        bail!("cut points must be strictly increasing");
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = match rdr.headers() {
        Ok(h) => h.iter().map(String::from).collect(),
        Err(e) => bail!("no records ({e})"),
    };
    if headers.iter().all(|h| h.is_empty()) {
        bail!("no records");
    }
    let col = |name: &str| headers.iter().position(|h| h == name);
    for req in REQUIRED_COLUMNS {
        if col(req).is_none() {
            bail!("missing required column {req}");
        }
    }
    let reserved: HashSet<&str> = REQUIRED_COLUMNS.iter().copied().chain(["alt"]).collect();
    let covariates: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => headers
            .iter()
            .filter(|h| h.starts_with('x') && !reserved.contains(h.as_str()) && Some(h.as_str()) != schema.group_by.as_deref())
            .cloned()
            .collect(),
    };
    let mut needed: Vec<&str> = covariates.iter().map(String::as_str).collect();
    needed.extend(schema.similarity.iter().map(String::as_str));
    if let Some(g) = &schema.group_by {
        needed.push(g);
    }
    for n in needed {
        if col(n).is_none() {
            bail!("missing column {n}");
        }
    }
    let idx = |name: &str| col(name).expect("checked");
    let cov_idx: Vec<usize> = covariates.iter().map(|c| idx(c)).collect();
    let sim_idx: Vec<(String, usize)> = schema.similarity.iter().map(|s| (s.clone(), idx(s))).collect();
    let alt_idx = col("alt");
    let group_idx = if schema.pooled { None } else { schema.group_by.as_deref().map(idx) };

    let labels = if group_idx.is_some() { group_labels(&schema.cuts) } else { vec!["all".to_string()] };
    let mut sampled: Vec<Vec<AreaRecord>> = vec![Vec::new(); labels.len()];
    let mut nonsampled: Vec<Vec<AreaRecord>> = vec![Vec::new(); labels.len()];
    let mut seen = HashSet::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        rows += 1;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| -> Result<Option<f64>> {
            let s = field(i);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| anyhow!("line {line}: column {} is not numeric: {s:?}", headers[i]))
        };
        let req = |i: usize| -> Result<f64> { num(i)?.ok_or_else(|| anyhow!("line {line}: column {} is empty", headers[i])) };

        let id = field(idx("area_id")).to_string();
        if id.is_empty() {
            bail!("line {line}: empty area_id");
        }
        if !seen.insert(id.clone()) {
            bail!("line {line}: duplicate area_id {id}");
        }
        let n_raw = req(idx("n"))?;
        if n_raw < 0.0 || n_raw.fract() != 0.0 {
            bail!("line {line}: n must be a nonnegative integer");
        }
        let n = n_raw as u32;
        let covs = cov_idx.iter().map(|&i| req(i)).collect::<Result<Vec<f64>>>()?;
        let mut record = if n == 0 {
            AreaRecord::nonsampled(id, covs)
        } else {
            let y = req(idx("y"))?;
            let v = req(idx("var_y"))?;
            if v < 0.0 {
                bail!("line {line}: var_y must be >= 0, got {v}");
            }
            if v == 0.0 && !schema.allow_zero_variance {
                bail!("line {line}: var_y = 0 needs --allow-zero-variance");
            }
            AreaRecord::sampled(id, y, v, covs, n)
        };
        match (num(idx("lon"))?, num(idx("lat"))?) {
            (Some(lon), Some(lat)) => {
                if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                    bail!("line {line}: coordinates out of range");
                }
                record = record.with_coordinates(lon, lat);
            }
            (None, None) => {}
            _ => bail!("line {line}: lon and lat must both be present or both empty"),
        }
        if let Some(i) = alt_idx {
            if let Some(a) = num(i)? {
                record = record.with_altitude(a);
            }
        }
        for (name, i) in &sim_idx {
            if let Some(v) = num(*i)? {
                record = record.with_similarity(name.clone(), v);
            }
        }
        let g = match group_idx {
            None => 0,
            Some(i) => {
                let v = req(i)?;
                schema.cuts.iter().position(|&c| v < c).unwrap_or(schema.cuts.len())
            }
        };
        if n == 0 {
            nonsampled[g].push(record);
        } else {
            sampled[g].push(record);
        }
    }
    if rows == 0 {
        bail!("no records");
    }
    let sampled_rows = sampled.iter().map(Vec::len).sum();
    let options = DatasetOptions { intercept: schema.intercept, allow_zero_variance: schema.allow_zero_variance };
    let mut groups = Vec::new();
    for ((label, recs), ns) in labels.into_iter().zip(sampled).zip(nonsampled) {
        if recs.is_empty() {
            if !ns.is_empty() {
                log::warn!("group {label} has nonsampled areas but no sampled ones; they are skipped");
            }
            continue;
        }
        let dataset = Dataset::new(recs, options).with_context(|| format!("group {label}"))?.with_group_label(label.clone());
        groups.push(Group { label, dataset, nonsampled: ns });
    }
    let mut similarity = schema.similarity.clone();
    if alt_idx.is_some() && !similarity.iter().any(|s| s == "altitude") {
        similarity.insert(0, "altitude".into());
    }
    Ok(Loaded { groups, covariates, similarity, rows, sampled_rows })
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes records in the input schema (`alt` and similarity columns included when present).
pub fn write_dataset(path: &Path, records: &[AreaRecord], covariates: &[String], similarity: &[String]) -> Result<()> {
    let mut w = create(path)?;
    let extra: Vec<&String> = similarity.iter().filter(|s| s.as_str() != "altitude").collect();
    let mut header: Vec<&str> = REQUIRED_COLUMNS.to_vec();
    header.push("alt");
    header.extend(covariates.iter().map(String::as_str));
    header.extend(extra.iter().map(|s| s.as_str()));
    w.write_record(&header)?;
    for r in records {
        let mut row = vec![
            r.area_id.clone(),
            fmt_opt(r.direct_estimate),
            fmt_opt(r.sampling_variance),
            r.sample_size.to_string(),
            fmt_opt(r.longitude),
            fmt_opt(r.latitude),
            fmt_opt(r.altitude),
        ];
        row.extend(r.covariates.iter().map(|&c| fmt_num(c)));
        row.extend(extra.iter().map(|s| fmt_opt(r.aux_similarity.get(s.as_str()).copied())));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_truth(path: &Path, records: &[AreaRecord], theta: &[f64], u: &[f64]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["area_id", "theta", "u"])?;
    for ((r, t), e) in records.iter().zip(theta).zip(u) {
        w.write_record([r.area_id.clone(), fmt_num(*t), fmt_num(*e)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions(path: &Path, tables: &[PredictionTable]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(PREDICTION_COLUMNS)?;
    for t in tables {
        for r in &t.rows {
            w.write_record([
                r.area_id.clone(),
                r.sample_size.to_string(),
                fmt_opt(r.direct),
                fmt_opt(r.direct_se),
                fmt_num(r.predictor),
                r.method.to_string(),
                fmt_opt(r.mse),
                fmt_opt(r.cv),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_method(s: &str) -> Result<MethodLabel> {
    Ok(match s {
        "DIRECT" => MethodLabel::Direct,
        "EBLUP" => MethodLabel::Eblup,
        "SEBLUP" => MethodLabel::Seblup,
        _ => bail!("unknown method label {s}"),
    })
}

/// Reads a predictions file back into one table per method, in first-seen order.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionTable>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    for c in PREDICTION_COLUMNS {
        if !headers.iter().any(|h| h == c) {
            bail!("{}: missing column {c}", path.display());
        }
    }
    let at = |name: &str| headers.iter().position(|h| h == name).expect("checked");
    let mut tables: Vec<PredictionTable> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let opt = |name: &str| -> Result<Option<f64>> {
            let s = rec.get(at(name)).unwrap_or("");
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| anyhow!("line {line}: {name} is not numeric"))
            }
        };
        let method = parse_method(rec.get(at("method")).unwrap_or(""))?;
        let row = PredictionRow {
            area_id: rec.get(at("area_id")).unwrap_or("").to_string(),
            sample_size: rec.get(at("n")).unwrap_or("").parse().map_err(|_| anyhow!("line {line}: bad n"))?,
            direct: opt("direct")?,
            direct_se: opt("direct_se")?,
            predictor: opt("predictor")?.ok_or_else(|| anyhow!("line {line}: empty predictor"))?,
            gamma: None,
            method,
            mse: opt("mse")?,
            cv: opt("cv")?,
        };
        match tables.iter_mut().find(|t| t.method == method) {
            Some(t) => t.rows.push(row),
            None => tables.push(PredictionTable { method, rows: vec![row] }),
        }
    }
    Ok(tables)
}

/// Long-format `(area_id, method, value)` rows of one quantity.
pub fn write_plot(path: &Path, tables: &[PredictionTable], value: impl Fn(&PredictionRow) -> Option<f64>) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["area_id", "method", "value"])?;
    for t in tables {
        for r in &t.rows {
            if let Some(v) = value(r) {
                w.write_record([r.area_id.clone(), r.method.to_string(), fmt_num(v)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// One row of the MSE components file.
#[derive(Debug, Clone)]
pub struct MseRow {
    pub group: String,
    pub area_id: String,
    pub method: String,
    pub estimator: String,
    pub g1: Option<f64>,
    pub g2: Option<f64>,
    pub g3: Option<f64>,
    pub g4: Option<f64>,
    pub mse: f64,
}

pub fn write_mse(path: &Path, rows: &[MseRow]) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["group", "area_id", "method", "estimator", "g1", "g2", "g3", "g4", "mse"])?;
    for r in rows {
        w.write_record([
            r.group.clone(),
            r.area_id.clone(),
            r.method.clone(),
            r.estimator.clone(),
            fmt_opt(r.g1),
            fmt_opt(r.g2),
            fmt_opt(r.g3),
            fmt_opt(r.g4),
            fmt_num(r.mse),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_cv_table(path: &Path, table: &CvTable) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["method", "size_bin", "cv_bin", "count"])?;
    for (m, s, c, n) in table.rows() {
        w.write_record([m, s, c, n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, group: &str, result: &SweepResult) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["group", "similarity", "k1", "k2", "sigma_eps2", "rho", "converged", "optimal", "error"])?;
    let sim = result.similarity_variable.clone().unwrap_or_default();
    for c in &result.cells {
        w.write_record([
            group.to_string(),
            sim.clone(),
            c.k1.to_string(),
            c.k2.to_string(),
            fmt_num(c.sigma_eps2),
            fmt_num(c.rho),
            c.converged.to_string(),
            (result.optimal == Some((c.k1, c.k2))).to_string(),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an explicit `D x D` weight matrix (no header, comma separated).
pub fn read_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|s| s.parse::<f64>().map_err(|_| anyhow!("non-numeric weight {s:?}"))).collect::<Result<Vec<_>>>()?);
    }
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Per-group row counts, keyed by label.
pub fn group_sizes(loaded: &Loaded) -> BTreeMap<String, usize> {
    loaded.groups.iter().map(|g| (g.label.clone(), g.dataset.areas())).collect()
}

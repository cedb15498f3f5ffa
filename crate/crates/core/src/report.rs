//! Coefficient-of-variation cross-tabulation by sample size.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Result, SaeError};
use crate::predict::PredictionTable;

pub const ALL_AREAS: &str = "All Districts";

/// Bin edges. Size bins are inclusive upper bounds (`n <= edge`), with a
/// final open bin; CV bins are exclusive upper bounds (`cv < edge`).
#[derive(Debug, Clone, PartialEq)]
pub struct CvBins {
    pub size_upper: Vec<u32>,
    pub cv_upper: Vec<f64>,
}

impl Default for CvBins {
    fn default() -> Self {
        Self { size_upper: vec![6, 10, 20, 50], cv_upper: vec![0.10, 0.20, 0.30] }
    }
}

impl CvBins {
    pub fn validate(&self) -> Result<()> {
        let inc_u = self.size_upper.windows(2).all(|w| w[0] < w[1]);
        let inc_c = self.cv_upper.windows(2).all(|w| w[0] < w[1]) && self.cv_upper.iter().all(|c| c.is_finite() && *c > 0.0);
        if inc_u && inc_c {
            Ok(())
        } else {
            Err(SaeError::InvalidInput("bin edges must be strictly increasing".into()))
        }
    }

    pub fn size_labels(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.size_upper.len() + 1);
        let mut lo = 0u32;
        for (k, &hi) in self.size_upper.iter().enumerate() {
            out.push(if k == 0 { format!("<{}", hi + 1) } else { format!("{lo}-{hi}") });
            lo = hi + 1;
        }
        out.push(format!(">{}", lo.saturating_sub(1)));
        out
    }

    pub fn cv_labels(&self) -> Vec<String> {
        let pct = |c: f64| libm::round(c * 100.0) as i64;
        let mut out = Vec::with_capacity(self.cv_upper.len() + 1);
        for (k, &c) in self.cv_upper.iter().enumerate() {
            out.push(if k == 0 { format!("<{}%", pct(c)) } else { format!("{}-{}%", pct(self.cv_upper[k - 1]), pct(c)) });
        }
        out.push(format!(">{}%", self.cv_upper.last().map_or(0, |&c| pct(c))));
        out
    }

    pub fn size_bin(&self, n: u32) -> usize {
        self.size_upper.iter().position(|&hi| n <= hi).unwrap_or(self.size_upper.len())
    }

    pub fn cv_bin(&self, cv: f64) -> usize {
        self.cv_upper.iter().position(|&hi| cv < hi).unwrap_or(self.cv_upper.len())
    }
}

/// Counts per method, size bin and CV bin. `counts[m][s][c]`; the last
/// size row is the all-areas margin.
#[derive(Debug, Clone, PartialEq)]
pub struct CvTable {
    pub methods: Vec<String>,
    pub size_labels: Vec<String>,
    pub cv_labels: Vec<String>,
    pub counts: Vec<Vec<Vec<usize>>>,
    /// Areas without a CV, per method.
    pub excluded: Vec<usize>,
    pub warnings: Vec<String>,
}

impl CvTable {
    /// Long-format rows `(method, size bin, cv bin, count)`, margin last.
    pub fn rows(&self) -> Vec<(String, String, String, usize)> {
        let mut out = Vec::new();
        for (m, name) in self.methods.iter().enumerate() {
            for (s, sl) in self.size_labels.iter().chain(core::iter::once(&String::from(ALL_AREAS))).enumerate() {
                for (c, cl) in self.cv_labels.iter().enumerate() {
                    out.push((name.clone(), sl.clone(), cl.clone(), self.counts[m][s][c]));
                }
            }
        }
        out
    }

    /// Areas per size bin (margin last) for method `m`.
    pub fn row_totals(&self, m: usize) -> Vec<usize> {
        self.counts[m].iter().map(|r| r.iter().sum()).collect()
    }
}

/// Cross-tabulates each named table. Rows without a CV are excluded with a warning.
pub fn cv_table(tables: &[(String, &PredictionTable)], bins: &CvBins) -> Result<CvTable> {
    bins.validate()?;
    let ns = bins.size_upper.len() + 1;
    let nc = bins.cv_upper.len() + 1;
    let mut counts = Vec::with_capacity(tables.len());
    let mut excluded = Vec::with_capacity(tables.len());
    let mut warnings = Vec::new();
    for (name, table) in tables {
        let mut grid = vec![vec![0usize; nc]; ns + 1];
        let mut skipped = 0;
        for row in &table.rows {
            match row.cv {
                Some(cv) => {
                    let c = bins.cv_bin(cv);
                    grid[bins.size_bin(row.sample_size)][c] += 1;
                    grid[ns][c] += 1;
                }
                None => skipped += 1,
            }
        }
        if skipped > 0 {
            log::warn!("{name}: {skipped} areas without a CV excluded");
            warnings.push(format!("{name}: {skipped} areas without a CV excluded"));
        }
        counts.push(grid);
        excluded.push(skipped);
    }
    Ok(CvTable {
        methods: tables.iter().map(|(n, _)| n.clone()).collect(),
        size_labels: bins.size_labels(),
        cv_labels: bins.cv_labels(),
        counts,
        excluded,
        warnings,
    })
}

//! Two-step nearest-neighbour proximity matrices and the `(K1, K2)`
//! sensitivity sweep.
//!
//! Step one keeps the `K1` geographically nearest areas (great-circle
//! distance); step two keeps the `K2` of those closest in a similarity
//! variable such as altitude. Every selected neighbour gets weight `1/K2`.
//! Ties are broken by ascending `area_id` in both steps.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::DMatrix;

use crate::error::{Result, SaeError};
use crate::exec;
use crate::math;
use crate::model::{AreaRecord, Dataset};
use crate::spatial::{self, ProximityMatrix, SarStructure, SpatialConfig};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Haversine distance in kilometres between two (longitude, latitude) points
/// given in degrees.
pub fn haversine_km(lon1: f64, lat1: f64, lon2: f64, lat2: f64) -> f64 {
    let to_rad = core::f64::consts::PI / 180.0;
    let (phi1, phi2) = (lat1 * to_rad, lat2 * to_rad);
    let dphi = phi2 - phi1;
    let dlambda = (lon2 - lon1) * to_rad;
    let s1 = math::sin(0.5 * dphi);
    let s2 = math::sin(0.5 * dlambda);
    let a = (s1 * s1 + math::cos(phi1) * math::cos(phi2) * s2 * s2).clamp(0.0, 1.0);
    2.0 * EARTH_RADIUS_KM * math::atan2(math::sqrt(a), math::sqrt(1.0 - a))
}

/// Great-circle distance between two areas in kilometres.
pub fn geo_distance(a: &AreaRecord, b: &AreaRecord) -> Result<f64> {
    let coords = |r: &AreaRecord| match (r.longitude, r.latitude) {
        (Some(lon), Some(lat)) => Ok((lon, lat)),
        _ => Err(SaeError::InvalidInput(format!("area {} has no coordinates", r.area_id))),
    };
    let (lon1, lat1) = coords(a)?;
    let (lon2, lat2) = coords(b)?;
    Ok(haversine_km(lon1, lat1, lon2, lat2))
}

/// Every area's other areas ordered by distance, then by `area_id`.
///
/// Building this once lets all `(K1, K2)` cells share step one: the `K1`
/// candidates are always a prefix of the same list.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    ids: Vec<String>,
    /// `ranked[i]` holds `(j, distance)` sorted.
    ranked: Vec<Vec<(usize, f64)>>,
}

impl NeighborIndex {
    pub fn new(areas: &[AreaRecord]) -> Result<Self> {
        let d = areas.len();
        let mut dist = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in (i + 1)..d {
                let v = geo_distance(&areas[i], &areas[j])?;
                dist[(i, j)] = v;
                dist[(j, i)] = v;
            }
        }
        let ids: Vec<String> = areas.iter().map(|a| a.area_id.clone()).collect();
        let ranked = (0..d)
            .map(|i| {
                let mut others: Vec<(usize, f64)> = (0..d).filter(|&j| j != i).map(|j| (j, dist[(i, j)])).collect();
                others.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| ids[a.0].cmp(&ids[b.0])));
                others
            })
            .collect();
        Ok(Self { ids, ranked })
    }

    pub fn areas(&self) -> usize {
        self.ids.len()
    }

    /// The `k1` nearest areas of area `i`, nearest first.
    pub fn candidates(&self, i: usize, k1: usize) -> &[(usize, f64)] {
        &self.ranked[i][..k1.min(self.ranked[i].len())]
    }

    /// Builds the two-step proximity matrix. `areas` must be the records the
    /// index was built from, in the same order.
    pub fn proximity(&self, areas: &[AreaRecord], k1: usize, k2: usize, similarity: Option<&str>) -> Result<ProximityMatrix> {
        let d = self.areas();
        if areas.len() != d {
            return Err(SaeError::InvalidInput("areas differ from the indexed set".into()));
        }
        if k2 == 0 || k2 > k1 {
            return Err(SaeError::InvalidInput(format!("need 1 <= K2 <= K1, got K1 = {k1}, K2 = {k2}")));
        }
        if k1 >= d {
            return Err(SaeError::InvalidInput(format!("K1 = {k1} needs at least {} areas, have {d}", k1 + 1)));
        }
        // K2 = K1 skips the refinement entirely
        let similarity = if k2 == k1 { None } else { similarity };
        let weight = 1.0 / k2 as f64;
        let mut weights = DMatrix::zeros(d, d);
        let mut lists = Vec::with_capacity(d);
        for i in 0..d {
            let cands = self.candidates(i, k1);
            let chosen: Vec<usize> = match similarity {
                None => cands.iter().take(k2).map(|c| c.0).collect(),
                Some(name) => match areas[i].similarity(name) {
                    None => {
                        log::warn!(
                            "area {} lacks similarity variable {name}; using its {k2} geographically nearest neighbours",
                            areas[i].area_id
                        );
                        cands.iter().take(k2).map(|c| c.0).collect()
                    }
                    Some(own) => {
                        // candidates without the variable rank after all others
                        let mut keyed: Vec<(usize, f64)> = cands
                            .iter()
                            .map(|&(j, _)| (j, areas[j].similarity(name).map_or(f64::INFINITY, |v| math::abs(v - own))))
                            .collect();
                        keyed.sort_by(|a, b| {
                            a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
                        });
                        keyed.iter().take(k2).map(|k| k.0).collect()
                    }
                },
            };
            let mut list = Vec::with_capacity(k2);
            for j in chosen {
                weights[(i, j)] = weight;
                list.push((self.ids[j].clone(), weight));
            }
            lists.push(list);
        }
        Ok(ProximityMatrix {
            weights,
            neighbor_lists: lists,
            k1,
            k2,
            similarity_variable: similarity.map(String::from),
        })
    }
}

/// Two-step neighbour definition: `K1` geographic nearest, refined to `K2`
/// by `similarity` (skipped when `K2 == K1`), equal weights `1/K2`.
pub fn two_step_neighbors(areas: &[AreaRecord], k1: usize, k2: usize, similarity: Option<&str>) -> Result<ProximityMatrix> {
    NeighborIndex::new(areas)?.proximity(areas, k1, k2, similarity)
}

/// One `(K1, K2)` cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub k1: usize,
    pub k2: usize,
    pub sigma_eps2: f64,
    pub rho: f64,
    pub converged: bool,
    /// Set when the fit failed outright; such cells carry NaN estimates.
    pub error: Option<String>,
}

/// Sweep outcome for one similarity variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub similarity_variable: Option<String>,
    /// Cells ordered by `K1`, then `K2`.
    pub cells: Vec<SweepCell>,
    /// Converged cell with the smallest `sigma_eps2`; ties go to smaller
    /// `K1`, then smaller `K2`.
    pub optimal: Option<(usize, usize)>,
}

impl SweepResult {
    pub fn cell(&self, k1: usize, k2: usize) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.k1 == k1 && c.k2 == k2)
    }

    pub fn optimal_cell(&self) -> Option<&SweepCell> {
        self.optimal.and_then(|(a, b)| self.cell(a, b))
    }
}

fn argmin(cells: &[SweepCell]) -> Option<(usize, usize)> {
    cells
        .iter()
        .filter(|c| c.converged && c.sigma_eps2.is_finite())
        .min_by(|a, b| {
            a.sigma_eps2
                .partial_cmp(&b.sigma_eps2)
                .unwrap_or(Ordering::Equal)
                .then(a.k1.cmp(&b.k1))
                .then(a.k2.cmp(&b.k2))
        })
        .map(|c| (c.k1, c.k2))
}

fn fit_cell(
    dataset: &Dataset,
    index: &NeighborIndex,
    k1: usize,
    k2: usize,
    similarity: Option<&str>,
    cfg: &SpatialConfig,
) -> SweepCell {
    let outcome = index
        .proximity(dataset.records(), k1, k2, similarity)
        .and_then(|w| SarStructure::new(&w))
        .and_then(|sar| spatial::estimate_spatial(dataset, &sar, cfg));
    match outcome {
        Ok(fit) => {
            let p = fit.params.spatial().expect("spatial fit");
            SweepCell { k1, k2, sigma_eps2: p.sigma_eps2, rho: p.rho, converged: fit.converged, error: None }
        }
        Err(e) => SweepCell {
            k1,
            k2,
            sigma_eps2: f64::NAN,
            rho: f64::NAN,
            converged: false,
            error: Some(format!("{e}")),
        },
    }
}

/// Fits the spatial model for every `K1` in `k1_values` and every
/// `1 <= K2 <= K1`, once per similarity variable. Diagonal cells
/// (`K2 == K1`) do not depend on the variable and are fitted once. With no
/// variables, only the diagonal is fitted.
pub fn sensitivity_sweep(
    dataset: &Dataset,
    k1_values: &[usize],
    similarity_variables: &[String],
    cfg: &SpatialConfig,
) -> Result<Vec<SweepResult>> {
    if k1_values.is_empty() {
        return Err(SaeError::InvalidInput("empty K1 range".into()));
    }
    let index = NeighborIndex::new(dataset.records())?;
    let mut k1s: Vec<usize> = k1_values.to_vec();
    k1s.sort_unstable();
    k1s.dedup();

    let diagonal = exec::map_indexed(k1s.len(), |i| fit_cell(dataset, &index, k1s[i], k1s[i], None, cfg));
    for c in &diagonal {
        if let Some(e) = &c.error {
            log::warn!("sweep cell K1 = {}, K2 = {} failed: {e}", c.k1, c.k2);
        }
    }
    if similarity_variables.is_empty() {
        let optimal = argmin(&diagonal);
        return Ok(alloc::vec![SweepResult { similarity_variable: None, cells: diagonal, optimal }]);
    }
    let mut results = Vec::with_capacity(similarity_variables.len());
    for var in similarity_variables {
        let off: Vec<(usize, usize)> =
            k1s.iter().flat_map(|&k1| (1..k1).map(move |k2| (k1, k2))).collect();
        let fitted = exec::map_indexed(off.len(), |i| fit_cell(dataset, &index, off[i].0, off[i].1, Some(var), cfg));
        let mut cells: Vec<SweepCell> = fitted.into_iter().chain(diagonal.iter().cloned()).collect();
        cells.sort_by(|a, b| a.k1.cmp(&b.k1).then(a.k2.cmp(&b.k2)));
        for c in cells.iter().filter(|c| !c.converged) {
            log::warn!("sweep cell K1 = {}, K2 = {} ({var}) did not converge", c.k1, c.k2);
        }
        let optimal = argmin(&cells);
        results.push(SweepResult { similarity_variable: Some(var.clone()), cells, optimal });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn area(id: &str, lon: f64, lat: f64) -> AreaRecord {
        AreaRecord::sampled(id, 0.0, 1.0, vec![], 5).with_coordinates(lon, lat)
    }

    #[test]
    fn distance_examples() {
        let a = area("a", -75.0, -12.0);
        assert_eq!(geo_distance(&a, &a).unwrap(), 0.0);
        let anti = haversine_km(0.0, 0.0, 180.0, 0.0);
        assert!((anti - core::f64::consts::PI * EARTH_RADIUS_KM).abs() < 0.1);
        assert!((anti - 20015.1).abs() < 0.1);
        let b = area("b", -71.5, -16.4);
        assert_eq!(geo_distance(&a, &b).unwrap(), geo_distance(&b, &a).unwrap());
        let missing = AreaRecord::sampled("m", 0.0, 1.0, vec![], 5);
        assert!(geo_distance(&a, &missing).is_err());
    }

    #[test]
    fn collinear_two_neighbours() {
        let areas: Vec<_> = (0..4).map(|i| area(&format!("a{i}"), 0.1 * i as f64, 0.0)).collect();
        let w = two_step_neighbors(&areas, 2, 2, None).unwrap();
        for i in 1..3 {
            assert_eq!(w.weights[(i, i - 1)], 0.5);
            assert_eq!(w.weights[(i, i + 1)], 0.5);
            assert_eq!(w.weights.row(i).sum(), 1.0);
        }
        // the end area's second neighbour is two steps away
        assert_eq!(w.weights[(0, 1)], 0.5);
        assert_eq!(w.weights[(0, 2)], 0.5);
    }

    #[test]
    fn altitude_refinement() {
        let alts = [0.0, 100.0, 5000.0, 5100.0];
        let areas: Vec<_> =
            (0..4).map(|i| area(&format!("a{i}"), 0.01 * i as f64, 0.0).with_altitude(alts[i])).collect();
        let w = two_step_neighbors(&areas, 3, 1, Some("altitude")).unwrap();
        assert_eq!(w.neighbor_lists[0], vec![(String::from("a1"), 1.0)]);
        assert_eq!(w.neighbor_lists[2], vec![(String::from("a3"), 1.0)]);
        assert_eq!(w.similarity_variable.as_deref(), Some("altitude"));
    }

    #[test]
    fn missing_similarity_falls_back_to_distance() {
        let mut areas: Vec<_> =
            (0..4).map(|i| area(&format!("a{i}"), 0.01 * i as f64, 0.0).with_altitude(1000.0 * i as f64)).collect();
        areas[0].aux_similarity.clear();
        areas[0].altitude = None;
        let w = two_step_neighbors(&areas, 3, 1, Some("altitude")).unwrap();
        assert_eq!(w.neighbor_lists[0][0].0, "a1");
    }

    #[test]
    fn ties_break_by_area_id() {
        let areas = vec![area("m", 0.0, 0.0), area("z", 0.1, 0.0), area("b", -0.1, 0.0)];
        let w = two_step_neighbors(&areas, 1, 1, None).unwrap();
        assert_eq!(w.neighbor_lists[0][0].0, "b");
    }

    #[test]
    fn k_guards() {
        let areas: Vec<_> = (0..4).map(|i| area(&format!("a{i}"), i as f64, 0.0)).collect();
        assert!(two_step_neighbors(&areas, 2, 3, None).is_err());
        assert!(two_step_neighbors(&areas, 4, 1, None).is_err());
        assert!(two_step_neighbors(&areas, 2, 0, None).is_err());
        let w = two_step_neighbors(&areas, 3, 3, Some("altitude")).unwrap();
        assert_eq!(w.similarity_variable, None);
    }
}

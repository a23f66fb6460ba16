//! Cell-tower positions as observation centroids, user-to-tower distance
//! samples and their empirical CDFs.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{AppObservation, ConnType, Tech, UidHash};
use crate::model::{centroid, haversine_km, GeoPoint};

#[derive(Debug, Error, PartialEq)]
pub enum TowerError {
    #[error("no samples")]
    EmptySamples,
    #[error("no edges")]
    EmptyEdges,
    #[error("edges must be finite and strictly increasing (index {0})")]
    BadEdges(usize),
    #[error("sample {0} is not finite")]
    NonFiniteSample(usize),
    #[error("percentile {0} outside [0, 1]")]
    BadQuantile(f64),
}

/// Cell ids are only unique within one carrier.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TowerKey {
    pub operator: String,
    pub cell_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerEstimate {
    pub cell_id: String,
    pub operator: String,
    /// Most frequent technology among the cell's observations.
    pub tech: Tech,
    pub position: GeoPoint,
    pub n_obs: u64,
    pub bbox_diag_km: f64,
    pub n_uids: u64,
}

impl TowerEstimate {
    /// Single-observation cells have a degenerate centroid.
    pub fn low_confidence(&self) -> bool {
        self.n_obs < 2
    }
}

fn tower_key(r: &AppObservation) -> Option<TowerKey> {
    if r.conn_type == ConnType::Wifi {
        return None;
    }
    r.cell_id.as_ref().map(|c| TowerKey {
        operator: r.operator.clone(),
        cell_id: c.clone(),
    })
}

fn estimate_one(key: &TowerKey, records: &[AppObservation], idx: &[usize]) -> TowerEstimate {
    let points: Vec<GeoPoint> = idx.iter().map(|&i| records[i].pos).collect();
    let position = centroid(&points).expect("every grouped cell has an observation");
    let (mut lat0, mut lat1, mut lon0, mut lon1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &points {
        lat0 = lat0.min(p.lat);
        lat1 = lat1.max(p.lat);
        lon0 = lon0.min(p.lon);
        lon1 = lon1.max(p.lon);
    }
    let bbox_diag_km = haversine_km(GeoPoint { lat: lat0, lon: lon0 }, GeoPoint { lat: lat1, lon: lon1 });
    let mut techs: BTreeMap<Tech, u64> = BTreeMap::new();
    let mut uids: BTreeSet<&UidHash> = BTreeSet::new();
    for &i in idx {
        *techs.entry(records[i].tech).or_default() += 1;
        uids.insert(&records[i].uid);
    }
    // BTreeMap order breaks ties toward LTE, then 3G
    let tech = techs
        .iter()
        .fold((Tech::Other, 0), |best, (&t, &n)| if n > best.1 { (t, n) } else { best })
        .0;
    TowerEstimate {
        cell_id: key.cell_id.clone(),
        operator: key.operator.clone(),
        tech,
        position,
        n_obs: idx.len() as u64,
        bbox_diag_km,
        n_uids: uids.len() as u64,
    }
}

/// Centroid of every non-wifi observation naming a cell. Each cell sums its
/// points in input order, so the result does not depend on thread count.
pub fn estimate_towers(records: &[AppObservation]) -> BTreeMap<TowerKey, TowerEstimate> {
    let mut groups: BTreeMap<TowerKey, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if let Some(k) = tower_key(r) {
            groups.entry(k).or_default().push(i);
        }
    }
    let groups: Vec<(TowerKey, Vec<usize>)> = groups.into_iter().collect();
    groups
        .into_par_iter()
        .map(|(k, idx)| {
            let est = estimate_one(&k, records, &idx);
            (k, est)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Distance in km from each cell-bearing observation to its cell's estimate,
/// grouped by (operator, observation tech), in input order.
pub fn distance_samples(
    records: &[AppObservation],
    towers: &BTreeMap<TowerKey, TowerEstimate>,
) -> BTreeMap<(String, Tech), Vec<f64>> {
    let mut out: BTreeMap<(String, Tech), Vec<f64>> = BTreeMap::new();
    for r in records {
        let Some(k) = tower_key(r) else { continue };
        let Some(t) = towers.get(&k) else { continue };
        out.entry((k.operator, r.tech))
            .or_default()
            .push(haversine_km(r.pos, t.position));
    }
    out
}

/// Fraction of samples ≤ each edge.
pub fn empirical_cdf(samples: &[f64], edges: &[f64]) -> Result<Vec<(f64, f64)>, TowerError> {
    if samples.is_empty() {
        return Err(TowerError::EmptySamples);
    }
    if edges.is_empty() {
        return Err(TowerError::EmptyEdges);
    }
    for (i, e) in edges.iter().enumerate() {
        if !e.is_finite() || (i > 0 && *e <= edges[i - 1]) {
            return Err(TowerError::BadEdges(i));
        }
    }
    if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
        return Err(TowerError::NonFiniteSample(i));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    Ok(edges
        .iter()
        .map(|&e| (e, sorted.partition_point(|&s| s <= e) as f64 / n))
        .collect())
}

pub const CDF_EDGE_COUNT: usize = 60;
pub const CDF_MIN_KM: f64 = 0.01;
pub const CDF_MAX_KM: f64 = 30.0;

/// Log-spaced edges from 10 m to 30 km.
pub fn default_cdf_edges() -> Vec<f64> {
    let ratio = (CDF_MAX_KM / CDF_MIN_KM).ln();
    let last = CDF_EDGE_COUNT - 1;
    (0..CDF_EDGE_COUNT)
        .map(|i| match i {
            0 => CDF_MIN_KM,
            i if i == last => CDF_MAX_KM,
            i => CDF_MIN_KM * (ratio * i as f64 / last as f64).exp(),
        })
        .collect()
}

/// Nearest-rank quantile.
pub fn quantile(samples: &[f64], q: f64) -> Result<f64, TowerError> {
    if samples.is_empty() {
        return Err(TowerError::EmptySamples);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(TowerError::BadQuantile(q));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    Ok(v[rank - 1])
}

/// Distinct cells per (operator, tech).
pub fn cells_per_operator(towers: &BTreeMap<TowerKey, TowerEstimate>) -> BTreeMap<(String, Tech), u64> {
    let mut out = BTreeMap::new();
    for t in towers.values() {
        *out.entry((t.operator.clone(), t.tech)).or_default() += 1;
    }
    out
}

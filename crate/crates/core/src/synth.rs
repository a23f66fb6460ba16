//! Seeded synthetic city: both record schemas, a census, a POI list and the
//! ground truth the pipeline is expected to recover.
//!
//! Users get one of five planted roles. Homed users sleep in a fixed cell
//! every night; commuters additionally spend weekdays in a different work
//! cell, home workers stay home through the working day. Nomads rotate their
//! nights over several places so no place reaches the residence threshold.
//! Sparse users are seen on too few days to pass the consistency filter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohorts::{write_census, CensusDistrict, CohortError, DistrictKind};
use crate::ingest::{
    format_app_record, format_location_record, hash_uid, AppObservation, ConnType, ObservationRecord, Tech, UidHash,
    APP_HEADER, LOCATION_HEADER,
};
use crate::model::{haversine_km, quantize, GeoPoint, GridCell, PipelineConfig, PoiCategory, TimeStamp, SECS_PER_DAY};
use crate::poi_apps::{write_pois, Poi, PoiError};

/// 2015-03-02 00:00:00 UTC, a Monday.
pub const SYNTH_START: i64 = 1_425_254_400;
pub const SYNTH_RESOLUTION: f64 = 0.001;

const MIN: i64 = 60;
const HOUR: i64 = 3600;
const DAY_END: i64 = 23 * HOUR + 45 * MIN;
const POI_CLEARANCE_KM: f64 = 0.5;
const POI_SPACING_KM: f64 = 1.5;
const ERRAND_CLEARANCE_KM: f64 = 0.3;
const VISIT_STEP: i64 = 5 * MIN;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("synth config line {0} is not key=value")]
    BadLine(usize),
    #[error("unknown synth key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid synth config: {0}")]
    Invalid(String),
    #[error("could not place {0} inside the city; enlarge the district grid")]
    Layout(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Census(#[from] CohortError),
    #[error(transparent)]
    Poi(#[from] PoiError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub span_days: u32,
    pub fraction_homed: f64,
    pub fraction_commuters: f64,
    pub fraction_home_workers: f64,
    pub fraction_nomads: f64,
    pub gps_jitter_m: f64,
    /// Location fixes per hour while a user is somewhere.
    pub obs_rate_active: f64,
    pub district_rows: u32,
    pub district_cols: u32,
    /// District side length in anchor cells.
    pub district_cells: u32,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Districts planted below the population floor.
    pub small_districts: u32,
    pub n_towers: u32,
    pub tower_radius_km: f64,
    pub operators: Vec<String>,
    pub n_malls: u32,
    pub n_fastfood: u32,
    pub poi_radius_m: f64,
    /// Visits per week for poor, middle and rich users.
    pub mall_rate: [f64; 3],
    pub fastfood_rate: [f64; 3],
    /// (app, fraction of users in its community).
    pub app_profiles: Vec<(String, f64)>,
    /// App-less connection records per user.
    pub conn_records_per_user: u32,
    /// Place anchors on cell corners instead of cell centers.
    pub boundary_stress: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            n_users: 1000,
            span_days: 60,
            fraction_homed: 0.9,
            fraction_commuters: 0.25,
            fraction_home_workers: 0.15,
            fraction_nomads: 0.05,
            gps_jitter_m: 10.0,
            obs_rate_active: 3.0,
            district_rows: 4,
            district_cols: 5,
            district_cells: 20,
            origin_lat: 42.3,
            origin_lon: -71.15,
            small_districts: 2,
            n_towers: 12,
            tower_radius_km: 2.0,
            operators: vec!["opA".into(), "opB".into(), "opC".into()],
            n_malls: 4,
            n_fastfood: 8,
            poi_radius_m: 150.0,
            mall_rate: [0.6, 0.5, 0.4],
            fastfood_rate: [1.0, 0.8, 0.5],
            app_profiles: vec![("pinboard".into(), 0.1), ("swipe".into(), 0.05)],
            conn_records_per_user: 40,
            boundary_stress: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

impl SynthConfig {
    pub fn from_kv_str(text: &str) -> Result<Self, SynthError> {
        let mut cfg = SynthConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(SynthError::BadLine(i + 1))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), SynthError> {
        let bad = || SynthError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> SynthError) -> Result<T, SynthError> {
            v.parse().map_err(|_| bad())
        }
        let rates = |v: &str| -> Result<[f64; 3], SynthError> {
            parse_list::<f64>(v).and_then(|r| r.try_into().ok()).ok_or_else(bad)
        };
        match key {
            "seed" => self.seed = num(value, bad)?,
            "n_users" => self.n_users = num(value, bad)?,
            "span_days" => self.span_days = num(value, bad)?,
            "fraction_homed" => self.fraction_homed = num(value, bad)?,
            "fraction_commuters" => self.fraction_commuters = num(value, bad)?,
            "fraction_home_workers" => self.fraction_home_workers = num(value, bad)?,
            "fraction_nomads" => self.fraction_nomads = num(value, bad)?,
            "gps_jitter_m" => self.gps_jitter_m = num(value, bad)?,
            "obs_rate_active" => self.obs_rate_active = num(value, bad)?,
            "district_rows" => self.district_rows = num(value, bad)?,
            "district_cols" => self.district_cols = num(value, bad)?,
            "district_cells" => self.district_cells = num(value, bad)?,
            "origin_lat" => self.origin_lat = num(value, bad)?,
            "origin_lon" => self.origin_lon = num(value, bad)?,
            "small_districts" => self.small_districts = num(value, bad)?,
            "n_towers" => self.n_towers = num(value, bad)?,
            "tower_radius_km" => self.tower_radius_km = num(value, bad)?,
            "operators" => {
                self.operators = value.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
            }
            "n_malls" => self.n_malls = num(value, bad)?,
            "n_fastfood" => self.n_fastfood = num(value, bad)?,
            "poi_radius_m" => self.poi_radius_m = num(value, bad)?,
            "mall_rate" => self.mall_rate = rates(value)?,
            "fastfood_rate" => self.fastfood_rate = rates(value)?,
            "app_profiles" => {
                let mut out = Vec::new();
                for part in value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (name, frac) = part.split_once(':').ok_or_else(bad)?;
                    out.push((name.trim().to_string(), num(frac.trim(), bad)?));
                }
                self.app_profiles = out;
            }
            "conn_records_per_user" => self.conn_records_per_user = num(value, bad)?,
            "boundary_stress" => self.boundary_stress = num(value, bad)?,
            _ => return Err(SynthError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let invalid = |s: &str| Err(SynthError::Invalid(s.to_string()));
        let fracs = [
            self.fraction_homed,
            self.fraction_commuters,
            self.fraction_home_workers,
            self.fraction_nomads,
        ];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return invalid("fractions must lie in [0, 1]");
        }
        let c = self.role_counts();
        if c.commuters + c.home_workers > c.homed {
            return invalid("commuters plus home workers exceed homed users");
        }
        if c.homed + c.nomads > self.n_users {
            return invalid("homed plus nomad users exceed n_users");
        }
        if !(self.obs_rate_active >= 2.0 && self.obs_rate_active <= 60.0) {
            return invalid("obs_rate_active must be within [2, 60] per hour");
        }
        if !(self.gps_jitter_m >= 0.0 && self.gps_jitter_m <= 100.0) {
            return invalid("gps_jitter_m must be within [0, 100]");
        }
        if self.district_rows == 0 || self.district_cols == 0 || self.district_cells < 4 {
            return invalid("district grid needs at least one district of 4 cells");
        }
        if self.small_districts >= self.district_rows * self.district_cols {
            return invalid("small_districts must leave at least one district above the floor");
        }
        if self.n_towers > 0 && self.operators.is_empty() {
            return invalid("towers need at least one operator");
        }
        if !(self.tower_radius_km > 0.0 && self.tower_radius_km <= 20.0) {
            return invalid("tower_radius_km must be within (0, 20]");
        }
        if !(self.poi_radius_m >= 50.0 && self.poi_radius_m <= 500.0) {
            return invalid("poi_radius_m must be within [50, 500]");
        }
        if self.mall_rate.iter().chain(&self.fastfood_rate).any(|r| !(0.0..=7.0).contains(r)) {
            return invalid("visit rates must be within [0, 7] per week");
        }
        if self.app_profiles.iter().any(|(_, f)| !(0.0..=0.5).contains(f)) {
            return invalid("app community fractions must be within [0, 0.5]");
        }
        let names: BTreeSet<&str> = self.app_profiles.iter().map(|(n, _)| n.as_str()).collect();
        if names.len() != self.app_profiles.len() || names.iter().any(|n| n.contains(',') || n.is_empty()) {
            return invalid("app names must be unique, non-empty and comma-free");
        }
        Ok(())
    }

    pub fn role_counts(&self) -> RoleCounts {
        let n = self.n_users as f64;
        let count = |f: f64| (f * n).round() as usize;
        RoleCounts {
            homed: count(self.fraction_homed),
            commuters: count(self.fraction_commuters),
            home_workers: count(self.fraction_home_workers),
            nomads: count(self.fraction_nomads),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoleCounts {
    pub homed: usize,
    pub commuters: usize,
    pub home_workers: usize,
    pub nomads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Commuter,
    HomeWorker,
    HomedOnly,
    Nomad,
    Sparse,
}

impl Role {
    pub fn is_homed(&self) -> bool {
        matches!(self, Role::Commuter | Role::HomeWorker | Role::HomedOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitTruth {
    pub poi_id: String,
    pub category: String,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserTruth {
    pub uid: String,
    pub index: usize,
    pub role: Role,
    /// Anchor cell indices at [`GroundTruth::anchor_resolution`].
    pub home: Option<[i64; 2]>,
    pub work: Option<[i64; 2]>,
    pub district_id: Option<String>,
    /// poor, middle, rich or unassigned under default thresholds.
    pub cohort: String,
    pub is_commuter: bool,
    pub work_hours: Option<f64>,
    pub communities: Vec<String>,
    pub app_invocations: BTreeMap<String, u32>,
    pub visits: Vec<VisitTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerTruth {
    pub operator: String,
    pub cell_id: String,
    pub tech: String,
    pub lat: f64,
    pub lon: f64,
    pub radius_km: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub start_epoch: i64,
    pub span_days: u32,
    pub anchor_resolution: f64,
    pub users: Vec<UserTruth>,
    pub towers: Vec<TowerTruth>,
    /// Planted community size per app.
    pub communities: BTreeMap<String, usize>,
}

impl GroundTruth {
    pub fn cell(&self, idx: [i64; 2]) -> GridCell {
        GridCell::new(self.anchor_resolution, idx[0], idx[1])
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub location: Vec<ObservationRecord>,
    pub app: Vec<AppObservation>,
    pub census: Vec<CensusDistrict>,
    pub pois: Vec<Poi>,
    pub truth: GroundTruth,
}

struct Tower {
    truth: TowerTruth,
    center: GeoPoint,
    tech: Tech,
}

struct District {
    row: u32,
    col: u32,
    id: String,
    population: u64,
    income: u64,
}

struct Layout {
    lat0: i64,
    lon0: i64,
    districts: Vec<District>,
    pois: Vec<Poi>,
    towers: Vec<Tower>,
}

impl Layout {
    fn lat_cells(&self, cfg: &SynthConfig) -> i64 {
        (cfg.district_rows * cfg.district_cells) as i64
    }

    fn lon_cells(&self, cfg: &SynthConfig) -> i64 {
        (cfg.district_cols * cfg.district_cells) as i64
    }

    fn random_point(&self, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> GeoPoint {
        let lat = (self.lat0 as f64 + rng.gen::<f64>() * self.lat_cells(cfg) as f64) * SYNTH_RESOLUTION;
        let lon = (self.lon0 as f64 + rng.gen::<f64>() * self.lon_cells(cfg) as f64) * SYNTH_RESOLUTION;
        GeoPoint { lat, lon }
    }

    fn clear_of_pois(&self, p: GeoPoint) -> bool {
        self.pois.iter().all(|q| haversine_km(p, q.center) >= POI_CLEARANCE_KM)
    }
}

/// Planted per-user facts decided before any record is drawn.
struct UserPlan {
    index: usize,
    uid: UidHash,
    role: Role,
    district: Option<usize>,
    home: Option<GridCell>,
    work: Option<GridCell>,
    apps: BTreeMap<String, u32>,
}

fn cohort_slot(label: &str) -> usize {
    match label {
        "poor" => 0,
        "rich" => 2,
        _ => 1,
    }
}

fn label_for(d: &District, defaults: &PipelineConfig) -> &'static str {
    if d.population < defaults.district_population_min {
        "unassigned"
    } else if d.income < defaults.poor_income_max {
        "poor"
    } else if d.income > defaults.rich_income_min {
        "rich"
    } else {
        "middle"
    }
}

fn work_hours_for(label: &str) -> i64 {
    match label {
        "rich" => 7,
        "poor" => 9,
        _ => 8,
    }
}

fn disc_offset(rng: &mut ChaCha8Rng, p: GeoPoint, radius_m: f64) -> GeoPoint {
    if radius_m <= 0.0 {
        return p;
    }
    let r = radius_m * rng.gen::<f64>().sqrt();
    let a = rng.gen::<f64>() * std::f64::consts::TAU;
    p.offset_m(r * a.cos(), r * a.sin())
}

/// A point uniform in the disc of `radius_km` around `center`.
pub fn uniform_in_disc(rng: &mut ChaCha8Rng, center: GeoPoint, radius_km: f64) -> GeoPoint {
    disc_offset(rng, center, radius_km * 1000.0)
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

fn build_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Layout, SynthError> {
    let lat0 = (cfg.origin_lat / SYNTH_RESOLUTION).round() as i64;
    let lon0 = (cfg.origin_lon / SYNTH_RESOLUTION).round() as i64;
    let n_d = (cfg.district_rows * cfg.district_cols) as usize;

    let mut order: Vec<usize> = (0..n_d).collect();
    order.shuffle(rng);
    let small: BTreeSet<usize> = order[..cfg.small_districts as usize].iter().copied().collect();
    let rest: Vec<usize> = order[cfg.small_districts as usize..].to_vec();
    let mut population = vec![0u64; n_d];
    let mut income = vec![0u64; n_d];
    for (k, &i) in small.iter().enumerate() {
        population[i] = if k == 0 { 4999 } else { rng.gen_range(500..4999) };
    }
    for (k, &i) in rest.iter().enumerate() {
        population[i] = if k == 0 { 5000 } else { rng.gen_range(8000..60_000) };
    }
    // the threshold edges first, then spread values
    let edges = [44_999, 45_000, 75_000, 75_001];
    for (k, &i) in rest.iter().enumerate() {
        income[i] = edges.get(k).copied().unwrap_or_else(|| rng.gen_range(250..1300) * 100);
    }
    for &i in &small {
        income[i] = rng.gen_range(250..1300) * 100;
    }
    let districts = (0..n_d)
        .map(|i| {
            let (row, col) = (i as u32 / cfg.district_cols, i as u32 % cfg.district_cols);
            District {
                row,
                col,
                id: format!("D{row:02}{col:02}"),
                population: population[i],
                income: income[i],
            }
        })
        .collect();

    let mut layout = Layout {
        lat0,
        lon0,
        districts,
        pois: Vec::new(),
        towers: Vec::new(),
    };

    let cats = std::iter::repeat_n(PoiCategory::Mall, cfg.n_malls as usize)
        .chain(std::iter::repeat_n(PoiCategory::Fastfood, cfg.n_fastfood as usize));
    for (i, cat) in cats.enumerate() {
        let mut placed = None;
        for _ in 0..10_000 {
            let p = layout.random_point(cfg, rng);
            let p = GeoPoint {
                lat: round_to(p.lat, 5),
                lon: round_to(p.lon, 5),
            };
            if layout.pois.iter().all(|q| haversine_km(p, q.center) >= POI_SPACING_KM) {
                placed = Some(p);
                break;
            }
        }
        let center = placed.ok_or(SynthError::Layout("points of interest"))?;
        let prefix = if cat == PoiCategory::Mall { "mall" } else { "food" };
        layout.pois.push(Poi::new(format!("{prefix}-{i:03}"), cat, center, cfg.poi_radius_m)?);
    }

    for i in 0..cfg.n_towers as usize {
        let p = layout.random_point(cfg, rng);
        let center = GeoPoint {
            lat: round_to(p.lat, 5),
            lon: round_to(p.lon, 5),
        };
        let operator = cfg.operators[i % cfg.operators.len()].clone();
        let tech = if (i / cfg.operators.len()) % 3 == 2 { Tech::G3 } else { Tech::Lte };
        layout.towers.push(Tower {
            truth: TowerTruth {
                operator,
                cell_id: format!("cell-{i:04}"),
                tech: tech.as_str().to_string(),
                lat: center.lat,
                lon: center.lon,
                radius_km: cfg.tower_radius_km,
            },
            center,
            tech,
        });
    }
    Ok(layout)
}

fn census_of(cfg: &SynthConfig, layout: &Layout) -> Result<Vec<CensusDistrict>, SynthError> {
    let c = cfg.district_cells as i64;
    let deg = |idx: i64| idx as f64 / 1000.0;
    let rect = |la0: i64, lo0: i64, la1: i64, lo1: i64| {
        vec![
            GeoPoint { lat: deg(la0), lon: deg(lo0) },
            GeoPoint { lat: deg(la0), lon: deg(lo1) },
            GeoPoint { lat: deg(la1), lon: deg(lo1) },
            GeoPoint { lat: deg(la1), lon: deg(lo0) },
        ]
    };
    let mut out = Vec::new();
    for d in &layout.districts {
        let la = layout.lat0 + d.row as i64 * c;
        let lo = layout.lon0 + d.col as i64 * c;
        let kind = if (d.row + d.col) % 2 == 0 { DistrictKind::Neighborhood } else { DistrictKind::Town };
        out.push(CensusDistrict::new(
            d.id.clone(),
            format!("District {}-{}", d.row, d.col),
            kind,
            d.population,
            d.income,
            rect(la, lo, la + c, lo + c),
        )?);
    }
    // an enclosing metro area that overlaps every district
    let total: u64 = layout.districts.iter().map(|d| d.population).sum();
    out.push(CensusDistrict::new(
        "METRO".to_string(),
        "Metro area".to_string(),
        DistrictKind::Ambiguous,
        total,
        60_000,
        rect(
            layout.lat0 - 1,
            layout.lon0 - 1,
            layout.lat0 + layout.lat_cells(cfg) + 1,
            layout.lon0 + layout.lon_cells(cfg) + 1,
        ),
    )?);
    Ok(out)
}

/// A random anchor cell strictly inside district `d`, one cell from its
/// edges, clear of every POI and of `avoid`.
fn anchor_cell(
    cfg: &SynthConfig,
    layout: &Layout,
    d: &District,
    avoid: Option<GridCell>,
    rng: &mut ChaCha8Rng,
) -> Result<GridCell, SynthError> {
    let c = cfg.district_cells as i64;
    let la = layout.lat0 + d.row as i64 * c;
    let lo = layout.lon0 + d.col as i64 * c;
    for _ in 0..10_000 {
        let cell = GridCell::new(SYNTH_RESOLUTION, rng.gen_range(la + 1..la + c - 1), rng.gen_range(lo + 1..lo + c - 1));
        if !layout.clear_of_pois(cell.center()) {
            continue;
        }
        if avoid.is_some_and(|a| haversine_km(a.center(), cell.center()) < 1.0) {
            continue;
        }
        return Ok(cell);
    }
    Err(SynthError::Layout("anchor cells"))
}

fn plan_users(cfg: &SynthConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Result<Vec<UserPlan>, SynthError> {
    let n = cfg.n_users;
    let counts = cfg.role_counts();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut roles = vec![Role::Sparse; n];
    let homed_only = counts.homed - counts.commuters - counts.home_workers;
    let mut it = order.iter();
    for (role, k) in [
        (Role::Commuter, counts.commuters),
        (Role::HomeWorker, counts.home_workers),
        (Role::HomedOnly, homed_only),
        (Role::Nomad, counts.nomads),
    ] {
        for &i in it.by_ref().take(k) {
            roles[i] = role;
        }
    }

    let mut apps: Vec<BTreeMap<String, u32>> = vec![BTreeMap::new(); n];
    for (name, frac) in &cfg.app_profiles {
        let size = (frac * n as f64).round() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        for (k, &i) in order.iter().take(size).enumerate() {
            let count = if k == 0 { 101 } else { rng.gen_range(101..=250) };
            apps[i].insert(name.clone(), count);
        }
        // light users never cross the threshold
        for (k, &i) in order.iter().skip(size).take(size).enumerate() {
            let count = if k == 0 { 100 } else { rng.gen_range(1..=100) };
            apps[i].insert(name.clone(), count);
        }
    }

    let salt = format!("synth-{}", cfg.seed);
    let mut plans = Vec::with_capacity(n);
    for (i, (role, apps)) in roles.into_iter().zip(apps).enumerate() {
        let uid = hash_uid(&format!("user-{i:06}"), &salt).expect("non-empty id");
        let (mut district, mut home, mut work) = (None, None, None);
        if role.is_homed() {
            let di = rng.gen_range(0..layout.districts.len());
            let h = anchor_cell(cfg, layout, &layout.districts[di], None, rng)?;
            district = Some(di);
            home = Some(h);
            work = match role {
                Role::Commuter => {
                    let wd = &layout.districts[rng.gen_range(0..layout.districts.len())];
                    Some(anchor_cell(cfg, layout, wd, Some(h), rng)?)
                }
                Role::HomeWorker => Some(h),
                _ => None,
            };
        }
        plans.push(UserPlan {
            index: i,
            uid,
            role,
            district,
            home,
            work,
            apps,
        });
    }
    Ok(plans)
}

enum Place {
    At(GeoPoint),
    Visit(usize),
}

struct Track<'a> {
    cfg: &'a SynthConfig,
    uid: UidHash,
    step: i64,
    records: Vec<ObservationRecord>,
}

impl Track<'_> {
    fn fix(&mut self, rng: &mut ChaCha8Rng, t: i64, p: GeoPoint) {
        let q = disc_offset(rng, p, self.cfg.gps_jitter_m);
        self.records.push(ObservationRecord {
            uid: self.uid.clone(),
            ts: TimeStamp::seconds(t),
            pos: GeoPoint {
                lat: round_to(q.lat, 4),
                lon: round_to(q.lon, 4),
            },
        });
    }

    /// Fixes at `from`, every step after it, and `to`.
    fn stay(&mut self, rng: &mut ChaCha8Rng, from: i64, to: i64, p: GeoPoint, step: i64) {
        let mut t = from;
        while t < to {
            self.fix(rng, t, p);
            t += step;
        }
        self.fix(rng, to, p);
    }
}

fn anchor_point(cfg: &SynthConfig, cell: GridCell) -> GeoPoint {
    if cfg.boundary_stress {
        cell.corner()
    } else {
        cell.center()
    }
}

fn errand_point(
    cfg: &SynthConfig,
    layout: &Layout,
    avoid: &[GridCell],
    rng: &mut ChaCha8Rng,
) -> GeoPoint {
    loop {
        let p = layout.random_point(cfg, rng);
        if layout.clear_of_pois(p) && avoid.iter().all(|c| haversine_km(c.center(), p) >= ERRAND_CLEARANCE_KM) {
            return p;
        }
    }
}

struct UserOutput {
    location: Vec<ObservationRecord>,
    app: Vec<AppObservation>,
    truth: UserTruth,
}

fn generate_user(cfg: &SynthConfig, layout: &Layout, plan: &UserPlan) -> UserOutput {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(plan.index as u64 + 1);
    let defaults = PipelineConfig::default();
    let step = (3600.0 / cfg.obs_rate_active).round() as i64;
    let mut track = Track {
        cfg,
        uid: plan.uid.clone(),
        step,
        records: Vec::new(),
    };
    let district = plan.district.map(|i| &layout.districts[i]);
    let label = district.map_or("unassigned", |d| label_for(d, &defaults));
    let slot = cohort_slot(label);
    let hours = work_hours_for(label);
    let mut visits = Vec::new();
    let anchors: Vec<GridCell> = plan.home.into_iter().chain(plan.work).collect();

    let n_places = (cfg.span_days as usize / 10 + 1).max(8);
    let nomad_places: Vec<GeoPoint> = if plan.role == Role::Nomad {
        (0..n_places).map(|_| errand_point(cfg, layout, &[], &mut rng)).collect()
    } else {
        Vec::new()
    };
    let malls: Vec<usize> = (0..layout.pois.len()).filter(|&i| layout.pois[i].category == PoiCategory::Mall).collect();
    let foods: Vec<usize> = (0..layout.pois.len()).filter(|&i| layout.pois[i].category == PoiCategory::Fastfood).collect();

    for d in 0..cfg.span_days as i64 {
        let t0 = SYNTH_START + d * SECS_PER_DAY;
        let weekend = d.rem_euclid(7) >= 5;
        let mut segs: Vec<(i64, i64, Place)> = Vec::new();
        match plan.role {
            Role::Nomad => {
                let prev = nomad_places[(d as usize + n_places - 1) % n_places];
                let here = nomad_places[d as usize % n_places];
                segs.push((0, 8 * HOUR, Place::At(prev)));
                if weekend {
                    segs.push((8 * HOUR + 30 * MIN, DAY_END, Place::At(here)));
                } else {
                    let errand = errand_point(cfg, layout, &[], &mut rng);
                    segs.push((8 * HOUR + 30 * MIN, 17 * HOUR, Place::At(errand)));
                    segs.push((17 * HOUR + 30 * MIN, DAY_END, Place::At(here)));
                }
            }
            Role::Sparse => {
                // seen every third day, twenty days at most
                if d % 3 != 0 || d / 3 >= 20 {
                    continue;
                }
                let p = errand_point(cfg, layout, &[], &mut rng);
                segs.push((0, DAY_END, Place::At(p)));
            }
            Role::Commuter | Role::HomeWorker | Role::HomedOnly => {
                let home = anchor_point(cfg, plan.home.expect("homed users have a home"));
                let mut day_visits: Vec<(i64, usize, i64)> = Vec::new();
                let (mall_at, food_at) = if weekend { (11 * HOUR, 14 * HOUR) } else { (18 * HOUR + 30 * MIN, 20 * HOUR + 15 * MIN) };
                if !malls.is_empty() && rng.gen::<f64>() < cfg.mall_rate[slot] / 7.0 {
                    let poi = malls[rng.gen_range(0..malls.len())];
                    day_visits.push((mall_at, poi, rng.gen_range(37 * MIN..=97 * MIN)));
                }
                if !foods.is_empty() && rng.gen::<f64>() < cfg.fastfood_rate[slot] / 7.0 {
                    let poi = foods[rng.gen_range(0..foods.len())];
                    day_visits.push((food_at, poi, rng.gen_range(12 * MIN..=36 * MIN)));
                }
                let evening_from = match (plan.role, weekend) {
                    (_, true) | (Role::HomeWorker, false) => 0,
                    (Role::Commuter, false) => {
                        let work = anchor_point(cfg, plan.work.expect("commuters have work"));
                        let end = 8 * HOUR + 30 * MIN + hours * HOUR;
                        segs.push((0, 8 * HOUR, Place::At(home)));
                        segs.push((8 * HOUR + 30 * MIN, 12 * HOUR, Place::At(work)));
                        segs.push((12 * HOUR + 25 * MIN, end, Place::At(work)));
                        end + 30 * MIN
                    }
                    (_, false) => {
                        let errand = errand_point(cfg, layout, &anchors, &mut rng);
                        segs.push((0, 8 * HOUR, Place::At(home)));
                        segs.push((8 * HOUR + 30 * MIN, 17 * HOUR, Place::At(errand)));
                        17 * HOUR + 30 * MIN
                    }
                };
                let mut cursor = evening_from;
                for (start, poi, dur) in day_visits {
                    if start - 15 * MIN > cursor {
                        segs.push((cursor, start - 15 * MIN, Place::At(home)));
                    }
                    segs.push((start, start + dur, Place::Visit(poi)));
                    cursor = start + dur + 15 * MIN;
                }
                segs.push((cursor, DAY_END, Place::At(home)));
            }
        }
        for (from, to, place) in segs {
            match place {
                Place::At(p) => track.stay(&mut rng, t0 + from, t0 + to, p, track.step),
                Place::Visit(i) => {
                    let poi = &layout.pois[i];
                    let spot = disc_offset(&mut rng, poi.center, 0.4 * poi.radius_m);
                    track.stay(&mut rng, t0 + from, t0 + to, spot, VISIT_STEP);
                    visits.push(VisitTruth {
                        poi_id: poi.poi_id.clone(),
                        category: poi.category.as_str().to_string(),
                        start: t0 + from,
                        end: t0 + to,
                    });
                }
            }
        }
    }

    let app = app_records(cfg, layout, plan, &mut rng);
    let communities = plan
        .apps
        .iter()
        .filter(|(_, &n)| n > 100)
        .map(|(a, _)| a.clone())
        .collect();
    let is_commuter = plan.role == Role::Commuter;
    UserOutput {
        location: track.records,
        app,
        truth: UserTruth {
            uid: plan.uid.to_string(),
            index: plan.index,
            role: plan.role,
            home: plan.home.map(|c| [c.lat_index, c.lon_index]),
            work: plan.work.map(|c| [c.lat_index, c.lon_index]),
            district_id: district.map(|d| d.id.clone()),
            cohort: label.to_string(),
            is_commuter,
            work_hours: is_commuter.then_some(hours as f64),
            communities,
            app_invocations: plan.apps.clone(),
            visits,
        },
    }
}

fn app_records(cfg: &SynthConfig, layout: &Layout, plan: &UserPlan, rng: &mut ChaCha8Rng) -> Vec<AppObservation> {
    let hours = cfg.span_days as i64 * 24;
    let mut out = Vec::new();
    if hours == 0 {
        return out;
    }
    let home = plan.home.map(|c| c.center());
    let jobs = std::iter::repeat_n(None, cfg.conn_records_per_user as usize)
        .chain(plan.apps.iter().flat_map(|(a, &n)| std::iter::repeat_n(Some(a.clone()), n as usize)));
    for app_id in jobs {
        let ts = TimeStamp::hour(SYNTH_START + rng.gen_range(0..hours) * HOUR).expect("whole hour");
        let cellular = !layout.towers.is_empty() && rng.gen::<f64>() < 0.75;
        let (pos, conn_type, operator, cell_id, tech) = if cellular {
            let t = &layout.towers[rng.gen_range(0..layout.towers.len())];
            let p = uniform_in_disc(rng, t.center, t.truth.radius_km);
            (p, ConnType::Cellular, t.truth.operator.clone(), Some(t.truth.cell_id.clone()), t.tech)
        } else {
            let base = home.unwrap_or_else(|| layout.random_point(cfg, rng));
            (disc_offset(rng, base, 200.0), ConnType::Wifi, String::new(), None, Tech::Other)
        };
        out.push(AppObservation {
            uid: plan.uid.clone(),
            ts,
            pos: GeoPoint {
                lat: round_to(pos.lat, 5),
                lon: round_to(pos.lon, 5),
            },
            app_id,
            conn_type,
            operator,
            cell_id,
            tech,
            bytes_up: rng.gen_range(0..200_000),
            bytes_down: rng.gen_range(0..2_000_000),
        });
    }
    out.sort_by_key(|r| r.ts.epoch_seconds);
    out
}

/// Build the whole city. Users are generated in parallel, each from its own
/// stream, and emitted in uid order.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layout = build_layout(cfg, &mut rng)?;
    let census = census_of(cfg, &layout)?;
    let mut plans = plan_users(cfg, &layout, &mut rng)?;
    plans.sort_by(|a, b| a.uid.cmp(&b.uid));

    let users: Vec<UserOutput> = plans.par_iter().map(|p| generate_user(cfg, &layout, p)).collect();

    let mut communities: BTreeMap<String, usize> = cfg.app_profiles.iter().map(|(a, _)| (a.clone(), 0)).collect();
    let mut location = Vec::new();
    let mut app = Vec::new();
    let mut truths = Vec::with_capacity(users.len());
    for u in users {
        for c in &u.truth.communities {
            *communities.entry(c.clone()).or_default() += 1;
        }
        location.extend(u.location);
        app.extend(u.app);
        truths.push(u.truth);
    }
    Ok(SynthOutput {
        location,
        app,
        census,
        pois: layout.pois.clone(),
        truth: GroundTruth {
            seed: cfg.seed,
            start_epoch: SYNTH_START,
            span_days: cfg.span_days,
            anchor_resolution: SYNTH_RESOLUTION,
            users: truths,
            towers: layout.towers.iter().map(|t| t.truth.clone()).collect(),
            communities,
        },
    })
}

/// The pipeline config matching a synthetic city: defaults, with the
/// planted apps listed for the community report.
pub fn pipeline_config_for(cfg: &SynthConfig) -> PipelineConfig {
    PipelineConfig {
        report_apps: cfg.app_profiles.iter().map(|(a, _)| a.clone()).collect(),
        ..PipelineConfig::default()
    }
}

pub const LOCATION_FILE: &str = "location.csv";
pub const APP_FILE: &str = "app.csv";
pub const CENSUS_FILE: &str = "census.csv";
pub const POI_FILE: &str = "pois.csv";
pub const TRUTH_FILE: &str = "truth.json";
pub const PIPELINE_CONF_FILE: &str = "pipeline.conf";

fn write_lines<T>(path: &Path, header: &str, rows: &[T], line: impl Fn(&T) -> String) -> Result<(), SynthError> {
    let f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(f);
    let mut buf = String::with_capacity(1 << 16);
    buf.push_str(header);
    buf.push('\n');
    for r in rows {
        buf.push_str(&line(r));
        buf.push('\n');
        if buf.len() > 1 << 16 {
            w.write_all(buf.as_bytes()).map_err(|e| io_err(path, e))?;
            buf.clear();
        }
    }
    w.write_all(buf.as_bytes()).map_err(|e| io_err(path, e))?;
    w.flush().map_err(|e| io_err(path, e))
}

/// Write all six output files into `dir`.
pub fn write_outputs(dir: &Path, cfg: &SynthConfig, out: &SynthOutput) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    write_lines(&dir.join(LOCATION_FILE), LOCATION_HEADER, &out.location, format_location_record)?;
    write_lines(&dir.join(APP_FILE), APP_HEADER, &out.app, format_app_record)?;

    let census_path = dir.join(CENSUS_FILE);
    let f = fs::File::create(&census_path).map_err(|e| io_err(&census_path, e))?;
    write_census(BufWriter::new(f), &out.census)?;
    let poi_path = dir.join(POI_FILE);
    let f = fs::File::create(&poi_path).map_err(|e| io_err(&poi_path, e))?;
    write_pois(BufWriter::new(f), &out.pois)?;

    let truth_path = dir.join(TRUTH_FILE);
    let mut json = serde_json::to_string_pretty(&out.truth)?;
    json.push('\n');
    fs::write(&truth_path, json).map_err(|e| io_err(&truth_path, e))?;

    let mut conf = String::new();
    let _ = writeln!(conf, "# analysis settings for synthetic city seed {}", cfg.seed);
    conf.push_str(&pipeline_config_for(cfg).to_kv_string());
    let conf_path = dir.join(PIPELINE_CONF_FILE);
    fs::write(&conf_path, conf).map_err(|e| io_err(&conf_path, e))
}

pub fn read_truth(path: &Path) -> Result<GroundTruth, SynthError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// The cell a planted anchor point falls in, for boundary-stress checks.
pub fn planted_cell(p: GeoPoint) -> GridCell {
    quantize(p, SYNTH_RESOLUTION).expect("planted points are valid")
}

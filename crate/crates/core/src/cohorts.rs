//! Census districts, point-in-polygon lookup of home cells, and income
//! cohorts.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use thiserror::Error;

use crate::anchors::UserAnchors;
use crate::ingest::UidHash;
use crate::model::{GeoPoint, PipelineConfig};

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("census row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("district {id}: {reason}")]
    BadPolygon { id: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DistrictKind {
    Town,
    Neighborhood,
    /// Could not be classified unambiguously; never eligible.
    Ambiguous,
}

impl DistrictKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistrictKind::Town => "town",
            DistrictKind::Neighborhood => "neighborhood",
            DistrictKind::Ambiguous => "ambiguous",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "town" => Some(DistrictKind::Town),
            "neighborhood" => Some(DistrictKind::Neighborhood),
            "ambiguous" => Some(DistrictKind::Ambiguous),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CensusDistrict {
    pub district_id: String,
    pub name: String,
    pub kind: DistrictKind,
    pub population: u64,
    pub median_income: u64,
    /// Closed ring: the first vertex is repeated at the end.
    pub boundary: Vec<GeoPoint>,
}

impl CensusDistrict {
    /// Validate and close the ring.
    pub fn new(
        district_id: impl Into<String>,
        name: impl Into<String>,
        kind: DistrictKind,
        population: u64,
        median_income: u64,
        mut boundary: Vec<GeoPoint>,
    ) -> Result<Self, CohortError> {
        let district_id = district_id.into();
        let bad = |reason: &str| CohortError::BadPolygon {
            id: district_id.clone(),
            reason: reason.to_string(),
        };
        if boundary.iter().any(|p| !p.lat.is_finite() || !p.lon.is_finite()) {
            return Err(bad("non-finite vertex"));
        }
        if boundary.first() != boundary.last() || boundary.len() == 1 {
            if let Some(&f) = boundary.first() {
                boundary.push(f);
            }
        }
        if boundary.len() < 4 {
            return Err(bad("needs at least 3 vertices"));
        }
        if shoelace_area(&boundary) <= 0.0 {
            return Err(bad("zero area"));
        }
        if self_intersects(&boundary) {
            return Err(bad("self-intersecting"));
        }
        Ok(CensusDistrict {
            district_id,
            name: name.into(),
            kind,
            population,
            median_income,
            boundary,
        })
    }

    pub fn area(&self) -> f64 {
        shoelace_area(&self.boundary)
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        point_in_polygon(p, &self.boundary)
    }
}

/// Absolute polygon area (square degrees) of a closed ring.
pub fn shoelace_area(ring: &[GeoPoint]) -> f64 {
    let twice: f64 = ring
        .windows(2)
        .map(|w| w[0].lon * w[1].lat - w[1].lon * w[0].lat)
        .sum();
    twice.abs() / 2.0
}

/// Crossing-number test with a ray cast toward +lon. Points exactly on an
/// edge get whatever the parity says.
pub fn point_in_polygon(p: GeoPoint, ring: &[GeoPoint]) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let x = a.lon + (p.lat - a.lat) * (b.lon - a.lon) / (b.lat - a.lat);
            if p.lon < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn orient(a: GeoPoint, b: GeoPoint, c: GeoPoint) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: GeoPoint, b: GeoPoint, p: GeoPoint) -> bool {
    p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
}

fn segments_intersect(a: GeoPoint, b: GeoPoint, c: GeoPoint, d: GeoPoint) -> bool {
    let (o1, o2, o3, o4) = (orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b));
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0)) && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0)) {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn self_intersects(ring: &[GeoPoint]) -> bool {
    let n = ring.len() - 1;
    for i in 0..n {
        for j in i + 1..n {
            // neighbours share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_intersect(ring[i], ring[i + 1], ring[j], ring[j + 1]) {
                return true;
            }
        }
    }
    false
}

/// Parse the inline `lon lat;lon lat;...` polygon encoding.
pub fn parse_polygon(text: &str) -> Option<Vec<GeoPoint>> {
    text.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let mut it = pair.split_whitespace();
            let lon: f64 = it.next()?.parse().ok()?;
            let lat: f64 = it.next()?.parse().ok()?;
            it.next().is_none().then_some(GeoPoint { lat, lon })
        })
        .collect()
}

pub fn format_polygon(ring: &[GeoPoint]) -> String {
    ring.iter()
        .map(|p| format!("{} {}", p.lon, p.lat))
        .collect::<Vec<_>>()
        .join(";")
}

pub const CENSUS_HEADER: [&str; 6] = ["district_id", "name", "kind", "population", "median_income", "polygon"];

/// Load and validate a census table. Any invalid row fails the load.
pub fn load_census<R: Read>(reader: R) -> Result<Vec<CensusDistrict>, CohortError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let bad = |reason: &str| CohortError::BadRow {
            row,
            reason: reason.to_string(),
        };
        if rec.len() != CENSUS_HEADER.len() {
            return Err(bad("wrong column count"));
        }
        let kind = DistrictKind::parse(&rec[2]).ok_or_else(|| bad("unknown kind"))?;
        let population: u64 = rec[3].trim().parse().map_err(|_| bad("bad population"))?;
        let median_income: u64 = rec[4].trim().parse().map_err(|_| bad("bad median_income"))?;
        let ring = parse_polygon(&rec[5]).ok_or_else(|| bad("bad polygon"))?;
        out.push(CensusDistrict::new(&rec[0], &rec[1], kind, population, median_income, ring)?);
    }
    Ok(out)
}

pub fn write_census<W: Write>(writer: W, districts: &[CensusDistrict]) -> Result<(), CohortError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CENSUS_HEADER)?;
    for d in districts {
        w.write_record([
            d.district_id.as_str(),
            d.name.as_str(),
            d.kind.as_str(),
            &d.population.to_string(),
            &d.median_income.to_string(),
            &format_polygon(&d.boundary),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// A district can receive users if it is unambiguous and populous enough.
pub fn is_eligible(d: &CensusDistrict, cfg: &PipelineConfig) -> bool {
    d.kind != DistrictKind::Ambiguous && d.population >= cfg.district_population_min
}

pub fn filter_districts(districts: &[CensusDistrict], cfg: &PipelineConfig) -> Vec<CensusDistrict> {
    districts.iter().filter(|d| is_eligible(d, cfg)).cloned().collect()
}

/// Immutable lookup structure over all loaded districts.
#[derive(Debug, Clone)]
pub struct DistrictIndex {
    districts: Vec<CensusDistrict>,
    // (min_lat, max_lat, min_lon, max_lon)
    bboxes: Vec<(f64, f64, f64, f64)>,
    areas: Vec<f64>,
}

impl DistrictIndex {
    pub fn new(districts: Vec<CensusDistrict>) -> Self {
        let bboxes = districts
            .iter()
            .map(|d| {
                d.boundary.iter().fold(
                    (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
                    |(a, b, c, e), p| (a.min(p.lat), b.max(p.lat), c.min(p.lon), e.max(p.lon)),
                )
            })
            .collect();
        let areas = districts.iter().map(CensusDistrict::area).collect();
        DistrictIndex {
            districts,
            bboxes,
            areas,
        }
    }

    pub fn districts(&self) -> &[CensusDistrict] {
        &self.districts
    }

    /// The most specific (smallest-area) district containing `p`; ties go to
    /// the smaller district_id.
    pub fn locate(&self, p: GeoPoint) -> Option<&CensusDistrict> {
        let mut best: Option<usize> = None;
        for (i, d) in self.districts.iter().enumerate() {
            let (a, b, c, e) = self.bboxes[i];
            if p.lat < a || p.lat > b || p.lon < c || p.lon > e || !d.contains(p) {
                continue;
            }
            best = match best {
                Some(j)
                    if self.areas[j] < self.areas[i]
                        || (self.areas[j] == self.areas[i]
                            && self.districts[j].district_id <= d.district_id) =>
                {
                    Some(j)
                }
                _ => Some(i),
            };
        }
        best.map(|i| &self.districts[i])
    }
}

pub fn locate_district(p: GeoPoint, districts: &DistrictIndex) -> Option<String> {
    districts.locate(p).map(|d| d.district_id.clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CohortLabel {
    Poor,
    Middle,
    Rich,
    Unassigned,
}

impl CohortLabel {
    pub const ALL: [CohortLabel; 4] = [CohortLabel::Poor, CohortLabel::Middle, CohortLabel::Rich, CohortLabel::Unassigned];

    pub fn as_str(&self) -> &'static str {
        match self {
            CohortLabel::Poor => "poor",
            CohortLabel::Middle => "middle",
            CohortLabel::Rich => "rich",
            CohortLabel::Unassigned => "unassigned",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        CohortLabel::ALL.into_iter().find(|l| l.as_str() == s.trim())
    }

    /// Both income thresholds are strict.
    pub fn for_income(income: u64, cfg: &PipelineConfig) -> Self {
        if income < cfg.poor_income_max {
            CohortLabel::Poor
        } else if income > cfg.rich_income_min {
            CohortLabel::Rich
        } else {
            CohortLabel::Middle
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CohortAssignment {
    /// Eligible home district, if any.
    pub district_id: Option<String>,
    pub income: Option<u64>,
    pub label: CohortLabel,
}

/// Attach district, income and cohort to every user. Users without a home,
/// outside every district, or living in an ineligible district are
/// unassigned.
pub fn assign_cohorts(
    anchors: &[UserAnchors],
    districts: &DistrictIndex,
    cfg: &PipelineConfig,
) -> BTreeMap<UidHash, CohortAssignment> {
    anchors
        .iter()
        .map(|a| {
            let hit = a
                .home
                .and_then(|h| districts.locate(h.center()))
                .filter(|d| is_eligible(d, cfg));
            let assignment = match hit {
                Some(d) => CohortAssignment {
                    district_id: Some(d.district_id.clone()),
                    income: Some(d.median_income),
                    label: CohortLabel::for_income(d.median_income, cfg),
                },
                None => CohortAssignment {
                    district_id: None,
                    income: None,
                    label: CohortLabel::Unassigned,
                },
            };
            (a.uid.clone(), assignment)
        })
        .collect()
}

/// Percentage `100·count/denominator`; zero when the denominator is zero.
pub fn share_pct(count: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        100.0 * count as f64 / denominator as f64
    }
}

/// Users per label.
pub fn cohort_counts(assignments: &BTreeMap<UidHash, CohortAssignment>) -> BTreeMap<CohortLabel, u64> {
    let mut out: BTreeMap<CohortLabel, u64> = CohortLabel::ALL.iter().map(|l| (*l, 0)).collect();
    for a in assignments.values() {
        *out.entry(a.label).or_default() += 1;
    }
    out
}

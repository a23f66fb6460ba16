use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Mean Earth radius used for every great-circle distance in the crate.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// A WGS84-ish position in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validated constructor. Latitude must lie in [-90, 90] and longitude in
    /// [-180, 180).
    pub fn new(lat: f64, lon: f64) -> Result<Self, ModelError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(ModelError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(ModelError::LatOutOfRange(lat));
        }
        if !(-180.0..180.0).contains(&lon) {
            return Err(ModelError::LonOutOfRange(lon));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn is_valid(&self) -> bool {
        GeoPoint::new(self.lat, self.lon).is_ok()
    }

    /// Offset by metres north and east using a local flat-earth approximation.
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> GeoPoint {
        let dlat = north_m / 1000.0 / km_per_degree();
        let dlon = east_m / 1000.0 / (km_per_degree() * self.lat.to_radians().cos());
        GeoPoint {
            lat: self.lat + dlat,
            lon: self.lon + dlon,
        }
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.lat, self.lon)
    }
}

/// Length of one degree of arc on the reference sphere.
pub fn km_per_degree() -> f64 {
    EARTH_RADIUS_KM * std::f64::consts::PI / 180.0
}

/// Great-circle distance on a sphere of radius [`EARTH_RADIUS_KM`].
pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    // clamp guards asin against h drifting a hair above 1 for antipodes
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Component-wise arithmetic mean of the points.
///
/// This is a planar approximation that is accurate to well under a metre for
/// point sets spanning a few degrees, which is all the crate ever feeds it.
/// The mean is taken relative to the first point so that the large common
/// offset does not eat into the mantissa.
pub fn centroid(points: &[GeoPoint]) -> Result<GeoPoint, ModelError> {
    let first = *points.first().ok_or(ModelError::EmptyInput)?;
    let n = points.len() as f64;
    let (mut dlat, mut dlon) = (0.0, 0.0);
    for p in points {
        dlat += p.lat - first.lat;
        dlon += p.lon - first.lon;
    }
    Ok(GeoPoint {
        lat: first.lat + dlat / n,
        lon: first.lon + dlon / n,
    })
}

/// A square cell of a regular lat/lon grid.
///
/// The cell covers `[lat_index·res, (lat_index+1)·res) × [lon_index·res, (lon_index+1)·res)`.
/// Equality and hashing use the bit pattern of the resolution, so cells from
/// different grids never compare equal.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridCell {
    pub resolution: f64,
    pub lat_index: i64,
    pub lon_index: i64,
}

impl GridCell {
    pub fn new(resolution: f64, lat_index: i64, lon_index: i64) -> Self {
        GridCell {
            resolution,
            lat_index,
            lon_index,
        }
    }

    /// South-west corner of the cell.
    pub fn corner(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat_index as f64 * self.resolution,
            lon: self.lon_index as f64 * self.resolution,
        }
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.lat_index as f64 + 0.5) * self.resolution,
            lon: (self.lon_index as f64 + 0.5) * self.resolution,
        }
    }
}

impl PartialEq for GridCell {
    fn eq(&self, other: &Self) -> bool {
        self.resolution.to_bits() == other.resolution.to_bits()
            && self.lat_index == other.lat_index
            && self.lon_index == other.lon_index
    }
}

impl Eq for GridCell {}

impl Hash for GridCell {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.resolution.to_bits().hash(state);
        self.lat_index.hash(state);
        self.lon_index.hash(state);
    }
}

impl Ord for GridCell {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.lat_index, self.lon_index)
            .cmp(&(other.lat_index, other.lon_index))
            .then_with(|| self.resolution.total_cmp(&other.resolution))
    }
}

impl PartialOrd for GridCell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// floor(x), except that values within a few ulps of an integer snap to it.
///
/// `34.052 / 0.001` evaluates to `34051.99999999999`; without the snap, a
/// coordinate printed at the grid's own precision would land in the cell
/// below it.
fn snapped_floor(x: f64) -> i64 {
    let nearest = x.round();
    let tol = nearest.abs().max(1.0) * 1e-12;
    if (x - nearest).abs() <= tol {
        nearest as i64
    } else {
        x.floor() as i64
    }
}

/// Map a point to its grid cell, flooring toward negative infinity.
pub fn quantize(p: GeoPoint, resolution: f64) -> Result<GridCell, ModelError> {
    if !p.lat.is_finite() || !p.lon.is_finite() {
        return Err(ModelError::NonFinite);
    }
    if !(resolution.is_finite() && resolution > 0.0) {
        return Err(ModelError::BadResolution(resolution));
    }
    Ok(GridCell {
        resolution,
        lat_index: snapped_floor(p.lat / resolution),
        lon_index: snapped_floor(p.lon / resolution),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let c = quantize(pt(34.05217, -118.24368), 0.001).unwrap();
        assert_eq!((c.lat_index, c.lon_index), (34052, -118244));
        let c = quantize(pt(0.0, 0.0), 0.001).unwrap();
        assert_eq!((c.lat_index, c.lon_index), (0, 0));
        let c = quantize(pt(-0.0005, 0.0005), 0.001).unwrap();
        assert_eq!((c.lat_index, c.lon_index), (-1, 0));
    }

    #[test]
    fn quantize_decimal_inputs_on_cell_edges() {
        let c = quantize(pt(34.052, -118.244), 0.001).unwrap();
        assert_eq!((c.lat_index, c.lon_index), (34052, -118244));
        let c = quantize(pt(0.003, 0.0007), 0.0001).unwrap();
        assert_eq!((c.lat_index, c.lon_index), (30, 7));
    }

    #[test]
    fn quantize_rejects_bad_input() {
        let nan = GeoPoint {
            lat: f64::NAN,
            lon: 0.0,
        };
        assert_eq!(quantize(nan, 0.001), Err(ModelError::NonFinite));
        assert!(matches!(
            quantize(pt(1.0, 1.0), 0.0),
            Err(ModelError::BadResolution(_))
        ));
    }

    #[test]
    fn geopoint_ranges() {
        assert!(GeoPoint::new(90.0, -180.0).is_ok());
        assert!(GeoPoint::new(90.1, 0.0).is_err());
        assert!(GeoPoint::new(0.0, 180.0).is_err());
        assert!(GeoPoint::new(f64::INFINITY, 0.0).is_err());
    }

    #[test]
    fn haversine_examples() {
        let a = pt(12.5, 40.0);
        assert_eq!(haversine_km(a, a), 0.0);
        // one degree of arc on the equator: 6371·π/180
        let one_deg = 6371.0 * std::f64::consts::PI / 180.0;
        assert!((one_deg - 111.195).abs() < 0.001);
        assert!((haversine_km(pt(0.0, 0.0), pt(0.0, 1.0)) - one_deg).abs() < 1e-9);
        // antipodal: π·6371
        let half = std::f64::consts::PI * 6371.0;
        assert!((half - 20015.087).abs() < 0.001);
        let lon180 = GeoPoint { lat: 0.0, lon: 180.0 };
        assert!((haversine_km(pt(0.0, 0.0), lon180) - half).abs() < 1e-6);
    }

    #[test]
    fn centroid_examples() {
        assert_eq!(centroid(&[pt(1.0, 1.0)]).unwrap(), pt(1.0, 1.0));
        let sq = [pt(0.0, 0.0), pt(0.0, 2.0), pt(2.0, 0.0), pt(2.0, 2.0)];
        assert_eq!(centroid(&sq).unwrap(), pt(1.0, 1.0));
        assert_eq!(centroid(&[]), Err(ModelError::EmptyInput));
    }

    #[test]
    fn centroid_of_disc_sample_is_near_center() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let center = pt(34.0, -118.0);
        let pts: Vec<GeoPoint> = (0..1000)
            .map(|_| {
                let r = 2000.0 * rng.gen::<f64>().sqrt();
                let th = rng.gen::<f64>() * std::f64::consts::TAU;
                center.offset_m(r * th.sin(), r * th.cos())
            })
            .collect();
        // brute-force mean as the oracle
        let n = pts.len() as f64;
        let mean = pt(
            pts.iter().map(|p| p.lat).sum::<f64>() / n,
            pts.iter().map(|p| p.lon).sum::<f64>() / n,
        );
        let c = centroid(&pts).unwrap();
        assert!(haversine_km(c, mean) < 1e-6);
        assert!(haversine_km(c, center) < 0.05);
    }

    fn lat_strategy() -> impl Strategy<Value = f64> {
        -89.0f64..89.0
    }
    fn lon_strategy() -> impl Strategy<Value = f64> {
        -179.0f64..179.0
    }

    proptest! {
        #[test]
        fn corner_round_trip(li in -89_000i64..89_000, lo in -179_000i64..179_000,
                             res in prop::sample::select(vec![0.001, 0.0001, 0.0005, 0.01])) {
            let cell = GridCell::new(res, li, lo);
            let q = quantize(cell.corner(), res).unwrap();
            prop_assert_eq!(q, cell);
        }

        #[test]
        fn quantize_is_monotone(a in lat_strategy(), b in lat_strategy()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let ql = quantize(GeoPoint { lat: lo, lon: 0.0 }, 0.001).unwrap();
            let qh = quantize(GeoPoint { lat: hi, lon: 0.0 }, 0.001).unwrap();
            prop_assert!(ql.lat_index <= qh.lat_index);
        }

        #[test]
        fn haversine_metric(a1 in lat_strategy(), o1 in lon_strategy(),
                            a2 in lat_strategy(), o2 in lon_strategy(),
                            a3 in lat_strategy(), o3 in lon_strategy()) {
            let (a, b, c) = (pt(a1, o1), pt(a2, o2), pt(a3, o3));
            prop_assert_eq!(haversine_km(a, a), 0.0);
            prop_assert!((haversine_km(a, b) - haversine_km(b, a)).abs() < 1e-9);
            prop_assert!(haversine_km(a, b) >= 0.0);
            prop_assert!(haversine_km(a, c) <= haversine_km(a, b) + haversine_km(b, c) + 1e-9);
        }

        #[test]
        fn centroid_in_bbox_and_translates(
            pts in prop::collection::vec((30.0f64..35.0, -120.0f64..-115.0), 1..50),
            delta in -1.0f64..1.0,
        ) {
            let pts: Vec<GeoPoint> = pts.into_iter().map(|(a, o)| pt(a, o)).collect();
            let c = centroid(&pts).unwrap();
            let min_lat = pts.iter().map(|p| p.lat).fold(f64::INFINITY, f64::min);
            let max_lat = pts.iter().map(|p| p.lat).fold(f64::NEG_INFINITY, f64::max);
            let min_lon = pts.iter().map(|p| p.lon).fold(f64::INFINITY, f64::min);
            let max_lon = pts.iter().map(|p| p.lon).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(c.lat >= min_lat - 1e-12 && c.lat <= max_lat + 1e-12);
            prop_assert!(c.lon >= min_lon - 1e-12 && c.lon <= max_lon + 1e-12);
            let moved: Vec<GeoPoint> = pts.iter().map(|p| pt(p.lat + delta, p.lon + delta)).collect();
            let cm = centroid(&moved).unwrap();
            prop_assert!((cm.lat - (c.lat + delta)).abs() < 1e-9);
            prop_assert!((cm.lon - (c.lon + delta)).abs() < 1e-9);
        }
    }
}

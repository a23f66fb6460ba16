//! Visits to curated places, app-usage communities, and the per-member and
//! per-weekday statistics derived from them.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::ingest::{AppObservation, ObservationRecord, UidHash};
use crate::model::{
    haversine_km, km_per_degree, weekday_of_day, GeoPoint, PipelineConfig, PoiCategory, TimeStamp, VisitBounds,
};

#[derive(Debug, Error)]
pub enum PoiError {
    #[error("poi {id}: radius {radius} m outside (0, 2000]")]
    BadRadius { id: String, radius: f64 },
    #[error("poi row {row}: {reason}")]
    BadRow { row: usize, reason: String },
    #[error("study span must be positive, got {0} weeks")]
    ZeroSpan(f64),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Poi {
    pub poi_id: String,
    pub category: PoiCategory,
    pub center: GeoPoint,
    pub radius_m: f64,
}

impl Poi {
    pub fn new(poi_id: impl Into<String>, category: PoiCategory, center: GeoPoint, radius_m: f64) -> Result<Self, PoiError> {
        let poi_id = poi_id.into();
        if !(radius_m > 0.0 && radius_m <= 2000.0) {
            return Err(PoiError::BadRadius { id: poi_id, radius: radius_m });
        }
        Ok(Poi {
            poi_id,
            category,
            center,
            radius_m,
        })
    }
}

pub const POI_HEADER: [&str; 5] = ["poi_id", "category", "lat", "lon", "radius_m"];

pub fn load_pois<R: Read>(reader: R) -> Result<Vec<Poi>, PoiError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |reason: &str| PoiError::BadRow {
            row: i + 2,
            reason: reason.to_string(),
        };
        if rec.len() != POI_HEADER.len() {
            return Err(bad("wrong column count"));
        }
        let category = PoiCategory::parse(&rec[1]).ok_or_else(|| bad("unknown category"))?;
        let lat: f64 = rec[2].trim().parse().map_err(|_| bad("bad lat"))?;
        let lon: f64 = rec[3].trim().parse().map_err(|_| bad("bad lon"))?;
        let center = GeoPoint::new(lat, lon).map_err(|e| bad(&e.to_string()))?;
        let radius: f64 = rec[4].trim().parse().map_err(|_| bad("bad radius_m"))?;
        out.push(Poi::new(&rec[0], category, center, radius)?);
    }
    Ok(out)
}

pub fn write_pois<W: Write>(writer: W, pois: &[Poi]) -> Result<(), PoiError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(POI_HEADER)?;
    for p in pois {
        w.write_record([
            p.poi_id.clone(),
            p.category.as_str().to_string(),
            p.center.lat.to_string(),
            p.center.lon.to_string(),
            p.radius_m.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Bucketed lookup of the POI whose radius covers a point.
#[derive(Debug, Clone)]
pub struct PoiIndex {
    pois: Vec<Poi>,
    buckets: HashMap<(i64, i64), Vec<usize>>,
    bucket_deg: f64,
    max_radius_km: f64,
}

impl PoiIndex {
    pub fn new(pois: Vec<Poi>) -> Self {
        let bucket_deg = 0.02;
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in pois.iter().enumerate() {
            let key = (
                (p.center.lat / bucket_deg).floor() as i64,
                (p.center.lon / bucket_deg).floor() as i64,
            );
            buckets.entry(key).or_default().push(i);
        }
        let max_radius_km = pois.iter().map(|p| p.radius_m / 1000.0).fold(0.0, f64::max);
        PoiIndex {
            pois,
            buckets,
            bucket_deg,
            max_radius_km,
        }
    }

    pub fn pois(&self) -> &[Poi] {
        &self.pois
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    /// Index of the POI covering `p`; the nearest center wins when radii
    /// overlap, then the smaller poi_id.
    pub fn covering(&self, p: GeoPoint) -> Option<usize> {
        if self.pois.is_empty() {
            return None;
        }
        let dlat = self.max_radius_km / km_per_degree();
        let dlon = self.max_radius_km / (km_per_degree() * p.lat.to_radians().cos().max(0.01));
        let b = self.bucket_deg;
        let (la0, la1) = (((p.lat - dlat) / b).floor() as i64, ((p.lat + dlat) / b).floor() as i64);
        let (lo0, lo1) = (((p.lon - dlon) / b).floor() as i64, ((p.lon + dlon) / b).floor() as i64);
        let mut best: Option<(f64, usize)> = None;
        for la in la0..=la1 {
            for lo in lo0..=lo1 {
                let Some(ids) = self.buckets.get(&(la, lo)) else { continue };
                for &i in ids {
                    let poi = &self.pois[i];
                    let d = haversine_km(p, poi.center);
                    if d * 1000.0 > poi.radius_m {
                        continue;
                    }
                    let better = match best {
                        None => true,
                        Some((bd, bi)) => d < bd || (d == bd && poi.poi_id < self.pois[bi].poi_id),
                    };
                    if better {
                        best = Some((d, i));
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    pub uid: UidHash,
    pub poi_id: String,
    pub category: PoiCategory,
    pub start: TimeStamp,
    pub end: TimeStamp,
    pub duration_min: f64,
}

/// Maximal runs of one user's observations inside one POI's radius, with
/// consecutive observations at most `gap_max_secs` apart. A run becomes a
/// visit only if its duration falls inside the category's bounds; runs that
/// are too long are dropped, not clipped. POIs whose category has no bounds
/// never produce visits.
pub fn detect_visits(
    records: &[ObservationRecord],
    pois: &PoiIndex,
    bounds: &VisitBounds,
    gap_max_secs: i64,
) -> Vec<Visit> {
    struct Run {
        poi: usize,
        start: TimeStamp,
        end: TimeStamp,
    }
    let mut out = Vec::new();
    let Some(first) = records.first() else {
        return out;
    };
    let close = |run: Run, out: &mut Vec<Visit>| {
        let poi = &pois.pois[run.poi];
        let Some((lo, hi)) = bounds.get(poi.category) else { return };
        let secs = run.end.epoch_seconds - run.start.epoch_seconds;
        if secs >= lo as i64 * 60 && secs <= hi as i64 * 60 {
            out.push(Visit {
                uid: first.uid.clone(),
                poi_id: poi.poi_id.clone(),
                category: poi.category,
                start: run.start,
                end: run.end,
                duration_min: secs as f64 / 60.0,
            });
        }
    };
    let mut current: Option<Run> = None;
    for r in records {
        let hit = pois.covering(r.pos);
        if let (Some(run), Some(j)) = (current.as_mut(), hit) {
            if run.poi == j && r.ts.epoch_seconds - run.end.epoch_seconds <= gap_max_secs {
                run.end = r.ts;
                continue;
            }
        }
        if let Some(run) = current.take() {
            close(run, &mut out);
        }
        current = hit.map(|poi| Run {
            poi,
            start: r.ts,
            end: r.ts,
        });
    }
    if let Some(run) = current.take() {
        close(run, &mut out);
    }
    out
}

/// Users with strictly more than `min_invocations` records of one app.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppCommunity {
    pub app_id: String,
    pub members: BTreeSet<UidHash>,
    pub min_invocations: u32,
}

/// Records per (app, user). Each record counts as one invocation.
pub fn invocation_counts(records: &[AppObservation]) -> BTreeMap<String, BTreeMap<UidHash, u64>> {
    let partial = records
        .par_chunks(64 * 1024)
        .map(|chunk| {
            let mut m: HashMap<(&str, &UidHash), u64> = HashMap::new();
            for r in chunk {
                if let Some(app) = r.app_id.as_deref() {
                    *m.entry((app, &r.uid)).or_default() += 1;
                }
            }
            m
        })
        .collect::<Vec<_>>();
    let mut out: BTreeMap<String, BTreeMap<UidHash, u64>> = BTreeMap::new();
    for m in partial {
        for ((app, uid), n) in m {
            *out.entry(app.to_string()).or_default().entry(uid.clone()).or_default() += n;
        }
    }
    out
}

pub fn community_from_counts(app_id: &str, counts: Option<&BTreeMap<UidHash, u64>>, min_invocations: u32) -> AppCommunity {
    let members = counts
        .into_iter()
        .flatten()
        .filter(|(_, &n)| n > min_invocations as u64)
        .map(|(u, _)| u.clone())
        .collect();
    AppCommunity {
        app_id: app_id.to_string(),
        members,
        min_invocations,
    }
}

/// An unknown app yields an empty community.
pub fn extract_app_community(records: &[AppObservation], app_id: &str, min_invocations: u32) -> AppCommunity {
    let counts = invocation_counts(records);
    community_from_counts(app_id, counts.get(app_id), min_invocations)
}

/// Community members who made at least one visit, optionally of one category.
pub fn community_visitors(community: &AppCommunity, visits: &[Visit], category: Option<PoiCategory>) -> BTreeSet<UidHash> {
    visits
        .iter()
        .filter(|v| category.is_none_or(|c| v.category == c))
        .filter(|v| community.members.contains(&v.uid))
        .map(|v| v.uid.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSummary {
    /// Visits per week for every member, zero-visit members included.
    pub rates: Vec<(UidHash, f64)>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Per-member visits per week over a span of `span_weeks`.
pub fn community_visit_rates(community: &AppCommunity, visits: &[Visit], span_weeks: f64) -> Result<RateSummary, PoiError> {
    if !(span_weeks.is_finite() && span_weeks > 0.0) {
        return Err(PoiError::ZeroSpan(span_weeks));
    }
    let mut counts: BTreeMap<&UidHash, u64> = community.members.iter().map(|u| (u, 0)).collect();
    for v in visits {
        if let Some(c) = counts.get_mut(&v.uid) {
            *c += 1;
        }
    }
    let rates: Vec<(UidHash, f64)> = counts
        .into_iter()
        .map(|(u, c)| (u.clone(), c as f64 / span_weeks))
        .collect();
    let values: Vec<f64> = rates.iter().map(|(_, r)| *r).collect();
    let mean = (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64);
    Ok(RateSummary {
        median: median(&values),
        rates,
        mean,
    })
}

/// Span of the data in weeks: the inclusive range of local days with any
/// observation, divided by seven. Zero for empty input.
pub fn study_span_weeks(epochs: impl IntoIterator<Item = i64>, cfg: &PipelineConfig) -> f64 {
    let (mut lo, mut hi) = (i64::MAX, i64::MIN);
    for t in epochs {
        let d = cfg.local_day(t);
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if lo > hi {
        0.0
    } else {
        (hi - lo + 1) as f64 / 7.0
    }
}

/// Percentage of all users seen on each weekday (Mon..Sun) at least once.
pub fn weekday_histogram(records: &[ObservationRecord], cfg: &PipelineConfig) -> [f64; 7] {
    let mut seen: HashMap<&UidHash, [bool; 7]> = HashMap::new();
    for r in records {
        let wd = weekday_of_day(cfg.local_day(r.ts.epoch_seconds));
        seen.entry(&r.uid).or_insert([false; 7])[wd] = true;
    }
    let n = seen.len();
    let mut out = [0.0; 7];
    if n == 0 {
        return out;
    }
    for (wd, slot) in out.iter_mut().enumerate() {
        let active = seen.values().filter(|days| days[wd]).count();
        *slot = 100.0 * active as f64 / n as f64;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ConnType, Tech};
    use proptest::prelude::*;

    const T0: i64 = 1_425_254_400; // Monday 2015-03-02 UTC
    const MIN: i64 = 60;

    fn uid(s: &str) -> UidHash {
        UidHash::from_digest(s).unwrap()
    }

    fn mall() -> Poi {
        Poi::new("mall1", PoiCategory::Mall, GeoPoint { lat: 34.05, lon: -118.25 }, 200.0).unwrap()
    }

    fn at(u: &str, t: i64, p: GeoPoint) -> ObservationRecord {
        ObservationRecord {
            uid: uid(u),
            ts: TimeStamp::seconds(t),
            pos: p,
        }
    }

    /// Pings every 5 minutes over [from, from+minutes], endpoints included.
    fn stay(u: &str, from: i64, minutes: i64, p: GeoPoint) -> Vec<ObservationRecord> {
        let mut v: Vec<ObservationRecord> = (0..=minutes / 5).map(|i| at(u, from + i * 5 * MIN, p)).collect();
        if minutes % 5 != 0 {
            v.push(at(u, from + minutes * MIN, p));
        }
        v
    }

    fn detect(recs: &[ObservationRecord], pois: Vec<Poi>) -> Vec<Visit> {
        detect_visits(recs, &PoiIndex::new(pois), &VisitBounds::default(), 30 * MIN)
    }

    #[test]
    fn forty_minutes_near_a_mall() {
        let near = mall().center.offset_m(50.0, 0.0);
        let v = detect(&stay("aa", T0, 40, near), vec![mall()]);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].duration_min, 40.0);
        assert_eq!(v[0].poi_id, "mall1");
    }

    #[test]
    fn dwell_bounds_are_exact() {
        let c = mall().center;
        assert!(detect(&stay("aa", T0, 9, c), vec![mall()]).is_empty());
        assert_eq!(detect(&stay("aa", T0, 10, c), vec![mall()]).len(), 1);
        assert_eq!(detect(&stay("aa", T0, 360, c), vec![mall()]).len(), 1);
        assert!(detect(&stay("aa", T0, 361, c), vec![mall()]).is_empty());
        assert!(detect(&stay("aa", T0, 420, c), vec![mall()]).is_empty());
    }

    #[test]
    fn outside_radius_and_gaps_split() {
        let far = mall().center.offset_m(250.0, 0.0);
        assert!(detect(&stay("aa", T0, 60, far), vec![mall()]).is_empty());
        let c = mall().center;
        let mut recs = stay("aa", T0, 20, c);
        // 40 minutes of silence, then another 20 minutes
        recs.extend(stay("aa", T0 + 60 * MIN, 20, c));
        let v = detect(&recs, vec![mall()]);
        assert_eq!(v.len(), 2);
        assert!(v[0].end <= v[1].start);
    }

    #[test]
    fn unbounded_category_never_visits() {
        let other = Poi::new("park", PoiCategory::Other, GeoPoint { lat: 34.0, lon: -118.0 }, 300.0).unwrap();
        assert!(detect(&stay("aa", T0, 60, other.center), vec![other]).is_empty());
    }

    #[test]
    fn overlapping_pois_pick_nearest() {
        let a = Poi::new("a", PoiCategory::Fastfood, GeoPoint { lat: 34.0, lon: -118.0 }, 500.0).unwrap();
        let b = Poi::new("b", PoiCategory::Fastfood, a.center.offset_m(300.0, 0.0), 500.0).unwrap();
        let idx = PoiIndex::new(vec![a.clone(), b]);
        assert_eq!(idx.covering(a.center.offset_m(100.0, 0.0)), Some(0));
        assert_eq!(idx.covering(a.center.offset_m(200.0, 0.0)), Some(1));
        assert_eq!(idx.covering(a.center.offset_m(-600.0, 0.0)), None);
    }

    #[test]
    fn radius_bounds() {
        let c = GeoPoint { lat: 0.0, lon: 0.0 };
        assert!(Poi::new("x", PoiCategory::Mall, c, 0.0).is_err());
        assert!(Poi::new("x", PoiCategory::Mall, c, 2000.0).is_ok());
        assert!(Poi::new("x", PoiCategory::Mall, c, 2000.1).is_err());
    }

    #[test]
    fn poi_csv_round_trip() {
        let pois = vec![mall(), Poi::new("ff", PoiCategory::Fastfood, GeoPoint { lat: 34.1, lon: -118.3 }, 50.0).unwrap()];
        let mut buf = Vec::new();
        write_pois(&mut buf, &pois).unwrap();
        assert_eq!(load_pois(&buf[..]).unwrap(), pois);
        assert!(load_pois("poi_id,category,lat,lon,radius_m\nx,mall,34,-118,0\n".as_bytes()).is_err());
    }

    fn app(u: &str, app_id: &str) -> AppObservation {
        AppObservation {
            uid: uid(u),
            ts: TimeStamp::hour(T0).unwrap(),
            pos: GeoPoint { lat: 34.0, lon: -118.0 },
            app_id: Some(app_id.to_string()),
            conn_type: ConnType::Wifi,
            operator: String::new(),
            cell_id: None,
            tech: Tech::Other,
            bytes_up: 0,
            bytes_down: 0,
        }
    }

    #[test]
    fn community_threshold_is_strict() {
        let mut recs: Vec<AppObservation> = (0..100).map(|_| app("aa", "pin")).collect();
        recs.extend((0..101).map(|_| app("bb", "pin")));
        recs.extend((0..500).map(|_| app("cc", "other")));
        let c = extract_app_community(&recs, "pin", 100);
        assert_eq!(c.members.len(), 1);
        assert!(c.members.contains(&uid("bb")));
        assert!(extract_app_community(&recs, "nope", 100).members.is_empty());
    }

    #[test]
    fn rates_include_zero_visit_members() {
        let community = AppCommunity {
            app_id: "pin".into(),
            members: [uid("aa"), uid("bb")].into_iter().collect(),
            min_invocations: 100,
        };
        let visit = |u: &str| Visit {
            uid: uid(u),
            poi_id: "m".into(),
            category: PoiCategory::Mall,
            start: TimeStamp::seconds(0),
            end: TimeStamp::seconds(600),
            duration_min: 10.0,
        };
        let mut visits: Vec<Visit> = (0..12).map(|_| visit("aa")).collect();
        visits.push(visit("cc"));
        let s = community_visit_rates(&community, &visits, 4.0).unwrap();
        assert_eq!(s.rates, vec![(uid("aa"), 3.0), (uid("bb"), 0.0)]);
        assert_eq!(s.mean, Some(1.5));
        assert_eq!(s.median, Some(1.5));
        assert!(matches!(community_visit_rates(&community, &visits, 0.0), Err(PoiError::ZeroSpan(_))));
        let visitors = community_visitors(&community, &visits, Some(PoiCategory::Mall));
        assert_eq!(visitors.len(), 1);
    }

    #[test]
    fn weekday_examples() {
        let cfg = PipelineConfig::default();
        let p = GeoPoint { lat: 0.0, lon: 0.0 };
        let all: Vec<ObservationRecord> = ["aa", "bb"]
            .iter()
            .flat_map(|u| (0..7).map(move |d| at(u, T0 + d * 86_400 + 3600, p)))
            .collect();
        assert_eq!(weekday_histogram(&all, &cfg), [100.0; 7]);
        let tuesday = vec![at("aa", T0 + 86_400 + 100, p)];
        assert_eq!(weekday_histogram(&tuesday, &cfg), [0.0, 100.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(weekday_histogram(&[], &cfg), [0.0; 7]);
    }

    #[test]
    fn span_in_weeks() {
        let cfg = PipelineConfig::default();
        assert_eq!(study_span_weeks([T0, T0 + 27 * 86_400 + 5], &cfg), 4.0);
        assert_eq!(study_span_weeks(std::iter::empty(), &cfg), 0.0);
    }

    proptest! {
        #[test]
        fn community_monotone_in_threshold(counts in prop::collection::vec(0usize..30, 1..12), t1 in 0u32..30, t2 in 0u32..30) {
            let recs: Vec<AppObservation> = counts
                .iter()
                .enumerate()
                .flat_map(|(i, n)| (0..*n).map(move |_| app(&format!("{i:02x}"), "x")))
                .collect();
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let small = extract_app_community(&recs, "x", hi);
            let big = extract_app_community(&recs, "x", lo);
            prop_assert!(small.members.is_subset(&big.members));
        }

        #[test]
        fn visits_respect_bounds_and_are_disjoint(
            stays in prop::collection::vec((1i64..200, 0i64..500, 0u8..2), 1..12)
        ) {
            let c = mall().center;
            let away = c.offset_m(1000.0, 0.0);
            let mut t = T0;
            let mut recs = Vec::new();
            for (mins, gap, inside) in &stays {
                let p = if *inside == 1 { c } else { away };
                recs.extend(stay("aa", t, *mins, p));
                t += (mins + gap + 1) * MIN;
            }
            let v = detect(&recs, vec![mall()]);
            for visit in &v {
                prop_assert!(visit.duration_min >= 10.0 && visit.duration_min <= 360.0);
                prop_assert!(visit.start <= visit.end);
            }
            for w in v.windows(2) {
                prop_assert!(w[0].end < w[1].start);
            }
        }
    }
}

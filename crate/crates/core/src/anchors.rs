//! Dwell intervals and the successive filters built on them: consistent
//! users, home and work anchors, commuters, and work-hours distributions.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ingest::{ObservationRecord, UidHash};
use crate::model::{quantize, GridCell, PipelineConfig, TimeStamp, TimeWindow};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnchorError {
    #[error("records not sorted by time at index {0}")]
    Unsorted(usize),
    #[error("records belong to more than one user")]
    MixedUsers,
    #[error("record {0} has a position that cannot be gridded")]
    BadPosition(usize),
}

/// Contiguous presence in one anchor-resolution cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DwellInterval {
    pub uid: UidHash,
    pub cell: GridCell,
    pub start: TimeStamp,
    pub end: TimeStamp,
    pub n_obs: u32,
}

impl DwellInterval {
    pub fn duration_secs(&self) -> i64 {
        self.end.epoch_seconds - self.start.epoch_seconds
    }
}

/// Cut one user's time-ordered records into maximal same-cell runs whose
/// consecutive observations are at most `dwell_gap_max` apart.
pub fn build_dwell_intervals(
    records: &[ObservationRecord],
    cfg: &PipelineConfig,
) -> Result<Vec<DwellInterval>, AnchorError> {
    let gap = cfg.dwell_gap_secs();
    let mut out: Vec<DwellInterval> = Vec::new();
    let Some(first) = records.first() else {
        return Ok(out);
    };
    for (i, r) in records.iter().enumerate() {
        if r.uid != first.uid {
            return Err(AnchorError::MixedUsers);
        }
        let cell = quantize(r.pos, cfg.anchor_resolution).map_err(|_| AnchorError::BadPosition(i))?;
        if let Some(last) = out.last_mut() {
            if r.ts.epoch_seconds < last.end.epoch_seconds {
                return Err(AnchorError::Unsorted(i));
            }
            if last.cell == cell && r.ts.epoch_seconds - last.end.epoch_seconds <= gap {
                last.end = r.ts;
                last.n_obs += 1;
                continue;
            }
        }
        out.push(DwellInterval {
            uid: r.uid.clone(),
            cell,
            start: r.ts,
            end: r.ts,
            n_obs: 1,
        });
    }
    Ok(out)
}

/// Distinct local calendar days with at least one observation.
pub fn observed_days(records: &[ObservationRecord], cfg: &PipelineConfig) -> BTreeSet<i64> {
    records
        .iter()
        .map(|r| cfg.local_day(r.ts.epoch_seconds))
        .collect()
}

/// More than `consistent_min_days` observed days and no run of missing days
/// longer than `consistent_max_gap_days`.
pub fn is_consistent(days: &BTreeSet<i64>, cfg: &PipelineConfig) -> bool {
    if days.len() <= cfg.consistent_min_days as usize {
        return false;
    }
    let max_missing = days
        .iter()
        .zip(days.iter().skip(1))
        .map(|(a, b)| b - a - 1)
        .max()
        .unwrap_or(0);
    max_missing <= cfg.consistent_max_gap_days as i64
}

pub fn filter_consistent(
    users: &BTreeMap<UidHash, BTreeSet<i64>>,
    cfg: &PipelineConfig,
) -> BTreeSet<UidHash> {
    users
        .iter()
        .filter(|(_, days)| is_consistent(days, cfg))
        .map(|(u, _)| u.clone())
        .collect()
}

/// A recurring-presence criterion: at least `min_secs_per_day` inside
/// `window` on at least `min_days` eligible days.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorRule {
    pub window: TimeWindow,
    /// Eligible weekdays of the day that owns a window instance (Mon = 0).
    pub weekdays: [bool; 7],
    pub min_secs_per_day: i64,
    pub min_days: u32,
}

impl AnchorRule {
    pub fn home(cfg: &PipelineConfig) -> Self {
        AnchorRule {
            window: cfg.night_window,
            weekdays: [true; 7],
            min_secs_per_day: (cfg.home_min_hours_per_night * 3600.0).round() as i64,
            min_days: cfg.home_min_nights,
        }
    }

    pub fn work(cfg: &PipelineConfig) -> Self {
        AnchorRule {
            window: cfg.workday_window,
            weekdays: cfg.workdays,
            min_secs_per_day: (cfg.work_min_hours_per_day * 3600.0).round() as i64,
            min_days: cfg.work_min_workdays,
        }
    }
}

/// Per-cell, per-owning-day seconds of window time.
pub type WindowTally = BTreeMap<GridCell, BTreeMap<i64, i64>>;

/// Clip every interval to the rule's window and sum the overlap per
/// (cell, day). Isolated pings contribute nothing.
pub fn tally_windows(intervals: &[DwellInterval], rule: &AnchorRule, cfg: &PipelineConfig) -> WindowTally {
    let mut tally = WindowTally::new();
    for iv in intervals {
        if iv.duration_secs() <= 0 {
            continue;
        }
        let from = cfg.to_local(iv.start.epoch_seconds);
        let to = cfg.to_local(iv.end.epoch_seconds);
        for (day, secs) in rule.window.overlaps(from, to) {
            if rule.weekdays[crate::model::weekday_of_day(day)] {
                *tally.entry(iv.cell).or_default().entry(day).or_default() += secs;
            }
        }
    }
    tally
}

/// Summary of one cell under a rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellScore {
    pub cell: GridCell,
    pub qualifying_days: u32,
    pub total_secs: i64,
}

/// Every cell that meets the rule, with its score.
pub fn qualifying_cells(intervals: &[DwellInterval], rule: &AnchorRule, cfg: &PipelineConfig) -> Vec<CellScore> {
    tally_windows(intervals, rule, cfg)
        .into_iter()
        .filter_map(|(cell, days)| {
            let qualifying_days = days.values().filter(|&&s| s >= rule.min_secs_per_day).count() as u32;
            let total_secs = days.values().sum();
            (qualifying_days >= rule.min_days).then_some(CellScore {
                cell,
                qualifying_days,
                total_secs,
            })
        })
        .collect()
}

/// Winner among qualifying cells: most qualifying days, then most window
/// time, then the lexicographically smallest (lat_index, lon_index).
pub fn pick_anchor(scores: &[CellScore]) -> Option<GridCell> {
    scores
        .iter()
        .min_by(|a, b| {
            b.qualifying_days
                .cmp(&a.qualifying_days)
                .then(b.total_secs.cmp(&a.total_secs))
                .then(a.cell.cmp(&b.cell))
        })
        .map(|s| s.cell)
}

pub fn detect_home(intervals: &[DwellInterval], cfg: &PipelineConfig) -> Option<GridCell> {
    pick_anchor(&qualifying_cells(intervals, &AnchorRule::home(cfg), cfg))
}

pub fn detect_work(intervals: &[DwellInterval], cfg: &PipelineConfig) -> Option<GridCell> {
    pick_anchor(&qualifying_cells(intervals, &AnchorRule::work(cfg), cfg))
}

/// Per-user result of the anchor stage.
#[derive(Debug, Clone, PartialEq)]
pub struct UserAnchors {
    pub uid: UidHash,
    pub home: Option<GridCell>,
    pub work: Option<GridCell>,
    pub is_consistent: bool,
    pub is_commuter: bool,
}

/// A commuter has both anchors and they differ. Users who work where they
/// live are not commuters.
pub fn classify_commuters(mut anchors: Vec<UserAnchors>) -> Vec<UserAnchors> {
    for a in &mut anchors {
        a.is_commuter = matches!((a.home, a.work), (Some(h), Some(w)) if h != w);
    }
    anchors
}

/// Consistency check plus home/work detection for one user's sorted records.
/// Anchors are only searched for consistent users.
pub fn analyze_user(
    uid: &UidHash,
    records: &[ObservationRecord],
    cfg: &PipelineConfig,
) -> Result<(UserAnchors, Vec<DwellInterval>), AnchorError> {
    let consistent = is_consistent(&observed_days(records, cfg), cfg);
    let intervals = build_dwell_intervals(records, cfg)?;
    let (home, work) = if consistent {
        (detect_home(&intervals, cfg), detect_work(&intervals, cfg))
    } else {
        (None, None)
    };
    let anchors = UserAnchors {
        uid: uid.clone(),
        home,
        work,
        is_consistent: consistent,
        is_commuter: false,
    };
    Ok((classify_commuters(vec![anchors]).remove(0), intervals))
}

/// Mean hours per workday spent in `work`, over the workdays with any dwell
/// time there. Whole calendar days count, not just the work window.
pub fn mean_daily_work_hours(
    work: GridCell,
    intervals: &[DwellInterval],
    cfg: &PipelineConfig,
) -> Option<f64> {
    let whole_day = TimeWindow {
        start_min: 0,
        end_min: 1440,
    };
    let rule = AnchorRule {
        window: whole_day,
        weekdays: cfg.workdays,
        min_secs_per_day: 0,
        min_days: 0,
    };
    let relevant: Vec<DwellInterval> = intervals.iter().filter(|iv| iv.cell == work).cloned().collect();
    let tally = tally_windows(&relevant, &rule, cfg);
    let days = tally.get(&work)?;
    let worked: Vec<i64> = days.values().copied().filter(|&s| s > 0).collect();
    if worked.is_empty() {
        return None;
    }
    Some(worked.iter().sum::<i64>() as f64 / 3600.0 / worked.len() as f64)
}

pub const HOURS_BIN_WIDTH: f64 = 0.5;
pub const HOURS_BINS: usize = 32;

/// Distribution of per-user mean daily hours over 0.5 h bins spanning 0–16 h.
/// Values at or above 16 h land in the last bin.
#[derive(Debug, Clone, PartialEq)]
pub struct HoursHistogram {
    pub counts: [u64; HOURS_BINS],
    pub values: Vec<f64>,
}

impl Default for HoursHistogram {
    fn default() -> Self {
        HoursHistogram {
            counts: [0; HOURS_BINS],
            values: Vec::new(),
        }
    }
}

impl HoursHistogram {
    pub fn push(&mut self, hours: f64) {
        let bin = ((hours / HOURS_BIN_WIDTH).floor().max(0.0) as usize).min(HOURS_BINS - 1);
        self.counts[bin] += 1;
        self.values.push(hours);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    pub fn bin_lower(bin: usize) -> f64 {
        bin as f64 * HOURS_BIN_WIDTH
    }
}

/// Per-cohort histogram of commuters' mean daily hours at their work cell.
/// Every label in `cohorts` appears in the output, empty or not.
pub fn work_hours_distribution<'a, L: Ord + Clone>(
    users: impl IntoIterator<Item = (L, &'a UserAnchors, &'a [DwellInterval])>,
    cohorts: &[L],
    cfg: &PipelineConfig,
) -> BTreeMap<L, HoursHistogram> {
    let mut out: BTreeMap<L, HoursHistogram> =
        cohorts.iter().map(|c| (c.clone(), HoursHistogram::default())).collect();
    for (label, anchors, intervals) in users {
        if !anchors.is_commuter {
            continue;
        }
        let Some(work) = anchors.work else { continue };
        if let Some(h) = mean_daily_work_hours(work, intervals, cfg) {
            out.entry(label).or_default().push(h);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GeoPoint, SECS_PER_DAY};
    use proptest::prelude::*;

    // 2015-03-02 00:00:00 UTC, a Monday
    const MONDAY: i64 = 1_425_254_400;

    fn uid() -> UidHash {
        UidHash::from_digest("ab12").unwrap()
    }

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    /// A point in the middle of 0.001° cell `(li, lo)`.
    fn cell_pt(li: i64, lo: i64) -> GeoPoint {
        GeoPoint {
            lat: (li as f64 + 0.5) * 0.001,
            lon: (lo as f64 + 0.5) * 0.001,
        }
    }

    fn obs(t: i64, p: GeoPoint) -> ObservationRecord {
        ObservationRecord {
            uid: uid(),
            ts: TimeStamp::seconds(t),
            pos: p,
        }
    }

    /// Pings every `step` seconds over [from, to], endpoints included.
    fn pings(from: i64, to: i64, step: i64, p: GeoPoint) -> Vec<ObservationRecord> {
        let mut v: Vec<ObservationRecord> = (0..)
            .map(|i| from + i * step)
            .take_while(|&t| t <= to)
            .map(|t| obs(t, p))
            .collect();
        if v.last().map(|r| r.ts.epoch_seconds) != Some(to) {
            v.push(obs(to, p));
        }
        v
    }

    const H: i64 = 3600;
    const A: (i64, i64) = (34052, -118244);
    const B: (i64, i64) = (34060, -118250);

    #[test]
    fn single_run() {
        let p = cell_pt(A.0, A.1);
        let recs = vec![obs(22 * H, p), obs(22 * H + 600, p), obs(22 * H + 1200, p)];
        let iv = build_dwell_intervals(&recs, &cfg()).unwrap();
        assert_eq!(iv.len(), 1);
        assert_eq!(iv[0].duration_secs(), 1200);
        assert_eq!(iv[0].n_obs, 3);
    }

    #[test]
    fn gap_splits_runs() {
        let p = cell_pt(A.0, A.1);
        let iv = build_dwell_intervals(&[obs(22 * H, p), obs(23 * H, p)], &cfg()).unwrap();
        assert_eq!(iv.len(), 2);
        assert!(iv.iter().all(|i| i.duration_secs() == 0));
    }

    #[test]
    fn planted_night_is_one_interval() {
        let p = cell_pt(A.0, A.1);
        let recs = pings(MONDAY + 22 * H, MONDAY + 30 * H, 300, p);
        let iv = build_dwell_intervals(&recs, &cfg()).unwrap();
        assert_eq!(iv.len(), 1);
        assert_eq!(iv[0].duration_secs(), 8 * H);
        assert_eq!(iv[0].n_obs, 97);
    }

    #[test]
    fn unsorted_and_mixed_inputs_rejected() {
        let p = cell_pt(A.0, A.1);
        assert_eq!(
            build_dwell_intervals(&[obs(100, p), obs(50, p)], &cfg()),
            Err(AnchorError::Unsorted(1))
        );
        let mut other = obs(200, p);
        other.uid = UidHash::from_digest("cd34").unwrap();
        assert_eq!(
            build_dwell_intervals(&[obs(100, p), other], &cfg()),
            Err(AnchorError::MixedUsers)
        );
        assert!(build_dwell_intervals(&[], &cfg()).unwrap().is_empty());
    }

    #[test]
    fn consistency_examples() {
        let c = cfg();
        let run: BTreeSet<i64> = (0..45).collect();
        assert!(is_consistent(&run, &c));
        // 31 observed days with a 10-day hole
        let holey: BTreeSet<i64> = (0..15).chain(25..41).collect();
        assert_eq!(holey.len(), 31);
        assert!(!is_consistent(&holey, &c));
        // exactly 30 days is not "more than 30"
        let thirty: BTreeSet<i64> = (0..30).collect();
        assert!(!is_consistent(&thirty, &c));
        // a 7-day hole is tolerated, 8 is not
        let seven: BTreeSet<i64> = (0..20).chain(27..47).collect();
        assert!(is_consistent(&seven, &c));
        let eight: BTreeSet<i64> = (0..20).chain(28..48).collect();
        assert!(!is_consistent(&eight, &c));

        let mut users = BTreeMap::new();
        users.insert(UidHash::from_digest("01").unwrap(), run);
        users.insert(UidHash::from_digest("02").unwrap(), holey);
        let kept = filter_consistent(&users, &c);
        assert_eq!(kept.len(), 1);
        assert!(kept.contains(&UidHash::from_digest("01").unwrap()));
    }

    /// Nightly dwell of `hours` starting 22:00 local for the given day numbers.
    fn nights(days: impl IntoIterator<Item = i64>, cell: (i64, i64), minutes: i64) -> Vec<ObservationRecord> {
        let p = cell_pt(cell.0, cell.1);
        days.into_iter()
            .flat_map(|d| {
                let start = MONDAY + d * SECS_PER_DAY + 22 * H;
                pings(start, start + minutes * 60, 600, p)
            })
            .collect()
    }

    fn intervals(mut recs: Vec<ObservationRecord>) -> Vec<DwellInterval> {
        recs.sort_by_key(|r| r.ts.epoch_seconds);
        build_dwell_intervals(&recs, &cfg()).unwrap()
    }

    #[test]
    fn home_unique_qualifier() {
        let iv = intervals(nights(0..20, A, 150));
        let home = detect_home(&iv, &cfg()).unwrap();
        assert_eq!((home.lat_index, home.lon_index), A);
    }

    #[test]
    fn home_below_night_floor() {
        let iv = intervals(nights(0..14, A, 150));
        assert_eq!(detect_home(&iv, &cfg()), None);
    }

    #[test]
    fn home_requires_two_hours_in_window() {
        // 1h59 a night never qualifies
        let iv = intervals(nights(0..30, A, 119));
        assert_eq!(detect_home(&iv, &cfg()), None);
    }

    // Brute force: walk every minute between consecutive same-cell pings that
    // are within the gap limit, and bucket the minute by (cell, night).
    fn night_minutes_oracle(recs: &[ObservationRecord]) -> BTreeMap<(i64, i64), BTreeMap<i64, i64>> {
        let mut out: BTreeMap<(i64, i64), BTreeMap<i64, i64>> = BTreeMap::new();
        for w in recs.windows(2) {
            let c0 = ((w[0].pos.lat / 0.001).floor() as i64, (w[0].pos.lon / 0.001).floor() as i64);
            let c1 = ((w[1].pos.lat / 0.001).floor() as i64, (w[1].pos.lon / 0.001).floor() as i64);
            let (t0, t1) = (w[0].ts.epoch_seconds, w[1].ts.epoch_seconds);
            if c0 != c1 || t1 - t0 > 1800 {
                continue;
            }
            let mut t = t0;
            while t < t1 {
                let minute_of_day = (t.rem_euclid(SECS_PER_DAY)) / 60;
                let day = t.div_euclid(SECS_PER_DAY);
                let night = if minute_of_day >= 22 * 60 {
                    Some(day)
                } else if minute_of_day < 6 * 60 {
                    Some(day - 1)
                } else {
                    None
                };
                if let Some(n) = night {
                    *out.entry(c0).or_default().entry(n).or_default() += 1;
                }
                t += 60;
            }
        }
        out
    }

    #[test]
    fn home_argmax_matches_oracle() {
        let mut recs = nights(0..16, A, 150);
        recs.extend(nights(20..38, B, 150));
        recs.sort_by_key(|r| r.ts.epoch_seconds);
        let oracle = night_minutes_oracle(&recs);
        let qualifying: BTreeMap<(i64, i64), usize> = oracle
            .iter()
            .map(|(c, nights)| (*c, nights.values().filter(|&&m| m >= 120).count()))
            .filter(|(_, n)| *n >= 15)
            .collect();
        assert_eq!(qualifying.get(&A), Some(&16));
        assert_eq!(qualifying.get(&B), Some(&18));
        let expected = qualifying.iter().max_by_key(|(_, n)| **n).map(|(c, _)| *c).unwrap();

        let iv = build_dwell_intervals(&recs, &cfg()).unwrap();
        let tally = tally_windows(&iv, &AnchorRule::home(&cfg()), &cfg());
        for (cell, nights) in &tally {
            let o = &oracle[&(cell.lat_index, cell.lon_index)];
            let secs: BTreeMap<i64, i64> = o.iter().map(|(d, m)| (*d - MONDAY / SECS_PER_DAY, *m * 60)).collect();
            let mine: BTreeMap<i64, i64> = nights.iter().map(|(d, s)| (*d - MONDAY / SECS_PER_DAY, *s)).collect();
            assert_eq!(mine, secs);
        }
        let home = detect_home(&iv, &cfg()).unwrap();
        assert_eq!((home.lat_index, home.lon_index), expected);
        assert_eq!(expected, B);
    }

    #[test]
    fn home_tie_breaks() {
        // same night count, A has more hours
        let mut recs = nights(0..20, A, 200);
        recs.extend(nights(30..50, B, 150));
        let iv = intervals(recs);
        let home = detect_home(&iv, &cfg()).unwrap();
        assert_eq!((home.lat_index, home.lon_index), A);
        // identical counts and hours: smaller (lat_index, lon_index) wins
        let mut recs = nights(0..20, B, 150);
        recs.extend(nights(30..50, A, 150));
        let iv = intervals(recs);
        let home = detect_home(&iv, &cfg()).unwrap();
        assert_eq!((home.lat_index, home.lon_index), A.min(B));
    }

    fn days_at(days: impl IntoIterator<Item = i64>, cell: (i64, i64), from_h: i64, hours: i64) -> Vec<ObservationRecord> {
        let p = cell_pt(cell.0, cell.1);
        days.into_iter()
            .flat_map(|d| {
                let start = MONDAY + d * SECS_PER_DAY + from_h * H;
                pings(start, start + hours * H, 900, p)
            })
            .collect()
    }

    fn weekdays(n: usize) -> Vec<i64> {
        (0..).filter(|d| d % 7 < 5).take(n).collect()
    }

    #[test]
    fn work_on_weekdays() {
        let iv = intervals(days_at(weekdays(35), B, 9, 5));
        let w = detect_work(&iv, &cfg()).unwrap();
        assert_eq!((w.lat_index, w.lon_index), B);
    }

    #[test]
    fn work_on_saturdays_only_is_ignored() {
        let sats: Vec<i64> = (0..35).map(|w| w * 7 + 5).collect();
        let iv = intervals(days_at(sats, B, 9, 5));
        assert_eq!(detect_work(&iv, &cfg()), None);
    }

    #[test]
    fn office_with_short_lunch_gap() {
        let p = cell_pt(B.0, B.1);
        let mut recs = Vec::new();
        for d in weekdays(32) {
            let base = MONDAY + d * SECS_PER_DAY;
            recs.extend(pings(base + 9 * H, base + 12 * H, 600, p));
            // 25 minutes of silence over lunch
            recs.extend(pings(base + 12 * H + 1500, base + 17 * H, 600, p));
        }
        let iv = intervals(recs);
        let w = detect_work(&iv, &cfg()).unwrap();
        assert_eq!((w.lat_index, w.lon_index), B);
        // one interval per day
        assert_eq!(iv.len(), 32);
    }

    #[test]
    fn commuter_classification() {
        let a = GridCell::new(0.001, A.0, A.1);
        let b = GridCell::new(0.001, B.0, B.1);
        let mk = |home, work| UserAnchors {
            uid: uid(),
            home,
            work,
            is_consistent: true,
            is_commuter: false,
        };
        let out = classify_commuters(vec![mk(Some(a), Some(a)), mk(Some(a), Some(b)), mk(None, Some(b)), mk(Some(a), None)]);
        let flags: Vec<bool> = out.iter().map(|u| u.is_commuter).collect();
        assert_eq!(flags, vec![false, true, false, false]);
    }

    #[test]
    fn work_hours_histogram() {
        let b = GridCell::new(0.001, B.0, B.1);
        let iv = intervals(days_at(weekdays(10), B, 9, 8));
        let u = UserAnchors {
            uid: uid(),
            home: Some(GridCell::new(0.001, A.0, A.1)),
            work: Some(b),
            is_consistent: true,
            is_commuter: true,
        };
        let hist = work_hours_distribution([("rich", &u, iv.as_slice())], &["poor", "rich"], &cfg());
        assert!(hist["poor"].is_empty());
        assert_eq!(hist["poor"].mean(), None);
        let rich = &hist["rich"];
        assert_eq!(rich.len(), 1);
        assert_eq!(rich.counts[16], 1);
        assert_eq!(HoursHistogram::bin_lower(16), 8.0);
        assert_eq!(rich.mean(), Some(8.0));
    }

    #[test]
    fn analyze_skips_inconsistent_users() {
        let recs = {
            let mut r = nights(0..20, A, 150);
            r.sort_by_key(|r| r.ts.epoch_seconds);
            r
        };
        // only 20 distinct nights observed (plus their mornings): 21 days, not consistent
        let (a, _) = analyze_user(&uid(), &recs, &cfg()).unwrap();
        assert!(!a.is_consistent);
        assert_eq!(a.home, None);
    }

    proptest! {
        #[test]
        fn dwell_invariants(steps in prop::collection::vec((1i64..3000, 0u8..3), 1..200)) {
            let cells = [A, B, (34052, -118245)];
            let mut t = MONDAY;
            let recs: Vec<ObservationRecord> = steps
                .iter()
                .map(|(dt, c)| {
                    t += dt;
                    obs(t, cell_pt(cells[*c as usize].0, cells[*c as usize].1))
                })
                .collect();
            let c = cfg();
            let iv = build_dwell_intervals(&recs, &c).unwrap();
            prop_assert_eq!(iv.iter().map(|i| i.n_obs as usize).sum::<usize>(), recs.len());
            let total: i64 = iv.iter().map(DwellInterval::duration_secs).sum();
            let span = recs.last().unwrap().ts.epoch_seconds - recs[0].ts.epoch_seconds;
            prop_assert!(total <= span);
            for w in iv.windows(2) {
                prop_assert!(w[0].end <= w[1].start);
            }
            for i in &iv {
                prop_assert!(i.start <= i.end);
            }
        }

        #[test]
        fn lowering_night_floor_never_loses_homes(n_nights in 0i64..30, minutes in 60i64..300, floor in 1u32..20) {
            let iv = intervals(nights(0..n_nights, A, minutes));
            let mut hi = cfg();
            hi.home_min_nights = floor + 1;
            let mut lo = cfg();
            lo.home_min_nights = floor;
            if detect_home(&iv, &hi).is_some() {
                prop_assert!(detect_home(&iv, &lo).is_some());
            }
        }

        // New dwells that stay clear of existing activity (more than the gap
        // limit away) can only add qualifying cells, never remove one.
        #[test]
        fn separate_extra_dwells_keep_qualifiers(
            base_nights in 10i64..25,
            extra in prop::collection::vec((0i64..60, 0u8..3, 30i64..240), 0..20),
        ) {
            let cells = [A, B, (34052, -118245)];
            let base = nights(0..base_nights, A, 180);
            let mut added = base.clone();
            for (d, c, mins) in &extra {
                // daytime dwells, far from the 22:00-01:00 base activity
                let start = MONDAY + d * SECS_PER_DAY + 10 * H;
                added.extend(pings(start, start + mins * 60, 600, cell_pt(cells[*c as usize].0, cells[*c as usize].1)));
            }
            let c = cfg();
            let rule = AnchorRule::home(&c);
            let before: BTreeSet<GridCell> = qualifying_cells(&intervals(base), &rule, &c).iter().map(|s| s.cell).collect();
            let iv_after = intervals(added.clone());
            let after: BTreeSet<GridCell> = qualifying_cells(&iv_after, &rule, &c).iter().map(|s| s.cell).collect();
            prop_assert!(before.is_subset(&after));
            // deterministic winner
            prop_assert_eq!(detect_home(&iv_after, &c), detect_home(&intervals(added), &c));
        }
    }
}

//! The successive-reduction pipeline: ingest, anchors, cohorts, visits and
//! communities, towers, and the k-suppressed reports built from them.
//!
//! Stages hand each other in-memory tables keyed by hashed uid; nothing
//! per-user leaves this module. Every report row counts distinct users and
//! goes through [`Report::build`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchors::{analyze_user, work_hours_distribution, AnchorError, DwellInterval, HoursHistogram, UserAnchors};
use crate::cohorts::{assign_cohorts, load_census, share_pct, CensusDistrict, CohortAssignment, CohortLabel, DistrictIndex};
use crate::ingest::{
    partition_by_user, read_app_inputs, read_location_inputs, AppObservation, IngestError, ObservationRecord,
    ParseOutcome, RejectCounts, Tech, UidHash, UidMode,
};
use crate::model::{PipelineConfig, PoiCategory, WEEKDAY_NAMES};
use crate::poi_apps::{
    community_from_counts, community_visit_rates, community_visitors, detect_visits, invocation_counts, load_pois,
    median, study_span_weeks, weekday_histogram, AppCommunity, Poi, PoiIndex, Visit,
};
use crate::report::{emit_report, AggregateRow, Report, ReportError, ReportFormat};
use crate::towers::{default_cdf_edges, empirical_cdf, estimate_towers, quantile, TowerEstimate, TowerKey};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
        manifest: Box<RunManifest>,
    },
}

impl PipelineError {
    pub fn manifest(&self) -> &RunManifest {
        match self {
            PipelineError::Stage { manifest, .. } => manifest,
        }
    }
}

fn stage_err(stage: &'static str, e: impl std::fmt::Display, manifest: &RunManifest) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: e.to_string(),
        manifest: Box::new(manifest.clone()),
    }
}

/// Input files; anything absent is skipped.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineInputs {
    pub location: Vec<PathBuf>,
    pub app: Vec<PathBuf>,
    pub census: Option<PathBuf>,
    pub pois: Option<PathBuf>,
}

impl PipelineInputs {
    /// Pick up `location.csv`, `app.csv`, `census.csv` and `pois.csv` (or
    /// `location/` and `app/` stores) from a directory.
    pub fn from_dir(dir: &Path) -> Self {
        let pick = |names: &[&str]| names.iter().map(|n| dir.join(n)).find(|p| p.exists());
        PipelineInputs {
            location: pick(&["location.csv", "location"]).into_iter().collect(),
            app: pick(&["app.csv", "app"]).into_iter().collect(),
            census: pick(&["census.csv"]),
            pois: pick(&["pois.csv"]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InputCounts {
    pub lines: u64,
    pub parsed: u64,
    pub rejected: u64,
    pub rejected_by_class: RejectCounts,
    pub users: u64,
}

impl InputCounts {
    fn of<T>(o: &ParseOutcome<T>, parsed: usize, users: usize) -> Self {
        InputCounts {
            lines: o.lines,
            parsed: parsed as u64,
            rejected: o.rejected_total(),
            rejected_by_class: o.rejected.clone(),
            users: users as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub name: String,
    pub rows: u64,
    pub suppressed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub k: u64,
    pub inputs: BTreeMap<String, Vec<String>>,
    pub location: InputCounts,
    pub app: InputCounts,
    pub districts: u64,
    pub pois: u64,
    /// User counts through the reduction chain, in order.
    pub funnel: Vec<(String, u64)>,
    pub visits: u64,
    pub towers: u64,
    pub reports: Vec<ReportSummary>,
}

impl RunManifest {
    fn new(cfg: &PipelineConfig, inputs: &PipelineInputs) -> Self {
        let show = |ps: &[PathBuf]| ps.iter().map(|p| p.display().to_string()).collect::<Vec<_>>();
        let mut paths = BTreeMap::new();
        paths.insert("location".to_string(), show(&inputs.location));
        paths.insert("app".to_string(), show(&inputs.app));
        paths.insert("census".to_string(), show(inputs.census.as_slice()));
        paths.insert("pois".to_string(), show(inputs.pois.as_slice()));
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            config_hash: cfg.config_hash(),
            k: cfg.k_anonymity as u64,
            inputs: paths,
            ..RunManifest::default()
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

pub fn load_location(paths: &[PathBuf], mode: &UidMode) -> Result<(BTreeMap<UidHash, Vec<ObservationRecord>>, InputCounts), IngestError> {
    let mut o = read_location_inputs(paths, mode)?;
    let records = std::mem::take(&mut o.records);
    let parsed = records.len();
    let parts = partition_by_user(records);
    let counts = InputCounts::of(&o, parsed, parts.len());
    Ok((parts, counts))
}

pub fn load_app(paths: &[PathBuf], mode: &UidMode) -> Result<(BTreeMap<UidHash, Vec<AppObservation>>, InputCounts), IngestError> {
    let mut o = read_app_inputs(paths, mode)?;
    let records = std::mem::take(&mut o.records);
    let parsed = records.len();
    let parts = partition_by_user(records);
    let counts = InputCounts::of(&o, parsed, parts.len());
    Ok((parts, counts))
}

pub fn flatten<R>(parts: BTreeMap<UidHash, Vec<R>>) -> Vec<R> {
    parts.into_values().flatten().collect()
}

pub fn load_census_file(path: &Path) -> Result<Vec<CensusDistrict>, String> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_census(f).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn load_pois_file(path: &Path) -> Result<Vec<Poi>, String> {
    let f = fs::File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    load_pois(f).map_err(|e| format!("{}: {e}", path.display()))
}

/// Per-user anchor results for the users that entered the anchor stage.
#[derive(Debug, Clone, Default)]
pub struct AnchorStage {
    pub anchors: BTreeMap<UidHash, UserAnchors>,
    pub intervals: BTreeMap<UidHash, Vec<DwellInterval>>,
}

/// Run consistency and anchor detection for every user in `parts`, or only
/// those in `only` when given.
pub fn anchor_stage(
    parts: &BTreeMap<UidHash, Vec<ObservationRecord>>,
    only: Option<&BTreeSet<UidHash>>,
    cfg: &PipelineConfig,
) -> Result<AnchorStage, AnchorError> {
    let users: Vec<(&UidHash, &Vec<ObservationRecord>)> =
        parts.iter().filter(|(u, _)| only.is_none_or(|s| s.contains(*u))).collect();
    let results: Vec<(UserAnchors, Vec<DwellInterval>)> = users
        .par_iter()
        .map(|(u, recs)| analyze_user(u, recs, cfg))
        .collect::<Result<_, _>>()?;
    let mut stage = AnchorStage::default();
    for (a, iv) in results {
        stage.intervals.insert(a.uid.clone(), iv);
        stage.anchors.insert(a.uid.clone(), a);
    }
    Ok(stage)
}

pub fn cohort_stage(
    stage: &AnchorStage,
    census: Option<&[CensusDistrict]>,
    cfg: &PipelineConfig,
) -> BTreeMap<UidHash, CohortAssignment> {
    let index = DistrictIndex::new(census.map(<[_]>::to_vec).unwrap_or_default());
    let anchors: Vec<UserAnchors> = stage.anchors.values().cloned().collect();
    assign_cohorts(&anchors, &index, cfg)
}

/// Visits of every user, in uid order.
pub fn visit_stage(parts: &BTreeMap<UidHash, Vec<ObservationRecord>>, pois: &[Poi], cfg: &PipelineConfig) -> Vec<Visit> {
    if pois.is_empty() {
        return Vec::new();
    }
    let index = PoiIndex::new(pois.to_vec());
    let users: Vec<&Vec<ObservationRecord>> = parts.values().collect();
    let gap = cfg.dwell_gap_secs();
    users
        .par_iter()
        .map(|recs| detect_visits(recs, &index, &cfg.visit_bounds, gap))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Communities for the configured apps, or for every app seen.
pub fn community_stage(app: &[AppObservation], cfg: &PipelineConfig) -> Vec<AppCommunity> {
    let counts = invocation_counts(app);
    let apps: Vec<String> = if cfg.report_apps.is_empty() {
        counts.keys().cloned().collect()
    } else {
        cfg.report_apps.clone()
    };
    apps.iter()
        .map(|a| community_from_counts(a, counts.get(a), cfg.app_min_invocations))
        .collect()
}

/// User counts through the chain: all located users, those with app data
/// too, consistent, homed, in an eligible district, with a work anchor,
/// commuting. Each set is a subset of the previous one.
pub fn funnel(
    total: usize,
    joined: usize,
    stage: &AnchorStage,
    cohorts: &BTreeMap<UidHash, CohortAssignment>,
) -> Vec<(String, u64)> {
    let assigned = |u: &UidHash| cohorts.get(u).is_some_and(|c| c.district_id.is_some());
    let a = stage.anchors.values();
    let consistent = a.clone().filter(|a| a.is_consistent).count();
    let homed = a.clone().filter(|a| a.home.is_some()).count();
    let in_district = a.clone().filter(|a| a.home.is_some() && assigned(&a.uid)).count();
    let worked = a
        .clone()
        .filter(|a| a.home.is_some() && assigned(&a.uid) && a.work.is_some())
        .count();
    let commuters = a.filter(|a| a.is_commuter && assigned(&a.uid)).count();
    [
        ("total", total),
        ("joined", joined),
        ("consistent", consistent),
        ("homed", homed),
        ("district_assigned", in_district),
        ("worked", worked),
        ("commuters", commuters),
    ]
    .into_iter()
    .map(|(n, c)| (n.to_string(), c as u64))
    .collect()
}

/// Shared report settings.
#[derive(Debug, Clone)]
pub struct ReportContext {
    pub k: u64,
    pub config_hash: String,
    pub inputs: Vec<(String, u64)>,
}

impl ReportContext {
    pub fn new(cfg: &PipelineConfig, inputs: Vec<(String, u64)>) -> Self {
        ReportContext {
            k: cfg.k_anonymity as u64,
            config_hash: cfg.config_hash(),
            inputs,
        }
    }

    pub fn build(&self, name: &str, keys: &[&str], metrics: &[&str], rows: Vec<AggregateRow>) -> Result<Report, ReportError> {
        Report::build(name, keys, metrics, rows, self.k, &self.config_hash, self.inputs.clone())
    }
}

fn key(dim: &str, v: impl ToString) -> (&str, String) {
    (dim, v.to_string())
}

pub fn funnel_report(ctx: &ReportContext, funnel: &[(String, u64)]) -> Result<Report, ReportError> {
    let total = funnel.first().map_or(0, |(_, n)| *n);
    let rows = funnel
        .iter()
        .enumerate()
        .map(|(i, (stage, n))| {
            AggregateRow::new(
                vec![key("step", i), key("stage", stage)],
                *n,
                vec![("pct_of_total", share_pct(*n, total))],
            )
        })
        .collect();
    ctx.build("funnel", &["step", "stage"], &["pct_of_total"], rows)
}

/// Users per anchor outcome.
pub fn anchor_report(ctx: &ReportContext, stage: &AnchorStage) -> Result<Report, ReportError> {
    let yn = |b: bool| if b { "yes" } else { "no" };
    let mut counts: BTreeMap<[&str; 4], u64> = BTreeMap::new();
    for a in stage.anchors.values() {
        *counts
            .entry([yn(a.is_consistent), yn(a.home.is_some()), yn(a.work.is_some()), yn(a.is_commuter)])
            .or_default() += 1;
    }
    let total = stage.anchors.len() as u64;
    let rows = counts
        .iter()
        .map(|(k, n)| {
            AggregateRow::new(
                vec![key("consistent", k[0]), key("home", k[1]), key("work", k[2]), key("commuter", k[3])],
                *n,
                vec![("pct_users", share_pct(*n, total))],
            )
        })
        .collect();
    ctx.build("anchors", &["consistent", "home", "work", "commuter"], &["pct_users"], rows)
}

/// Users per cohort among those with an eligible home district.
pub fn cohort_report(ctx: &ReportContext, cohorts: &BTreeMap<UidHash, CohortAssignment>) -> Result<Report, ReportError> {
    let mut counts: BTreeMap<CohortLabel, u64> = BTreeMap::new();
    for c in cohorts.values().filter(|c| c.district_id.is_some()) {
        *counts.entry(c.label).or_default() += 1;
    }
    let denom: u64 = counts.values().sum();
    let rows = counts
        .iter()
        .map(|(l, n)| AggregateRow::new(vec![key("cohort", l.as_str())], *n, vec![("share_pct", share_pct(*n, denom))]))
        .collect();
    ctx.build("cohorts", &["cohort"], &["share_pct"], rows)
}

fn user_label(u: &UidHash, cohorts: &BTreeMap<UidHash, CohortAssignment>) -> CohortLabel {
    cohorts.get(u).map_or(CohortLabel::Unassigned, |c| c.label)
}

/// Commuters' mean daily hours at work: a histogram and per-cohort means.
pub fn work_hours_reports(
    ctx: &ReportContext,
    stage: &AnchorStage,
    cohorts: &BTreeMap<UidHash, CohortAssignment>,
    cfg: &PipelineConfig,
) -> Result<(Report, Report), ReportError> {
    let users = stage.anchors.values().filter_map(|a| {
        let label = user_label(&a.uid, cohorts);
        (label != CohortLabel::Unassigned).then(|| (label, a, stage.intervals[&a.uid].as_slice()))
    });
    let labels = [CohortLabel::Poor, CohortLabel::Middle, CohortLabel::Rich];
    let dist: BTreeMap<CohortLabel, HoursHistogram> = work_hours_distribution(users, &labels, cfg);
    let mut hist = Vec::new();
    let mut summary = Vec::new();
    for (label, h) in &dist {
        for (bin, &n) in h.counts.iter().enumerate() {
            if n > 0 {
                hist.push(AggregateRow::new(
                    vec![key("cohort", label.as_str()), key("hours_from", HoursHistogram::bin_lower(bin))],
                    n,
                    vec![],
                ));
            }
        }
        if let Some(mean) = h.mean() {
            let med = median(&h.values).expect("non-empty");
            summary.push(AggregateRow::new(
                vec![key("cohort", label.as_str())],
                h.len() as u64,
                vec![("mean_hours", mean), ("median_hours", med)],
            ));
        }
    }
    Ok((
        ctx.build("work_hours_hist", &["cohort", "hours_from"], &[], hist)?,
        ctx.build("work_hours", &["cohort"], &["mean_hours", "median_hours"], summary)?,
    ))
}

pub fn weekday_report(
    ctx: &ReportContext,
    parts: &BTreeMap<UidHash, Vec<ObservationRecord>>,
    cfg: &PipelineConfig,
) -> Result<Report, ReportError> {
    let n = parts.len() as u64;
    let mut active = [0u64; 7];
    let mut pct = [0.0; 7];
    if n > 0 {
        let per_user: Vec<[f64; 7]> = parts.values().collect::<Vec<_>>().par_iter().map(|r| weekday_histogram(r, cfg)).collect();
        for h in &per_user {
            for (d, v) in h.iter().enumerate() {
                if *v > 0.0 {
                    active[d] += 1;
                }
            }
        }
        for d in 0..7 {
            pct[d] = share_pct(active[d], n);
        }
    }
    let rows = (0..7)
        .map(|d| AggregateRow::new(vec![key("weekday", d), key("day", WEEKDAY_NAMES[d])], active[d], vec![("pct_users", pct[d])]))
        .collect();
    ctx.build("weekday_activity", &["weekday", "day"], &["pct_users"], rows)
}

/// Distinct users behind a group plus the group's values.
type UsersAndValues<'a> = (BTreeSet<&'a UidHash>, Vec<f64>);

/// Visit counts and durations per (category, cohort).
pub fn visit_report(
    ctx: &ReportContext,
    visits: &[Visit],
    cohorts: &BTreeMap<UidHash, CohortAssignment>,
) -> Result<Report, ReportError> {
    let mut groups: BTreeMap<(PoiCategory, CohortLabel), UsersAndValues> = BTreeMap::new();
    for v in visits {
        let g = groups.entry((v.category, user_label(&v.uid, cohorts))).or_default();
        g.0.insert(&v.uid);
        g.1.push(v.duration_min);
    }
    let mut rows = Vec::new();
    let mut all: BTreeMap<PoiCategory, UsersAndValues> = BTreeMap::new();
    for ((cat, label), (users, durs)) in &groups {
        let a = all.entry(*cat).or_default();
        a.0.extend(users.iter().copied());
        a.1.extend(durs.iter().copied());
        rows.push(visit_row(cat.as_str(), label.as_str(), users.len(), durs));
    }
    for (cat, (users, durs)) in &all {
        rows.push(visit_row(cat.as_str(), "all", users.len(), durs));
    }
    ctx.build(
        "poi_visits",
        &["category", "cohort"],
        &["visits", "mean_duration_min", "median_duration_min"],
        rows,
    )
}

fn visit_row(cat: &str, cohort: &str, users: usize, durs: &[f64]) -> AggregateRow {
    let mean = durs.iter().sum::<f64>() / durs.len() as f64;
    AggregateRow::new(
        vec![key("category", cat), key("cohort", cohort)],
        users as u64,
        vec![
            ("visits", durs.len() as f64),
            ("mean_duration_min", mean),
            ("median_duration_min", median(durs).expect("non-empty group")),
        ],
    )
}

/// Community sizes, their members' visit rates, and how many members visited
/// each POI category.
pub fn community_reports(
    ctx: &ReportContext,
    communities: &[AppCommunity],
    visits: &[Visit],
    span_weeks: f64,
) -> Result<(Report, Report), ReportError> {
    let mut sizes = Vec::new();
    let mut overlap = Vec::new();
    for c in communities {
        let n = c.members.len() as u64;
        let (mean, med) = if span_weeks > 0.0 && n > 0 {
            let s = community_visit_rates(c, visits, span_weeks).expect("positive span");
            (s.mean.unwrap_or(0.0), s.median.unwrap_or(0.0))
        } else {
            (0.0, 0.0)
        };
        sizes.push(AggregateRow::new(
            vec![key("app", &c.app_id)],
            n,
            vec![("visits_per_week_mean", mean), ("visits_per_week_median", med)],
        ));
        for cat in [PoiCategory::Mall, PoiCategory::Fastfood] {
            let v = community_visitors(c, visits, Some(cat)).len() as u64;
            overlap.push(AggregateRow::new(
                vec![key("app", &c.app_id), key("category", cat.as_str())],
                v,
                vec![("pct_of_community", share_pct(v, n))],
            ));
        }
    }
    Ok((
        ctx.build("communities", &["app"], &["visits_per_week_mean", "visits_per_week_median"], sizes)?,
        ctx.build("community_visitors", &["app", "category"], &["pct_of_community"], overlap)?,
    ))
}

pub struct TowerReports {
    pub towers: Report,
    pub distances: Report,
    pub cdf: Report,
    pub opcounts: Report,
}

fn tower_key_of(r: &AppObservation) -> Option<TowerKey> {
    if r.conn_type == crate::ingest::ConnType::Wifi {
        return None;
    }
    r.cell_id.as_ref().map(|c| TowerKey {
        operator: r.operator.clone(),
        cell_id: c.clone(),
    })
}

pub fn tower_reports(
    ctx: &ReportContext,
    app: &[AppObservation],
    towers: &BTreeMap<TowerKey, TowerEstimate>,
) -> Result<TowerReports, ReportError> {
    let tower_rows = towers
        .values()
        .map(|t| {
            AggregateRow::new(
                vec![key("operator", &t.operator), key("cell_id", &t.cell_id), key("tech", t.tech.as_str())],
                t.n_uids,
                vec![
                    ("lat", t.position.lat),
                    ("lon", t.position.lon),
                    ("n_obs", t.n_obs as f64),
                    ("bbox_diag_km", t.bbox_diag_km),
                ],
            )
        })
        .collect();

    // distances grouped by the observation's tech, operator counts by the
    // tower's majority tech
    let mut samples: BTreeMap<(String, Tech), UsersAndValues> = BTreeMap::new();
    let mut op_users: BTreeMap<(String, Tech), BTreeSet<&UidHash>> = BTreeMap::new();
    for r in app {
        let Some(k) = tower_key_of(r) else { continue };
        let Some(t) = towers.get(&k) else { continue };
        let g = samples.entry((k.operator.clone(), r.tech)).or_default();
        g.0.insert(&r.uid);
        g.1.push(crate::model::haversine_km(r.pos, t.position));
        op_users.entry((k.operator, t.tech)).or_default().insert(&r.uid);
    }
    let edges = default_cdf_edges();
    let mut dist_rows = Vec::new();
    let mut cdf_rows = Vec::new();
    for ((op, tech), (users, d)) in &samples {
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let q = |p| quantile(d, p).expect("non-empty");
        dist_rows.push(AggregateRow::new(
            vec![key("operator", op), key("tech", tech.as_str())],
            users.len() as u64,
            vec![
                ("samples", d.len() as f64),
                ("mean_km", mean),
                ("median_km", q(0.5)),
                ("p95_km", q(0.95)),
                ("max_km", q(1.0)),
            ],
        ));
        for (edge, frac) in empirical_cdf(d, &edges).expect("non-empty samples, valid edges") {
            cdf_rows.push(AggregateRow::new(
                vec![key("operator", op), key("tech", tech.as_str()), key("edge_km", edge)],
                users.len() as u64,
                vec![("fraction", frac)],
            ));
        }
    }
    let mut cells: BTreeMap<(String, Tech), u64> = BTreeMap::new();
    for t in towers.values() {
        *cells.entry((t.operator.clone(), t.tech)).or_default() += 1;
    }
    let op_rows = cells
        .iter()
        .map(|((op, tech), n)| {
            let users = op_users.get(&(op.clone(), *tech)).map_or(0, BTreeSet::len);
            AggregateRow::new(vec![key("operator", op), key("tech", tech.as_str())], users as u64, vec![("cells", *n as f64)])
        })
        .collect();
    Ok(TowerReports {
        towers: ctx.build("towers", &["operator", "cell_id", "tech"], &["lat", "lon", "n_obs", "bbox_diag_km"], tower_rows)?,
        distances: ctx.build(
            "distances",
            &["operator", "tech"],
            &["samples", "mean_km", "median_km", "p95_km", "max_km"],
            dist_rows,
        )?,
        cdf: ctx.build("cdf", &["operator", "tech", "edge_km"], &["fraction"], cdf_rows)?,
        opcounts: ctx.build("opcounts", &["operator", "tech"], &["cells"], op_rows)?,
    })
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub uid_mode: UidMode,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            uid_mode: UidMode::Verbatim,
        }
    }
}

/// Everything a full run produces.
pub struct PipelineRun {
    pub reports: Vec<Report>,
    pub manifest: RunManifest,
}

/// Read inputs and run every stage in order.
pub fn run_pipeline(cfg: &PipelineConfig, inputs: &PipelineInputs, opts: &RunOptions) -> Result<PipelineRun, PipelineError> {
    let mut m = RunManifest::new(cfg, inputs);
    cfg.validate().map_err(|e| stage_err("config", e, &m))?;

    let (loc, loc_counts) = load_location(&inputs.location, &opts.uid_mode).map_err(|e| stage_err("ingest", e, &m))?;
    m.location = loc_counts;
    let (app_parts, app_counts) = load_app(&inputs.app, &opts.uid_mode).map_err(|e| stage_err("ingest", e, &m))?;
    m.app = app_counts;
    let census = match &inputs.census {
        Some(p) => Some(load_census_file(p).map_err(|e| stage_err("cohorts", e, &m))?),
        None => None,
    };
    m.districts = census.as_ref().map_or(0, |c| c.len() as u64);
    let pois = match &inputs.pois {
        Some(p) => load_pois_file(p).map_err(|e| stage_err("poi_apps", e, &m))?,
        None => Vec::new(),
    };
    m.pois = pois.len() as u64;

    // with app data present only users seen in both streams go on
    let joined: Option<BTreeSet<UidHash>> = (!app_parts.is_empty())
        .then(|| loc.keys().filter(|u| app_parts.contains_key(*u)).cloned().collect());
    let n_joined = joined.as_ref().map_or(loc.len(), BTreeSet::len);
    let app = flatten(app_parts);

    let stage = anchor_stage(&loc, joined.as_ref(), cfg).map_err(|e| stage_err("anchors", e, &m))?;
    let cohorts = cohort_stage(&stage, census.as_deref(), cfg);
    m.funnel = funnel(loc.len(), n_joined, &stage, &cohorts);

    let visits = visit_stage(&loc, &pois, cfg);
    m.visits = visits.len() as u64;
    let communities = community_stage(&app, cfg);
    let span = study_span_weeks(loc.values().flatten().map(|r| r.ts.epoch_seconds), cfg);

    let towers = estimate_towers(&app);
    m.towers = towers.len() as u64;

    let ctx = ReportContext::new(
        cfg,
        vec![
            ("location_records".into(), m.location.parsed),
            ("app_records".into(), m.app.parsed),
        ],
    );
    let build = |e: ReportError| e.to_string();
    let mut reports = Vec::new();
    let mut run = || -> Result<(), String> {
        reports.push(funnel_report(&ctx, &m.funnel).map_err(build)?);
        reports.push(anchor_report(&ctx, &stage).map_err(build)?);
        reports.push(cohort_report(&ctx, &cohorts).map_err(build)?);
        let (hist, hours) = work_hours_reports(&ctx, &stage, &cohorts, cfg).map_err(build)?;
        reports.extend([hist, hours]);
        reports.push(weekday_report(&ctx, &loc, cfg).map_err(build)?);
        reports.push(visit_report(&ctx, &visits, &cohorts).map_err(build)?);
        let (sizes, overlap) = community_reports(&ctx, &communities, &visits, span).map_err(build)?;
        reports.extend([sizes, overlap]);
        let t = tower_reports(&ctx, &app, &towers).map_err(build)?;
        reports.extend([t.towers, t.distances, t.cdf, t.opcounts]);
        Ok(())
    };
    run().map_err(|e| stage_err("privacy_report", e, &m))?;
    m.reports = reports
        .iter()
        .map(|r| ReportSummary {
            name: r.name.clone(),
            rows: r.rows.len() as u64,
            suppressed: r.meta.suppressed,
        })
        .collect();
    Ok(PipelineRun { reports, manifest: m })
}

/// Write every report as `<name>.<ext>` under `dir`.
pub fn write_reports(dir: &Path, reports: &[Report], format: ReportFormat) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut out = Vec::new();
    for r in reports {
        let p = dir.join(format!("{}.{}", r.name, format.extension()));
        emit_report(r, format, &p)?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), ReportError> {
    fs::write(path, manifest.to_json()).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, write_outputs, SynthConfig};

    fn city() -> SynthConfig {
        SynthConfig {
            n_users: 120,
            span_days: 42,
            conn_records_per_user: 10,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn empty_directory_is_a_clean_zero_run() {
        let tmp = tempfile::tempdir().unwrap();
        let inputs = PipelineInputs::from_dir(tmp.path());
        let run = run_pipeline(&PipelineConfig::default(), &inputs, &RunOptions::default()).unwrap();
        assert!(run.manifest.funnel.iter().all(|(_, n)| *n == 0));
        assert_eq!(run.manifest.location, InputCounts::default());
        assert!(run.reports.iter().all(|r| r.rows.is_empty()));
    }

    #[test]
    fn funnel_is_monotone_and_reports_are_k_safe() {
        let tmp = tempfile::tempdir().unwrap();
        let sc = city();
        let out = generate(&sc).unwrap();
        write_outputs(tmp.path(), &sc, &out).unwrap();
        let cfg = crate::synth::pipeline_config_for(&sc);
        let run = run_pipeline(&cfg, &PipelineInputs::from_dir(tmp.path()), &RunOptions::default()).unwrap();
        let f: Vec<u64> = run.manifest.funnel.iter().map(|(_, n)| *n).collect();
        assert_eq!(f[0], 120);
        assert!(f.windows(2).all(|w| w[0] >= w[1]), "{f:?}");
        for r in &run.reports {
            assert!(r.rows.iter().all(|row| row.count >= cfg.k_anonymity as u64), "{}", r.name);
        }
        assert_eq!(run.manifest.location.rejected, 0);
    }

    #[test]
    fn missing_file_names_the_stage() {
        let inputs = PipelineInputs {
            census: Some(PathBuf::from("/nonexistent/census.csv")),
            ..PipelineInputs::default()
        };
        let err = run_pipeline(&PipelineConfig::default(), &inputs, &RunOptions::default()).err().unwrap();
        assert!(err.to_string().starts_with("stage cohorts failed"));
        assert_eq!(err.manifest().districts, 0);
    }
}

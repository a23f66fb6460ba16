use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::time::{TimeWindow, WEEKDAY_NAMES};
use super::ModelError;

/// Place categories that visit detection knows how to bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PoiCategory {
    Mall,
    Fastfood,
    Other,
}

impl PoiCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            PoiCategory::Mall => "mall",
            PoiCategory::Fastfood => "fastfood",
            PoiCategory::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "mall" => Some(PoiCategory::Mall),
            "fastfood" => Some(PoiCategory::Fastfood),
            "other" => Some(PoiCategory::Other),
            _ => None,
        }
    }
}

/// Inclusive visit-duration bounds in minutes, per category.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitBounds(pub BTreeMap<PoiCategory, (u32, u32)>);

impl Default for VisitBounds {
    fn default() -> Self {
        let mut m = BTreeMap::new();
        m.insert(PoiCategory::Mall, (10, 360));
        m.insert(PoiCategory::Fastfood, (5, 120));
        VisitBounds(m)
    }
}

impl VisitBounds {
    /// Parse `mall=10:360,fastfood=5:120`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::BadValue {
            key: "visit_bounds".into(),
            value: text.to_string(),
        };
        let mut m = BTreeMap::new();
        for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (cat, range) = part.split_once('=').ok_or_else(bad)?;
            let cat = PoiCategory::parse(cat).ok_or_else(bad)?;
            let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
            let lo: u32 = lo.trim().parse().map_err(|_| bad())?;
            let hi: u32 = hi.trim().parse().map_err(|_| bad())?;
            if lo > hi {
                return Err(bad());
            }
            m.insert(cat, (lo, hi));
        }
        Ok(VisitBounds(m))
    }

    pub fn get(&self, cat: PoiCategory) -> Option<(u32, u32)> {
        self.0.get(&cat).copied()
    }

    fn render(&self) -> String {
        self.0
            .iter()
            .map(|(c, (lo, hi))| format!("{}={lo}:{hi}", c.as_str()))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Every tunable threshold of the analysis pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub anchor_resolution: f64,
    pub raw_resolution: f64,
    pub night_window: TimeWindow,
    pub workday_window: TimeWindow,
    /// Weekdays (Mon = 0) that count as workdays.
    pub workdays: [bool; 7],
    pub home_min_hours_per_night: f64,
    pub home_min_nights: u32,
    pub work_min_hours_per_day: f64,
    pub work_min_workdays: u32,
    pub consistent_min_days: u32,
    pub consistent_max_gap_days: u32,
    /// Minutes of silence that close a dwell.
    pub dwell_gap_max: u32,
    pub poor_income_max: u64,
    pub rich_income_min: u64,
    pub district_population_min: u64,
    pub app_min_invocations: u32,
    pub k_anonymity: u32,
    /// Fixed offset of local time from UTC, in seconds.
    pub utc_offset_secs: i64,
    pub visit_bounds: VisitBounds,
    /// Apps to build communities for in the full report; empty means every app seen.
    pub report_apps: Vec<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            anchor_resolution: 0.001,
            raw_resolution: 0.0001,
            night_window: TimeWindow {
                start_min: 22 * 60,
                end_min: 6 * 60,
            },
            workday_window: TimeWindow {
                start_min: 8 * 60,
                end_min: 18 * 60,
            },
            workdays: [true, true, true, true, true, false, false],
            home_min_hours_per_night: 2.0,
            home_min_nights: 15,
            work_min_hours_per_day: 4.0,
            work_min_workdays: 30,
            consistent_min_days: 30,
            consistent_max_gap_days: 7,
            dwell_gap_max: 30,
            poor_income_max: 45_000,
            rich_income_min: 75_000,
            district_population_min: 5000,
            app_min_invocations: 100,
            k_anonymity: 20,
            utc_offset_secs: 0,
            visit_bounds: VisitBounds::default(),
            report_apps: Vec::new(),
        }
    }
}

fn parse_workdays(text: &str) -> Option<[bool; 7]> {
    let idx = |s: &str| WEEKDAY_NAMES.iter().position(|n| n.eq_ignore_ascii_case(s.trim()));
    let mut days = [false; 7];
    for part in text.split(',').filter(|s| !s.trim().is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b) = (idx(a)?, idx(b)?);
                if a > b {
                    return None;
                }
                days[a..=b].iter_mut().for_each(|d| *d = true);
            }
            None => days[idx(part)?] = true,
        }
    }
    Some(days)
}

fn render_workdays(days: &[bool; 7]) -> String {
    WEEKDAY_NAMES
        .iter()
        .zip(days)
        .filter(|(_, on)| **on)
        .map(|(n, _)| *n)
        .collect::<Vec<_>>()
        .join(",")
}

impl PipelineConfig {
    /// Parse a `key = value` file on top of the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are an error.
    pub fn from_kv_str(text: &str) -> Result<Self, ModelError> {
        let mut cfg = PipelineConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ModelError::BadConfigLine(lineno + 1))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply a single override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ModelError> {
        let bad = || ModelError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
        };
        fn num<T: std::str::FromStr>(v: &str, bad: impl Fn() -> ModelError) -> Result<T, ModelError> {
            v.parse().map_err(|_| bad())
        }
        match key {
            "anchor_resolution" => self.anchor_resolution = num(value, bad)?,
            "raw_resolution" => self.raw_resolution = num(value, bad)?,
            "night_window" => self.night_window = TimeWindow::parse(value)?,
            "workday_window" => self.workday_window = TimeWindow::parse(value)?,
            "workdays" => self.workdays = parse_workdays(value).ok_or_else(bad)?,
            "home_min_hours_per_night" => self.home_min_hours_per_night = num(value, bad)?,
            "home_min_nights" => self.home_min_nights = num(value, bad)?,
            "work_min_hours_per_day" => self.work_min_hours_per_day = num(value, bad)?,
            "work_min_workdays" => self.work_min_workdays = num(value, bad)?,
            "consistent_min_days" => self.consistent_min_days = num(value, bad)?,
            "consistent_max_gap_days" => self.consistent_max_gap_days = num(value, bad)?,
            "dwell_gap_max" => self.dwell_gap_max = num(value, bad)?,
            "poor_income_max" => self.poor_income_max = num(value, bad)?,
            "rich_income_min" => self.rich_income_min = num(value, bad)?,
            "district_population_min" => self.district_population_min = num(value, bad)?,
            "app_min_invocations" => self.app_min_invocations = num(value, bad)?,
            "k_anonymity" => self.k_anonymity = num(value, bad)?,
            "utc_offset" => {
                let hours: f64 = num(value, bad)?;
                if !(-14.0..=14.0).contains(&hours) {
                    return Err(bad());
                }
                self.utc_offset_secs = (hours * 3600.0).round() as i64;
            }
            "visit_bounds" => self.visit_bounds = VisitBounds::parse(value)?,
            "report_apps" => {
                self.report_apps = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            _ => return Err(ModelError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive_counts = [
            ("home_min_nights", self.home_min_nights),
            ("work_min_workdays", self.work_min_workdays),
            ("consistent_min_days", self.consistent_min_days),
            ("dwell_gap_max", self.dwell_gap_max),
            ("app_min_invocations", self.app_min_invocations),
            ("k_anonymity", self.k_anonymity),
        ];
        for (key, v) in positive_counts {
            if v == 0 {
                return Err(ModelError::Invalid(format!("{key} must be positive")));
            }
        }
        if self.poor_income_max >= self.rich_income_min {
            return Err(ModelError::Invalid(
                "poor_income_max must be below rich_income_min".into(),
            ));
        }
        for (key, r) in [
            ("anchor_resolution", self.anchor_resolution),
            ("raw_resolution", self.raw_resolution),
        ] {
            if !(r.is_finite() && r > 0.0) {
                return Err(ModelError::Invalid(format!("{key} must be positive")));
            }
        }
        for (key, h) in [
            ("home_min_hours_per_night", self.home_min_hours_per_night),
            ("work_min_hours_per_day", self.work_min_hours_per_day),
        ] {
            if !(h.is_finite() && h >= 0.0) {
                return Err(ModelError::Invalid(format!("{key} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Canonical `key=value` rendering; parsing it back yields an equal config.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("anchor_resolution", self.anchor_resolution.to_string());
        kv("raw_resolution", self.raw_resolution.to_string());
        kv("night_window", self.night_window.to_string());
        kv("workday_window", self.workday_window.to_string());
        kv("workdays", render_workdays(&self.workdays));
        kv("home_min_hours_per_night", self.home_min_hours_per_night.to_string());
        kv("home_min_nights", self.home_min_nights.to_string());
        kv("work_min_hours_per_day", self.work_min_hours_per_day.to_string());
        kv("work_min_workdays", self.work_min_workdays.to_string());
        kv("consistent_min_days", self.consistent_min_days.to_string());
        kv("consistent_max_gap_days", self.consistent_max_gap_days.to_string());
        kv("dwell_gap_max", self.dwell_gap_max.to_string());
        kv("poor_income_max", self.poor_income_max.to_string());
        kv("rich_income_min", self.rich_income_min.to_string());
        kv("district_population_min", self.district_population_min.to_string());
        kv("app_min_invocations", self.app_min_invocations.to_string());
        kv("k_anonymity", self.k_anonymity.to_string());
        kv("utc_offset", (self.utc_offset_secs as f64 / 3600.0).to_string());
        kv("visit_bounds", self.visit_bounds.render());
        kv("report_apps", self.report_apps.join(","));
        s
    }

    /// Short digest of the canonical rendering, stamped into every report.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv_string().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn dwell_gap_secs(&self) -> i64 {
        self.dwell_gap_max as i64 * 60
    }

    pub fn to_local(&self, utc_seconds: i64) -> i64 {
        utc_seconds + self.utc_offset_secs
    }

    pub fn local_day(&self, utc_seconds: i64) -> i64 {
        super::time::day_of(self.to_local(utc_seconds))
    }
}

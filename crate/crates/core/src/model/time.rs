use std::fmt;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::ModelError;

pub const SECS_PER_HOUR: i64 = 3600;
pub const SECS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Precision {
    Second,
    Hour,
}

/// UTC instant with the precision its source recorded it at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeStamp {
    pub epoch_seconds: i64,
    pub precision: Precision,
}

impl TimeStamp {
    pub fn seconds(epoch_seconds: i64) -> Self {
        TimeStamp {
            epoch_seconds,
            precision: Precision::Second,
        }
    }

    pub fn hour(epoch_seconds: i64) -> Result<Self, ModelError> {
        if epoch_seconds.rem_euclid(SECS_PER_HOUR) != 0 {
            return Err(ModelError::NotHourAligned(epoch_seconds));
        }
        Ok(TimeStamp {
            epoch_seconds,
            precision: Precision::Hour,
        })
    }

    /// Parse an ISO-8601 UTC stamp such as `2015-03-04T07:31:22Z`.
    ///
    /// Explicit offsets (`+02:00`) are accepted and normalised to UTC.
    pub fn parse_utc(text: &str) -> Result<i64, ModelError> {
        if let Some(secs) = parse_zulu_fast(text.as_bytes()) {
            return Ok(secs);
        }
        DateTime::parse_from_rfc3339(text)
            .map(|dt| dt.timestamp())
            .or_else(|_| {
                NaiveDateTime::parse_from_str(text, "%Y-%m-%dT%H:%M:%SZ")
                    .map(|ndt| ndt.and_utc().timestamp())
            })
            .map_err(|_| ModelError::BadTimestamp(text.to_string()))
    }
}

impl PartialOrd for TimeStamp {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TimeStamp {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.epoch_seconds
            .cmp(&other.epoch_seconds)
            .then(self.precision.cmp(&other.precision))
    }
}

impl fmt::Display for TimeStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_utc(self.epoch_seconds))
    }
}

/// Canonical `YYYY-MM-DDTHH:MM:SSZ` rendering.
pub fn format_utc(epoch_seconds: i64) -> String {
    match DateTime::from_timestamp(epoch_seconds, 0) {
        Some(dt) => dt.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        None => epoch_seconds.to_string(),
    }
}

// Hot path for the canonical form; anything unusual falls back to chrono.
fn parse_zulu_fast(b: &[u8]) -> Option<i64> {
    if b.len() != 20 || b[4] != b'-' || b[7] != b'-' || b[10] != b'T' || b[13] != b':'
        || b[16] != b':' || b[19] != b'Z'
    {
        return None;
    }
    let num = |r: std::ops::Range<usize>| -> Option<u32> {
        let mut v = 0u32;
        for &c in &b[r] {
            if !c.is_ascii_digit() {
                return None;
            }
            v = v * 10 + (c - b'0') as u32;
        }
        Some(v)
    };
    let date = NaiveDate::from_ymd_opt(num(0..4)? as i32, num(5..7)?, num(8..10)?)?;
    let dt = date.and_hms_opt(num(11..13)?, num(14..16)?, num(17..19)?)?;
    Some(dt.and_utc().timestamp())
}

/// Day number (days since 1970-01-01) of a local-seconds value.
pub fn day_of(local_seconds: i64) -> i64 {
    local_seconds.div_euclid(SECS_PER_DAY)
}

/// Weekday of a day number, Monday = 0 ... Sunday = 6.
pub fn weekday_of_day(day: i64) -> usize {
    // 1970-01-01 was a Thursday
    (day + 3).rem_euclid(7) as usize
}

pub const WEEKDAY_NAMES: [&str; 7] = ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];

/// Daily local-time window in minutes after midnight. A window whose start is
/// after its end wraps past midnight and belongs to the day it starts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_min: u32,
    pub end_min: u32,
}

impl TimeWindow {
    pub fn new(start_min: u32, end_min: u32) -> Result<Self, ModelError> {
        if start_min >= 1440 || end_min > 1440 || start_min == end_min {
            return Err(ModelError::BadWindow(format!("{start_min}-{end_min}")));
        }
        Ok(TimeWindow { start_min, end_min })
    }

    /// Parse `HH:MM-HH:MM`.
    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bad = || ModelError::BadWindow(text.to_string());
        let (a, b) = text.split_once('-').ok_or_else(bad)?;
        let hm = |s: &str| -> Option<u32> {
            let (h, m) = s.trim().split_once(':')?;
            let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
            (h <= 24 && m < 60 && h * 60 + m <= 1440).then_some(h * 60 + m)
        };
        let start = hm(a).ok_or_else(bad)?;
        let end = hm(b).ok_or_else(bad)?;
        TimeWindow::new(start, end).map_err(|_| bad())
    }

    pub fn wraps(&self) -> bool {
        self.start_min > self.end_min
    }

    /// Local-seconds span `[start, end)` of the window instance owned by `day`.
    pub fn span_for_day(&self, day: i64) -> (i64, i64) {
        let base = day * SECS_PER_DAY;
        let start = base + self.start_min as i64 * 60;
        let end = if self.wraps() {
            base + SECS_PER_DAY + self.end_min as i64 * 60
        } else {
            base + self.end_min as i64 * 60
        };
        (start, end)
    }

    /// Split `[from, to)` (local seconds) into per-owning-day overlaps with this
    /// window. Days with zero overlap are omitted.
    pub fn overlaps(&self, from: i64, to: i64) -> Vec<(i64, i64)> {
        let mut out = Vec::new();
        if to <= from {
            return out;
        }
        // a wrapping window owned by day d can reach into d+1
        let first = day_of(from) - 1;
        let last = day_of(to - 1);
        for day in first..=last {
            let (ws, we) = self.span_for_day(day);
            let overlap = to.min(we) - from.max(ws);
            if overlap > 0 {
                out.push((day, overlap));
            }
        }
        out
    }
}

impl fmt::Display for TimeWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:02}:{:02}-{:02}:{:02}",
            self.start_min / 60,
            self.start_min % 60,
            self.end_min / 60,
            self.end_min % 60
        )
    }
}

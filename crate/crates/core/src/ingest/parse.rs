use std::collections::BTreeMap;
use std::io::Read;

use rayon::prelude::*;

use super::uid::{UidInterner, UidMode};
use super::{AppObservation, ConnType, ObservationRecord, ParseError, Tech, UidHash};
use crate::model::{format_utc, GeoPoint, TimeStamp};

pub const LOCATION_HEADER: &str = "uid,ts,lat,lon";
pub const APP_HEADER: &str =
    "uid,hour_ts,lat,lon,app_id,conn_type,operator,cell_id,tech,bytes_up,bytes_down";

/// Split a line into exactly `N` comma-separated fields.
fn fields<const N: usize>(line: &str) -> Result<[&str; N], ParseError> {
    let mut out = [""; N];
    let mut n = 0;
    for f in line.split(',') {
        if n < N {
            out[n] = f;
        }
        n += 1;
    }
    if n != N {
        return Err(ParseError::ColumnCount {
            expected: N,
            found: n,
        });
    }
    Ok(out)
}

fn parse_coord(text: &str, column: &'static str, lo: f64, hi: f64, hi_inclusive: bool) -> Result<f64, ParseError> {
    let v: f64 = text
        .trim()
        .parse()
        .map_err(|_| ParseError::BadNumber { column })?;
    if !v.is_finite() {
        return Err(ParseError::BadNumber { column });
    }
    let in_range = v >= lo && if hi_inclusive { v <= hi } else { v < hi };
    if !in_range {
        return Err(ParseError::OutOfRange { column });
    }
    Ok(v)
}

fn parse_pos(lat: &str, lon: &str) -> Result<GeoPoint, ParseError> {
    let lat = parse_coord(lat, "lat", -90.0, 90.0, true)?;
    let lon = parse_coord(lon, "lon", -180.0, 180.0, false)?;
    Ok(GeoPoint { lat, lon })
}

fn parse_bytes(text: &str, column: &'static str) -> Result<u64, ParseError> {
    let v: i64 = text
        .trim()
        .parse()
        .map_err(|_| ParseError::BadNumber { column })?;
    if v < 0 {
        return Err(ParseError::Negative { column });
    }
    Ok(v as u64)
}

fn clean(line: &str) -> &str {
    line.strip_suffix('\r').unwrap_or(line)
}

/// True for blank lines and the optional header row.
pub fn is_skippable(line: &str) -> bool {
    let line = clean(line).trim();
    line.is_empty() || line.starts_with("uid,")
}

struct LocationFields<'a> {
    uid: &'a str,
    ts: i64,
    pos: GeoPoint,
}

fn location_fields(line: &str) -> Result<LocationFields<'_>, ParseError> {
    let [uid, ts, lat, lon] = fields::<4>(clean(line))?;
    if uid.is_empty() {
        return Err(ParseError::BadUid);
    }
    let ts = TimeStamp::parse_utc(ts.trim()).map_err(|_| ParseError::BadTimestamp { column: "ts" })?;
    let pos = parse_pos(lat, lon)?;
    Ok(LocationFields { uid, ts, pos })
}

struct AppFields<'a> {
    uid: &'a str,
    ts: i64,
    pos: GeoPoint,
    app_id: &'a str,
    conn_type: ConnType,
    operator: &'a str,
    cell_id: &'a str,
    tech: Tech,
    bytes_up: u64,
    bytes_down: u64,
}

fn app_fields(line: &str) -> Result<AppFields<'_>, ParseError> {
    let [uid, ts, lat, lon, app_id, conn, operator, cell_id, tech, up, down] =
        fields::<11>(clean(line))?;
    if uid.is_empty() {
        return Err(ParseError::BadUid);
    }
    let ts = TimeStamp::parse_utc(ts.trim())
        .map_err(|_| ParseError::BadTimestamp { column: "hour_ts" })?;
    if ts.rem_euclid(3600) != 0 {
        return Err(ParseError::NotHourAligned);
    }
    let pos = parse_pos(lat, lon)?;
    let conn_type = ConnType::parse(conn).ok_or(ParseError::BadEnum { column: "conn_type" })?;
    let tech = Tech::parse(tech).ok_or(ParseError::BadEnum { column: "tech" })?;
    if conn_type == ConnType::Cellular && cell_id.is_empty() {
        return Err(ParseError::MissingCellId);
    }
    let bytes_up = parse_bytes(up, "bytes_up")?;
    let bytes_down = parse_bytes(down, "bytes_down")?;
    Ok(AppFields {
        uid,
        ts,
        pos,
        app_id,
        conn_type,
        operator,
        cell_id,
        tech,
        bytes_up,
        bytes_down,
    })
}

fn build_app(f: AppFields<'_>, uid: UidHash) -> AppObservation {
    let opt = |s: &str| (!s.is_empty()).then(|| s.to_string());
    AppObservation {
        uid,
        ts: TimeStamp {
            epoch_seconds: f.ts,
            precision: crate::model::Precision::Hour,
        },
        pos: f.pos,
        app_id: opt(f.app_id),
        conn_type: f.conn_type,
        operator: f.operator.to_string(),
        cell_id: opt(f.cell_id),
        tech: f.tech,
        bytes_up: f.bytes_up,
        bytes_down: f.bytes_down,
    }
}

/// Parse one location line whose uid column is already hashed.
pub fn parse_location_record(line: &str) -> Result<ObservationRecord, ParseError> {
    parse_location_record_with(line, &mut UidInterner::new(UidMode::Verbatim))
}

pub fn parse_location_record_with(
    line: &str,
    uids: &mut UidInterner,
) -> Result<ObservationRecord, ParseError> {
    let f = location_fields(line)?;
    Ok(ObservationRecord {
        uid: uids.resolve(f.uid)?,
        ts: TimeStamp::seconds(f.ts),
        pos: f.pos,
    })
}

/// Parse one application line whose uid column is already hashed.
pub fn parse_app_record(line: &str) -> Result<AppObservation, ParseError> {
    parse_app_record_with(line, &mut UidInterner::new(UidMode::Verbatim))
}

pub fn parse_app_record_with(line: &str, uids: &mut UidInterner) -> Result<AppObservation, ParseError> {
    let f = app_fields(line)?;
    let uid = uids.resolve(f.uid)?;
    Ok(build_app(f, uid))
}

pub fn format_location_record(r: &ObservationRecord) -> String {
    format!(
        "{},{},{},{}",
        r.uid,
        format_utc(r.ts.epoch_seconds),
        r.pos.lat,
        r.pos.lon
    )
}

pub fn format_app_record(r: &AppObservation) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{}",
        r.uid,
        format_utc(r.ts.epoch_seconds),
        r.pos.lat,
        r.pos.lon,
        r.app_id.as_deref().unwrap_or(""),
        r.conn_type.as_str(),
        r.operator,
        r.cell_id.as_deref().unwrap_or(""),
        r.tech.as_str(),
        r.bytes_up,
        r.bytes_down
    )
}

/// Rejected-line tallies keyed by error class.
pub type RejectCounts = BTreeMap<String, u64>;

/// Result of parsing a whole input stream.
#[derive(Debug, Clone)]
pub struct ParseOutcome<T> {
    pub records: Vec<T>,
    /// Non-blank, non-header lines seen.
    pub lines: u64,
    pub rejected: RejectCounts,
}

impl<T> Default for ParseOutcome<T> {
    fn default() -> Self {
        ParseOutcome {
            records: Vec::new(),
            lines: 0,
            rejected: RejectCounts::new(),
        }
    }
}

impl<T> ParseOutcome<T> {
    pub fn rejected_total(&self) -> u64 {
        self.rejected.values().sum()
    }

    pub fn absorb(&mut self, other: ParseOutcome<T>) {
        self.records.extend(other.records);
        self.lines += other.lines;
        for (k, v) in other.rejected {
            *self.rejected.entry(k).or_default() += v;
        }
    }
}

/// One input schema: split a line into borrowed fields, then finish the
/// record once its uid has been resolved.
trait LineSchema: Sync {
    type Fields<'a>: Send;
    type Record: Send;
    fn fields<'a>(line: &'a str) -> Result<Self::Fields<'a>, ParseError>;
    fn uid<'f>(f: &'f Self::Fields<'_>) -> &'f str;
    fn finish(f: Self::Fields<'_>, uid: UidHash) -> Self::Record;
}

struct LocationSchema;

impl LineSchema for LocationSchema {
    type Fields<'a> = LocationFields<'a>;
    type Record = ObservationRecord;
    fn fields<'a>(line: &'a str) -> Result<LocationFields<'a>, ParseError> {
        location_fields(line)
    }
    fn uid<'f>(f: &'f LocationFields<'_>) -> &'f str {
        f.uid
    }
    fn finish(f: LocationFields<'_>, uid: UidHash) -> ObservationRecord {
        ObservationRecord {
            uid,
            ts: TimeStamp::seconds(f.ts),
            pos: f.pos,
        }
    }
}

struct AppSchema;

impl LineSchema for AppSchema {
    type Fields<'a> = AppFields<'a>;
    type Record = AppObservation;
    fn fields<'a>(line: &'a str) -> Result<AppFields<'a>, ParseError> {
        app_fields(line)
    }
    fn uid<'f>(f: &'f AppFields<'_>) -> &'f str {
        f.uid
    }
    fn finish(f: AppFields<'_>, uid: UidHash) -> AppObservation {
        build_app(f, uid)
    }
}

const CHUNK_BYTES: usize = 8 << 20;

/// Read `reader` in blocks, parse lines in parallel, and resolve uids
/// sequentially so record order always follows input order.
fn parse_stream<S: LineSchema, R: Read>(
    mut reader: R,
    uids: &mut UidInterner,
) -> std::io::Result<ParseOutcome<S::Record>> {
    let mut out = ParseOutcome::default();
    let mut buf: Vec<u8> = Vec::with_capacity(CHUNK_BYTES + 4096);
    let mut eof = false;
    while !eof {
        let start = buf.len();
        buf.resize(start + CHUNK_BYTES, 0);
        let mut filled = start;
        while filled < buf.len() {
            let n = reader.read(&mut buf[filled..])?;
            if n == 0 {
                eof = true;
                break;
            }
            filled += n;
        }
        buf.truncate(filled);
        let cut = if eof {
            buf.len()
        } else {
            match buf.iter().rposition(|&b| b == b'\n') {
                Some(i) => i + 1,
                // a single line longer than the chunk; keep reading
                None => continue,
            }
        };
        let block = String::from_utf8_lossy(&buf[..cut]);
        let lines: Vec<&str> = block.split('\n').filter(|l| !is_skippable(l)).collect();
        let parsed: Vec<_> = lines.par_iter().map(|l| S::fields(l)).collect();
        out.lines += lines.len() as u64;
        for p in parsed {
            let rec = p.and_then(|f| {
                let uid = uids.resolve(S::uid(&f))?;
                Ok(S::finish(f, uid))
            });
            match rec {
                Ok(rec) => out.records.push(rec),
                Err(e) => *out.rejected.entry(e.class().to_string()).or_default() += 1,
            }
        }
        drop(block);
        buf.drain(..cut);
    }
    Ok(out)
}

pub fn parse_location_stream<R: Read>(
    reader: R,
    uids: &mut UidInterner,
) -> std::io::Result<ParseOutcome<ObservationRecord>> {
    parse_stream::<LocationSchema, R>(reader, uids)
}

pub fn parse_app_stream<R: Read>(
    reader: R,
    uids: &mut UidInterner,
) -> std::io::Result<ParseOutcome<AppObservation>> {
    parse_stream::<AppSchema, R>(reader, uids)
}

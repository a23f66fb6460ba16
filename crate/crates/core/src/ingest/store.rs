//! The partitioned store: a directory of `part-XX.csv` files, one per uid
//! prefix, each holding its users' records sorted by (uid, time) in the same
//! CSV schema as the raw input. Writing the same partitions twice produces
//! byte-identical files.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::parse::{format_app_record, format_location_record, ParseOutcome};
use super::{
    parse_app_stream, parse_location_stream, AppObservation, IngestError, ObservationRecord,
    UidHash, UidInterner, UidMode, APP_HEADER, LOCATION_HEADER,
};

const META_FILE: &str = "store.meta";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Location,
    App,
}

impl StoreKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            StoreKind::Location => "location",
            StoreKind::App => "app",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "location" => Some(StoreKind::Location),
            "app" => Some(StoreKind::App),
            _ => None,
        }
    }

    fn header(&self) -> &'static str {
        match self {
            StoreKind::Location => LOCATION_HEADER,
            StoreKind::App => APP_HEADER,
        }
    }
}

fn prefix(uid: &UidHash) -> &str {
    let s = uid.as_str();
    &s[..s.len().min(2)]
}

fn write_parts<R>(
    dir: &Path,
    kind: StoreKind,
    parts: &BTreeMap<UidHash, Vec<R>>,
    line: impl Fn(&R) -> String,
    meta: &[(String, String)],
) -> Result<(), IngestError> {
    fs::create_dir_all(dir).map_err(|e| IngestError::io(dir, e))?;
    // clear a previous store so stale prefixes don't linger
    for entry in fs::read_dir(dir).map_err(|e| IngestError::io(dir, e))? {
        let path = entry.map_err(|e| IngestError::io(dir, e))?.path();
        if is_part_file(&path) || path.file_name().is_some_and(|n| n == META_FILE) {
            fs::remove_file(&path).map_err(|e| IngestError::io(&path, e))?;
        }
    }

    let mut current: Option<(String, BufWriter<fs::File>, PathBuf)> = None;
    let mut records = 0usize;
    for (uid, recs) in parts {
        let p = prefix(uid);
        if current.as_ref().map(|(cp, _, _)| cp.as_str()) != Some(p) {
            if let Some((_, mut w, path)) = current.take() {
                w.flush().map_err(|e| IngestError::io(&path, e))?;
            }
            let path = dir.join(format!("part-{p}.csv"));
            let f = fs::File::create(&path).map_err(|e| IngestError::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{}", kind.header()).map_err(|e| IngestError::io(&path, e))?;
            current = Some((p.to_string(), w, path));
        }
        let (_, w, path) = current.as_mut().expect("writer opened above");
        for r in recs {
            writeln!(w, "{}", line(r)).map_err(|e| IngestError::io(&*path, e))?;
        }
        records += recs.len();
    }
    if let Some((_, mut w, path)) = current.take() {
        w.flush().map_err(|e| IngestError::io(&path, e))?;
    }

    let mut text = format!(
        "kind={}\nusers={}\nrecords={}\n",
        kind.as_str(),
        parts.len(),
        records
    );
    for (k, v) in meta {
        text.push_str(&format!("{k}={v}\n"));
    }
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, text).map_err(|e| IngestError::io(&meta_path, e))
}

/// Write a store. `R` must be [`ObservationRecord`] for `StoreKind::Location`
/// and [`AppObservation`] for `StoreKind::App`; `meta` lines are appended to
/// `store.meta` verbatim.
pub fn write_store<R: StoreLine>(
    dir: &Path,
    parts: &BTreeMap<UidHash, Vec<R>>,
    meta: &[(String, String)],
) -> Result<(), IngestError> {
    write_parts(dir, R::KIND, parts, R::line, meta)
}

/// Records that can be written into a store.
pub trait StoreLine {
    const KIND: StoreKind;
    fn line(&self) -> String;
}

impl StoreLine for ObservationRecord {
    const KIND: StoreKind = StoreKind::Location;
    fn line(&self) -> String {
        format_location_record(self)
    }
}

impl StoreLine for AppObservation {
    const KIND: StoreKind = StoreKind::App;
    fn line(&self) -> String {
        format_app_record(self)
    }
}

fn is_part_file(path: &Path) -> bool {
    path.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.starts_with("part-") && n.ends_with(".csv"))
}

/// The kind recorded in a store's metadata.
pub fn read_store_kind(dir: &Path) -> Result<StoreKind, IngestError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path)
        .map_err(|_| IngestError::NotAStore(dir.display().to_string()))?;
    text.lines()
        .find_map(|l| l.strip_prefix("kind="))
        .and_then(StoreKind::parse)
        .ok_or_else(|| IngestError::NotAStore(dir.display().to_string()))
}

/// Expand inputs: a store directory becomes its sorted part files (uids
/// already hashed), a plain file is read with the caller's uid mode.
fn expand(paths: &[PathBuf], expected: StoreKind) -> Result<Vec<(PathBuf, bool)>, IngestError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let kind = read_store_kind(p)?;
            if kind != expected {
                return Err(IngestError::StoreKind {
                    path: p.display().to_string(),
                    found: kind.as_str().into(),
                    expected: expected.as_str().into(),
                });
            }
            let mut parts: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| IngestError::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|path| is_part_file(path))
                .collect();
            parts.sort();
            out.extend(parts.into_iter().map(|p| (p, true)));
        } else {
            out.push((p.clone(), false));
        }
    }
    Ok(out)
}

fn read_inputs<T>(
    paths: &[PathBuf],
    kind: StoreKind,
    mode: &UidMode,
    parse: impl Fn(fs::File, &mut UidInterner) -> std::io::Result<ParseOutcome<T>>,
) -> Result<ParseOutcome<T>, IngestError> {
    let mut raw = UidInterner::new(mode.clone());
    let mut stored = UidInterner::new(UidMode::Verbatim);
    let mut out = ParseOutcome::default();
    for (path, from_store) in expand(paths, kind)? {
        let f = fs::File::open(&path).map_err(|e| IngestError::io(&path, e))?;
        let uids = if from_store { &mut stored } else { &mut raw };
        out.absorb(parse(f, uids).map_err(|e| IngestError::io(&path, e))?);
    }
    Ok(out)
}

/// Parse location inputs (raw CSV files or store directories), in path order.
pub fn read_location_inputs(
    paths: &[PathBuf],
    mode: &UidMode,
) -> Result<ParseOutcome<ObservationRecord>, IngestError> {
    read_inputs(paths, StoreKind::Location, mode, parse_location_stream)
}

/// Parse application inputs (raw CSV files or store directories), in path order.
pub fn read_app_inputs(
    paths: &[PathBuf],
    mode: &UidMode,
) -> Result<ParseOutcome<AppObservation>, IngestError> {
    read_inputs(paths, StoreKind::App, mode, parse_app_stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::partition_by_user;

    const RAW: &str = "uid,ts,lat,lon\n\
        PHONE1,2015-03-04T07:31:22Z,34.0522,-118.2437\n\
        PHONE2,2015-03-04T07:30:00Z,34.1,-118.3\n\
        PHONE1,2015-03-04T07:00:00Z,34.0521,-118.2436\n";

    #[test]
    fn store_round_trip_is_bit_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let raw = tmp.path().join("raw.csv");
        fs::write(&raw, RAW).unwrap();
        let mode = UidMode::Salted("k".into());
        let parsed = read_location_inputs(std::slice::from_ref(&raw), &mode).unwrap();
        assert_eq!(parsed.records.len(), 3);
        let parts = partition_by_user(parsed.records);

        let store = tmp.path().join("store");
        write_store(&store, &parts, &[]).unwrap();
        assert_eq!(read_store_kind(&store).unwrap(), StoreKind::Location);
        let first: Vec<(PathBuf, Vec<u8>)> = snapshot(&store);

        // reading back (salt is ignored for stored, already hashed uids)
        let back = read_location_inputs(std::slice::from_ref(&store), &mode).unwrap();
        let back_parts = partition_by_user(back.records);
        assert_eq!(back_parts, parts);

        write_store(&store, &back_parts, &[]).unwrap();
        assert_eq!(snapshot(&store), first);
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let parts: BTreeMap<UidHash, Vec<ObservationRecord>> = BTreeMap::new();
        write_store(tmp.path(), &parts, &[]).unwrap();
        let err = read_app_inputs(&[tmp.path().to_path_buf()], &UidMode::Verbatim).unwrap_err();
        assert!(matches!(err, IngestError::StoreKind { .. }));
        let missing = tmp.path().join("nope");
        fs::create_dir(&missing).unwrap();
        assert!(matches!(
            read_location_inputs(&[missing], &UidMode::Verbatim),
            Err(IngestError::NotAStore(_))
        ));
    }

    fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut v: Vec<_> = fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                let bytes = fs::read(&p).unwrap();
                (p, bytes)
            })
            .collect();
        v.sort();
        v
    }
}

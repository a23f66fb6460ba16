//! Parsing, validation, identifier hashing and per-user partitioning of the
//! two raw record streams.

mod parse;
mod partition;
mod store;
mod uid;

use thiserror::Error;

use crate::model::{GeoPoint, TimeStamp};

pub use parse::{
    format_app_record, format_location_record, is_skippable, parse_app_record, parse_app_record_with,
    parse_app_stream, parse_location_record, parse_location_record_with, parse_location_stream,
    ParseOutcome, RejectCounts, APP_HEADER, LOCATION_HEADER,
};
pub use partition::{partition_by_user, partition_in_pool, UserRecord};
pub use store::{read_app_inputs, read_location_inputs, read_store_kind, write_store, StoreKind, StoreLine};
pub use uid::{hash_uid, UidHash, UidInterner, UidMode, UID_HEX_LEN};

/// One second-precision position fix.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub uid: UidHash,
    pub ts: TimeStamp,
    pub pos: GeoPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConnType {
    Cellular,
    Wifi,
    Other,
}

impl ConnType {
    pub fn as_str(&self) -> &'static str {
        match self {
            ConnType::Cellular => "cellular",
            ConnType::Wifi => "wifi",
            ConnType::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "cellular" => Some(ConnType::Cellular),
            "wifi" => Some(ConnType::Wifi),
            "other" => Some(ConnType::Other),
            _ => None,
        }
    }
}

/// Radio access technology of a cellular connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tech {
    Lte,
    G3,
    Other,
}

impl Tech {
    pub fn as_str(&self) -> &'static str {
        match self {
            Tech::Lte => "LTE",
            Tech::G3 => "3G",
            Tech::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "LTE" => Some(Tech::Lte),
            "3G" => Some(Tech::G3),
            "other" => Some(Tech::Other),
            _ => None,
        }
    }
}

/// One hour-bucketed application/connection measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct AppObservation {
    pub uid: UidHash,
    pub ts: TimeStamp,
    pub pos: GeoPoint,
    pub app_id: Option<String>,
    pub conn_type: ConnType,
    pub operator: String,
    pub cell_id: Option<String>,
    pub tech: Tech,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

/// Why a single input line was rejected.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
    #[error("malformed timestamp in column {column}")]
    BadTimestamp { column: &'static str },
    #[error("hour_ts is not a whole hour")]
    NotHourAligned,
    #[error("column {column} is not a number")]
    BadNumber { column: &'static str },
    #[error("column {column} out of range")]
    OutOfRange { column: &'static str },
    #[error("column {column} must be non-negative")]
    Negative { column: &'static str },
    #[error("uid column is empty or not a hashed identifier")]
    BadUid,
    #[error("column {column} has an unknown value")]
    BadEnum { column: &'static str },
    #[error("cellular record without cell_id")]
    MissingCellId,
}

impl ParseError {
    /// Stable name used when tallying rejects.
    pub fn class(&self) -> &'static str {
        match self {
            ParseError::ColumnCount { .. } => "column_count",
            ParseError::BadTimestamp { .. } => "timestamp",
            ParseError::NotHourAligned => "hour_alignment",
            ParseError::BadNumber { .. } => "number",
            ParseError::OutOfRange { .. } => "range",
            ParseError::Negative { .. } => "negative",
            ParseError::BadUid => "uid",
            ParseError::BadEnum { .. } => "enum",
            ParseError::MissingCellId => "missing_cell_id",
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("raw identifier is empty")]
    EmptyRawId,
    #[error("{0:?} is not a hashed identifier")]
    BadUid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} is not a partitioned store")]
    NotAStore(String),
    #[error("store {path} holds {found} records, expected {expected}")]
    StoreKind {
        path: String,
        found: String,
        expected: String,
    },
}

impl IngestError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        IngestError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

//! Domain types and the geodesic, grid and clock arithmetic every other
//! module builds on.

mod config;
mod geo;
mod time;

use thiserror::Error;

pub use config::{PipelineConfig, PoiCategory, VisitBounds};
pub use geo::{centroid, haversine_km, km_per_degree, quantize, GeoPoint, GridCell, EARTH_RADIUS_KM};
pub use time::{
    day_of, format_utc, weekday_of_day, Precision, TimeStamp, TimeWindow, SECS_PER_DAY,
    SECS_PER_HOUR, WEEKDAY_NAMES,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("coordinate is not finite")]
    NonFinite,
    #[error("latitude {0} outside [-90, 90]")]
    LatOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180)")]
    LonOutOfRange(f64),
    #[error("grid resolution {0} must be positive")]
    BadResolution(f64),
    #[error("empty input")]
    EmptyInput,
    #[error("timestamp {0} is not a whole hour")]
    NotHourAligned(i64),
    #[error("malformed timestamp {0:?}")]
    BadTimestamp(String),
    #[error("malformed time window {0:?}")]
    BadWindow(String),
    #[error("config line {0} is not key=value")]
    BadConfigLine(usize),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

//! Mining geo-temporal smartphone measurement logs: home and work anchors,
//! income cohorts, POI visits, app communities, cell-tower localization and
//! k-anonymous aggregate reports, plus a synthetic city to check it all
//! against.

pub mod ingest;
pub mod model;
pub mod anchors;
pub mod cohorts;
pub mod poi_apps;
pub mod towers;
pub mod report;
pub mod synth;
pub mod pipeline;

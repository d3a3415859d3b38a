//! Measurement toolkit for client-side web traffic of scripted user
//! journeys: capture or ingest HTTP flows, classify them into
//! resource-usage categories, compute corporate and tracking network
//! overheads against a sufficiency baseline, and convert overhead rates
//! into annual CO₂e lower bounds.

pub mod analytics;
pub mod carbon;
pub mod classify;
pub mod cookies;
pub mod flow;
pub mod har;
pub mod journey;
pub mod proxy;
pub mod store;

pub use flow::{Category, Cookie, FlowId, FlowUrl, HttpFlow, JourneyRun, RunId};

/// Tool version, embedded in provenance blocks.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

//! Commute-flow estimation from phone GPS pings.
//!
//! The pipeline turns raw pings into tract-to-tract average-daily
//! home-to-work flows: stay-point extraction, complete-linkage stay
//! regions, home/work inference, trip aggregation, and validation
//! against a reference flow table. A seeded synthetic world provides
//! planted ground truth for end-to-end checks.

pub mod config;
pub mod error;
pub mod geo;
pub mod geojson;
pub mod ingest;
pub mod par;
pub mod pipeline;
pub mod places;
pub mod region;
pub mod routing;
pub mod stay;
pub mod synth;
pub mod trips;
pub mod validate;

pub use error::{Error, Result};

//! Data preparation, evaluation and baseline models for a hexagonal-grid
//! geospatial benchmark.

pub mod baselines;
pub mod embed;
pub mod hexgrid;
pub mod ingest;
pub mod metrics;
pub mod regionize;
pub mod splitter;
pub mod synthdata;
pub mod trajprep;

pub use hexgrid::{CellId, DirectionLabel, GeoPoint, GridError};

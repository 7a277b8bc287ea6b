//! Spatio-temporal graph forecasting of county-level daily case counts.
//!
//! The pipeline is:
//!
//! 1. [`synth`] generates coupled case/trip/trend data (or real files are used),
//! 2. [`dp_mobility`] turns trip records into privatized weekly flow counts,
//! 3. [`data_ingest`] parses case, trend and flow tables and assembles node features,
//! 4. [`st_graph`] builds one normalized county adjacency layer per day,
//! 5. [`gnn_model`] trains the skip-connection graph convolution model,
//! 6. [`baselines`] and [`evaluation`] score it against naive and ARIMA forecasts.
//!
//! Data-parallel loops go through [`exec`], which runs on rayon when the
//! `parallel` feature is enabled and falls back to plain iteration otherwise.

pub mod baselines;
pub mod data_ingest;
pub mod days;
pub mod dp_mobility;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod gnn_model;
pub mod numerics;
pub mod st_graph;
pub mod synth;

pub use days::{DaySpan, Fips};
pub use error::{Error, Result};
pub use exec::Execution;

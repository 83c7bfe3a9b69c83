//! Linear-time state-space forecaster for multivariate KPI telemetry.
//!
//! Data flows through [`telemetry`] (windows, splits, scalers), into a
//! [`model::LiqssModel`] trained by [`train::fit`] and scored by
//! [`metrics::evaluate_test`].

pub mod bench;
pub mod blocks;
pub mod config;
pub mod error;
pub mod metrics;
pub mod model;
pub mod ssm;
pub mod tape;
pub mod telemetry;
pub mod train;
pub mod tt;

pub use error::{ErrorKind, LiqssError, Result};

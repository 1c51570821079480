//! EV charging resilience pipeline.
//!
//! Station telemetry is turned into a monotone deliverability table, which is
//! injected into a zone-hour demand panel through a quantile-aligned pressure
//! map. A graph forecaster predicts demand and service loss, a backlog
//! simulator stresses the forecast under policy interventions, and the
//! resulting EV load is coupled to a distribution transformer.

pub mod deliverability;
pub mod error;
pub mod forecast;
pub mod grid;
pub mod injection;
pub mod io;
pub mod panel;
pub mod pipeline;
pub mod resilience;
pub mod seed;
pub mod stats;
pub mod synth;

pub use error::{Error, Result};

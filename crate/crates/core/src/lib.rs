//! Irregular traffic time series forecasting.
//!
//! Traffic at signalized intersections is recorded per signal cycle: each
//! measurement has a begin time, a cycle length and a flow count. This crate
//! generates synthetic cycle data, encodes it with an asynchronous graph
//! diffusion layer and a time-aware convolution, and forecasts future
//! cycles with a stepwise predictor.

pub mod agdn;
pub mod autograd;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod sapn;
pub mod synthgen;
pub mod time_encoding;
pub mod training;
pub mod ttcn;

pub use error::{Error, Result};

//! Soil-monitoring sensor network: mote simulation, gateway download
//! protocol, data pipeline, energy model and analysis cube.

// `!(x > 0.0)` is used throughout so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod collector;
pub mod config;
pub mod cube;
pub mod energy;
pub mod mote;
pub mod pipeline;
pub mod registry;
pub mod report;
pub mod scenario;

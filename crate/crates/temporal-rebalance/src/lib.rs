//! Trace files, reports and experiment commands around
//! [`temporal_rebalance_core`].

pub mod config;
pub mod error;
pub mod harness;
pub mod report;
pub mod toy;
pub mod trace;

pub use error::{Error, Result};
pub use temporal_rebalance_core as core;

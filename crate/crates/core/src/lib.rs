//! Threshold batching (WAIT and Nested WAIT) for LLM inference under a KV
//! cache memory limit, with a discrete-event simulator, FCFS baselines and
//! stochastic oracles.

pub mod cli;
pub mod engine;
pub mod error;
pub mod fluid;
pub mod metrics;
pub mod oracle;
pub mod policy;
pub mod scenario;
pub mod schedulers;
pub mod workload;

pub use error::{Error, Result};

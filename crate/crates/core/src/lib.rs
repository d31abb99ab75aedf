//! Deterministic, trace-driven simulator for replicated notebook kernels on
//! an oversubscribed GPU cluster.

pub mod billing;
pub mod cluster;
pub mod config;
pub mod datastore;
pub mod kernel;
pub mod metrics;
pub mod platform;
pub mod policies;
pub mod raft;
pub mod scheduler;
pub mod sim;
pub mod workload;

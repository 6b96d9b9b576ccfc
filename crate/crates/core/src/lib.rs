//! Troubleshooting-guide execution: parsing, DAG extraction, query
//! preparation, shared memory, plugins, the parallel executor, linting and
//! the measurement harness.

pub mod dag;
pub mod memory;
pub mod plugins;
pub mod qpp;
pub mod tsg;
pub mod engine;
pub mod harness;
pub mod lint;

//! Scenario runner library behind the `fluidq` binary: config schema, task
//! dispatch and trajectory comparison.

pub mod compare;
pub mod runner;
pub mod scenario;

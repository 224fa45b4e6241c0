//! Experiment drivers and artifact pipeline behind the `pbdw` binary.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod test1;
pub mod test2;

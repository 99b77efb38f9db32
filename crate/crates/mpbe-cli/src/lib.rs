//! Configuration, pipeline orchestration and sweeps behind the `mpbe` binary.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod sweep;

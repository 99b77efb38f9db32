//! Synthesis and data-driven rediscovery of two-dimensional breakage
//! population balances.
//!
//! The crate covers the full chain: fixed-pivot data generation
//! ([`forward_solver`]), exact DMD diagnostics ([`dmd`]), candidate libraries
//! ([`library`]), constrained sequential thresholding ([`sparse_regression`]),
//! bootstrap ensembles ([`ensemble`]) and model screening
//! ([`selection_metrics`]).

pub mod dmd;
pub mod ensemble;
pub mod forward_solver;
pub mod griddata;
pub mod library;
pub mod selection_metrics;
pub mod sparse_regression;

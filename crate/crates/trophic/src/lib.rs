//! Experiment harness, file formats and command-line front end for the
//! `trophic-core` networks.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod harness;
pub mod metrics;
pub mod plot;
pub mod suite;

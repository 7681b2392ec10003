//! HTTP service and command line for sketch-conditioned generation.

pub mod api;
pub mod cli;

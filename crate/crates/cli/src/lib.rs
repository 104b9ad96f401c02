//! Command-line harness around the controller crate: scenario definitions,
//! randomized-state benchmarking, map generation, and detector training.

pub mod benchmark;
pub mod maps;
pub mod sbdtool;
pub mod scenarios;
pub mod simulate;

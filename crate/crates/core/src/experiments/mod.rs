//! Dataset synthesis, training stages, persistence and experiment orchestration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod plot;
pub mod report;
pub mod suite;
pub mod train;

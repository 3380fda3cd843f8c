//! Conformal prediction sets with group-conditional coverage, plus a fairness
//! audit of the resulting sets.
//!
//! The pipeline is: ingest a [`data::ScoreTable`] of classifier outputs, split
//! it, fit a [`calibration::CalibratedPredictor`] on the calibration half,
//! build [`prediction::PredictionSet`]s for the test half, and summarize them
//! with [`metrics`]. [`synth`] produces seeded tables with controllable group
//! shift for testing the whole chain.

pub mod calibration;
pub mod cli;
pub mod data;
pub mod metrics;
pub mod prediction;
pub mod scoring;
pub mod synth;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

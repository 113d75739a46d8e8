//! Parasite detection with structured morphological explanations.
//!
//! A DETR-style decoder predicts, for every object query and every decoder
//! layer, a box, a species score and five morphological attributes from the
//! same query features. Training supervises every layer; inference reads the
//! last one and renders each detection as a short report.

pub mod app;
pub mod datagen;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod reporting;
pub mod schema;

pub use error::{Error, Result};

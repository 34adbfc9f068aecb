//! Household purchase panels to individual contaminant intakes, and the
//! kinetic body-burden model built on them.

pub mod design;
pub mod error;
pub mod exposure;
pub mod inference;
pub mod ingest;
pub mod mixed;
pub mod model;
pub mod report;
pub mod spline;
pub mod synth;

pub use error::{KdemError, Result};

//! Re-entrant vision-transformer inference and label-efficient classification.

pub mod backbone;
pub mod cli;
pub mod error;
pub mod evalsel;
pub mod ingest;
pub mod model_io;
pub mod reduce;
pub mod semisup;

pub use error::{Error, Result};

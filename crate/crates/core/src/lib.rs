//! Detection re-scoring from image-text embedding similarity, a
//! background-aware negative loss with its numerical checks, and the
//! few-shot COCO data tooling around them (k-shot sampling,
//! missing-annotation counts, AP evaluation).

pub mod bnrl;
pub mod cocoio;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod fmt;
pub mod pipeline;
pub mod plot;
pub mod prompt;
pub mod rescore;
pub mod results;
pub mod synth;
pub mod types;

pub use error::{Error, Result};

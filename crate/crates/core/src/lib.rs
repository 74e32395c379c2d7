//! Recurrent captioning model with a recurrent visual memory.
//!
//! A single network both generates sentences from visual feature vectors and
//! reconstructs visual feature vectors from sentences. The word-prediction half
//! (`s`) and the reconstruction half (`u`) meet only at the word layer, so the
//! same trained parameters serve captioning, text-based image search and
//! sentence search.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod numkit;
pub mod training;

pub use error::{Error, Result};

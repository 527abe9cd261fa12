//! End-to-end visual information extraction: text detection and
//! recognition, instance-entity contrast, and character-level CRF tagging.

pub mod cfam;
pub mod datamodel;
pub mod error;
pub mod evaluation;
pub mod extraction;
pub mod features;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod recognizer;
pub mod synthgen;

pub use error::{Error, Result};

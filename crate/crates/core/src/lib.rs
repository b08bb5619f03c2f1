//! Input-aware attention skipping for ViT inference.
//!
//! The pipeline picks, for every effort level (number of active attention
//! modules), the skip pattern whose skipped attentions are most redundant by
//! CKA; routes inputs between a low- and a high-effort model by normalized
//! prediction entropy; and searches effort pairs against a delay target using
//! a systolic-array cycle model.

pub mod error;
pub mod pathfinder;
pub mod router;
pub mod search;
pub mod sim;
pub mod similarity;
pub mod vit;

pub use error::{Error, Result};

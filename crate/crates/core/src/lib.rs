//! False-negative detection for contrastive learning with learned per-anchor
//! similarity thresholds, plus the global contrastive loss that consumes them.

pub mod bimodal;
pub mod cli;
pub mod contrastive;
pub mod encoder;
pub mod error;
pub mod frozen;
pub mod metrics;
pub mod numkit;
pub mod optim;
pub mod seeding;
pub mod synthdata;
pub mod threshold;
pub mod train;

pub use error::{Error, Result};
pub use numkit::{Mask, Matrix, SimilarityBlock};

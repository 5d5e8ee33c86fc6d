//! Self-supervised Sim2Real adaptation for semantic segmentation.
//!
//! A miniature encoder–decoder is trained with cross-entropy on an annotated
//! synthetic domain while its dense feature head is regularized on an
//! unannotated real domain. The regularizer pools dense features over
//! precomputed, possibly overlapping segment masks and combines a
//! within-segment invariance term with a between-segment margin term.

mod error;
mod idmap;

pub mod evalmod;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pnm;
pub mod scenegen;
pub mod segmask;
pub mod trainer;

pub use error::{Error, Result};
pub use idmap::IdMap;

//! Cross-modal distillation of two-tower image-text models: affinity
//! mimicking, weight inheritance with learnable structured masks, and
//! multi-stage progressive compression, with a small reverse-mode autodiff.

pub mod analysis;
pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod inheritance;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod towers;

pub use error::{Error, Result};

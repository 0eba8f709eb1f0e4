//! Sequential adversarial masking for contrastive pretraining.
//!
//! A masking network proposes N occlusion masks one after another, each
//! conditioned on the masks before it, and is trained to maximize the
//! contrastive loss of an encoder that sees the masked views. Budget,
//! overlap and consistency penalties keep the masks from collapsing onto
//! the whole image or onto each other.

pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod training;

pub use error::{Error, Result};

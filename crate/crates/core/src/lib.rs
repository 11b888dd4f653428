//! Attention-based listwise learning to rank over multi-channel embeddings.

pub mod container;
pub mod embed;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod oasis;
pub mod protocol;
pub mod train;

pub use error::{Error, Result};

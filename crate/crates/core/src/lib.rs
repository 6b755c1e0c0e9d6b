//! Compositional zero-shot recognition over precomputed image embeddings.

pub mod checkpoint;
pub mod data;
pub mod encoders;
pub mod error;
pub mod kernel;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod prototypes;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::{DuplexError, Result};

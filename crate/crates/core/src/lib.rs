//! Gradient-free structured pruning of transformer FFN filters.
//!
//! The pipeline ranks the filters of every feed-forward layer using only the
//! pretrained weights ([`kcha`]) and activation statistics gathered from
//! unlabeled tokens ([`ranker`]), keeps the globally best `k` filters that fit
//! a FLOPs budget, rescales the survivors by least squares so each layer
//! reconstructs its dense output ([`rescale`]), and compacts the model.

pub mod encoder;
pub mod error;
pub mod kcha;
pub mod linalg;
pub mod pipeline;
pub mod ranker;
pub mod rescale;
pub mod rng;
pub mod tensorstore;

pub use encoder::{ActivationCapture, FilterMask};
pub use error::{Error, Result};
pub use tensorstore::{ModelBundle, ModelConfig, TokenBatch};

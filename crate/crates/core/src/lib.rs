//! Train a small character-level GPT, capture its hidden-state waveforms
//! during generation, and analyze channel coherence: cross-channel
//! correlation, delayed autocorrelation, 2-D channel embeddings, and
//! word-spelling defect statistics.

pub mod error;
pub mod numerics;

pub use error::{Error, Result};
pub use numerics::{AdamHyper, AdamState, Scalar, Tensor};

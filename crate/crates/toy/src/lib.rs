//! A miniature two-view encoder/decoder trained end-to-end through the
//! differentiable rotation head of `voxmatch-core`.
//!
//! Gradients come from a small reverse-mode tape ([`tape`]); the head's own
//! reverse pass enters the tape as a single custom node.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod model;
pub mod tape;
pub mod train;

pub use error::{Result, ToyError};
pub use model::ToyModel;
pub use train::{train_toy, TrainReport, TrainState};

//! Relative rotation estimation from softly matched voxel features.
//!
//! The core pipeline lifts per-view feature maps into voxel volumes, scores
//! every voxel pair by cosine similarity, soft-aligns query coordinates to the
//! reference grid and solves the rotation in closed form with per-pair
//! confidence weights. Every step has an explicit reverse pass, so the solver
//! can sit at the end of a trained network.
//!
//! Around the solver sit a hypothesis-grid baseline with a cost model, an
//! open-set proposal re-ranker, a seeded synthetic benchmark and the file
//! formats used by the `voxmatch` command-line tool.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chain;
pub mod config;
pub mod detect;
pub mod error;
pub mod harness;
pub mod hypo;
pub mod io;
pub mod losses;
pub mod matching;
pub mod par;
pub mod so3;
pub mod svd3;
pub mod synth;
pub mod voxelgrid;
pub mod wcv;

pub use error::{Error, Result};
pub use so3::RotationMatrix;

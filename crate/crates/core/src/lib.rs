//! Saliency-guided weakly supervised object detection at desk scale.
//!
//! Images arrive as superpixel grids with region proposals, per-proposal
//! features, image-level labels and class-specific saliency maps. [`seeds`]
//! mines one confident proposal per labelled class, [`model`] is the two-stream
//! head with a saliency branch, [`trainer`] optimizes it with SGD and
//! [`eval`] reports detection AP, CorLoc and classification AP.

pub mod bench;
pub mod cli;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod seeds;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};

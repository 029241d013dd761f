//! Dual-domain fully-to-weakly supervised object detection on a procedural
//! toy world.
//!
//! The pipeline trains a fully-supervised detector on a labeled source domain,
//! adapts it to a weakly labeled target domain in five progressive steps
//! (style-shifted source, copy-paste composites, and two pseudo-labeling
//! rounds), then uses the adapted detector as proposal generator and feature
//! initializer for a multiple-instance-learning detector (OICR or CASD heads)
//! trained from image-level labels only.

pub mod adapt;
pub mod datamodel;
pub mod detector;
pub mod error;
pub mod eval;
pub mod geom;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod toyworld;
pub mod wsod;

pub use error::{Error, Result};

//! Hide-and-Seek: train CAM classifiers on inputs with randomly hidden
//! patches (images) or segments (sequences), then localize objects and
//! actions from class activation maps and score them.

pub mod analyzer;
pub mod cam;
pub mod cli;
pub mod error;
pub mod eval;
pub mod hiding;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod viz;

pub use error::{Error, Result};

//! One-shot segmentation in cluttered Omniglot scenes.

pub mod error;
pub mod eval;
pub mod glyph_synth;
pub mod io;
pub mod model;
pub mod omniglot;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod template;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};

pub mod data_engine;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod geometry;
pub mod grpo;
pub mod kl_analysis;
pub mod manifest;
pub mod reward;
pub mod seed;

pub use error::{Error, Result};
pub use geometry::{AffineTransform, BBox, CoordSpace};

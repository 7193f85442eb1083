pub mod annotation;
pub mod augment;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod domain;
pub mod error;
pub mod generate;
pub mod geometry;
pub mod glyph;
pub mod mixing;
pub mod model;
pub mod raster;
pub mod reliability;
pub mod rng;
pub mod toy;
pub mod train;

pub use error::{Error, Result};

//! Zero-shot semantic segmentation by cascading multi-level visual features
//! into class-conditioned mask decoders.

pub mod analysis;
pub mod cascade;
pub mod data;
pub mod encoder;
pub mod gradsuite;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod objective;
pub mod text;
pub mod train;

pub use error::{Error, Result};

#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod evaluator;
pub mod item_encoder;
pub mod mining;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod pose_encoder;
pub mod prototype;
pub mod trainer;

pub use error::{Error, Result};

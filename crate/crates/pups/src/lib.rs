pub mod app;
pub mod autodiff;
pub mod cutmix;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod matching;
pub mod model;
pub mod nn;
pub mod panoptic;
pub mod scene;
pub mod train;

pub use error::{Error, Result};

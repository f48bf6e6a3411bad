pub mod ablation;
pub mod certify;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalprobe;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rawfit;
pub mod renderer;
pub mod rng;
pub mod scenes;
pub mod trainer;
pub mod volume;

pub use error::{Result, SpaError};

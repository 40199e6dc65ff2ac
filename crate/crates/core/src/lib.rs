//! IntensiveNet: a fully-convolutional text recognizer built from intensive
//! blocks (chained dense blocks with fusion shortcuts), depthwise separable
//! convolutions and stride-2 learnable downsampling, with a softmax/CTC
//! transcription head.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod ctc;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

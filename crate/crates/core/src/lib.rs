//! Windowed channel-self-correlation super-resolution with hierarchical
//! position codes, trained continuous-scale first and fine-tuned at a fixed
//! integer scale.

pub mod block;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod data;
pub mod encodings;
pub mod eval;
pub mod layer;
pub mod model;
pub mod optim;
pub mod parallel;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod train;

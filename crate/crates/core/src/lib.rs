//! LiDAR-only bird's-eye-view segmentation of map elements (lane dividers,
//! pedestrian crossings, road boundaries), trained jointly with an
//! intensity-map teacher whose features and logits are distilled online into
//! the LiDAR student.
//!
//! Numerics are generic over [`scalar::Scalar`] (`f32` and `f64`). Training
//! and checkpoints use `f32`; gradient checks use `f64`.

pub mod checkpoint;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod intensity_encoder;
pub mod intensity_map;
pub mod io;
pub mod lidar_encoder;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;

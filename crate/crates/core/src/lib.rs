pub mod adversarial;
pub mod config;
pub mod dataset;
pub mod distill;
pub mod eval;
mod error;
pub mod model;
pub mod nn;
pub mod repaint;
pub mod scalar;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision aliases used for training.
pub type Tensor32 = Tensor<f32>;
pub type LaneNet32 = model::LaneNet<f32>;
pub type Discriminator32 = model::Discriminator<f32>;
pub type FeaturePyramid32 = model::FeaturePyramid<f32>;

/// Double-precision aliases used for gradient checks.
pub type Tensor64 = Tensor<f64>;
pub type LaneNet64 = model::LaneNet<f64>;

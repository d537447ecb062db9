//! Realistic adversarial data augmentation for 2D image segmentation.
//!
//! A chain of differentiable photometric and geometric transforms (additive
//! noise, multiplicative bias field, affine warp, diffeomorphic deformation)
//! is optimized by projected gradient ascent against a consistency loss and
//! used to regularize supervised and semi-supervised training of a compact
//! segmentation network.
//!
//! The numerical core is generic over the scalar type: training runs in
//! `f32`, the finite-difference verification suite runs the identical code
//! in `f64`. Concrete aliases for the common instantiations are exported at
//! the crate root.

pub mod adversary;
pub mod chain;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod grid;
pub mod kernels;
pub mod losses;
pub mod predictor;
pub mod scalar;
pub mod segnet;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Verification-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type Graph64 = graph::Graph<f64>;
pub type Chain32 = chain::Chain<f32>;
pub type SegNet32 = segnet::SegNet<f32>;
pub type Sample32 = data::Sample<f32>;

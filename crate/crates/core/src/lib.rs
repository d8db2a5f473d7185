//! Contrastive pre-training of sparse 3D U-Nets on paired partial views of a
//! scene: geometry, voxelization, pair mining, augmentation, a sparse
//! residual U-Net with analytic gradients, contrastive losses, a training
//! loop and feature-matching evaluation.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision for common use.

pub mod augment;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod loss;
pub mod nn;
pub mod scalar;
pub mod train;
pub mod verify;
pub mod voxel;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PointCloud64 = geometry::PointCloud<f64>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type Transform64 = geometry::RigidScaleTransform<f64>;
pub type Transform32 = geometry::RigidScaleTransform<f32>;
pub type ScenePair64 = dataset::ScenePair<f64>;
pub type ScenePair32 = dataset::ScenePair<f32>;
pub type ParameterSet64 = nn::ParameterSet<f64>;
pub type ParameterSet32 = nn::ParameterSet<f32>;
pub type Matrix64 = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;

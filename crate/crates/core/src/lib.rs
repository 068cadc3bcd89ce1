//! Learning unions of low-dimensional subspaces that are close to each other
//! on the Grassmann manifold, from complete or partially observed data, in
//! the ambient space or in a kernel-induced feature space, with denoising and
//! clustering pipelines built on the learned models.

pub mod config;
pub mod datagen;
pub mod evaluation;
pub mod error;
pub mod kernel;
pub mod kernel_learning;
pub mod linear;
pub mod missing;
pub mod preimage;
pub mod subspace;

pub use error::{McuosError, Result};

//! Fusion of a low-resolution hyperspectral image with a high-resolution
//! multispectral image.
//!
//! The pipeline: fit a PCA subspace on the hyperspectral input, initialize the
//! reduced image with a MAP estimate, then solve a noise-weighted least-squares
//! problem with an entrywise L1 penalty by ADMM. [`degrade`] simulates the
//! observations and [`metrics`] scores the result.

pub mod cube;
pub mod degrade;
pub mod error;
mod fft2;
pub mod init_map;
pub mod io;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod subspace;

pub use cube::{BandImage, MatrixView, SpectralCube};
pub use error::{FusionError, Result};

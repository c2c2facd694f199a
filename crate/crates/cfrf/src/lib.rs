//! Desk-scale voxel radiance-field toolkit.
//!
//! The core idea: given a density grid and posed images, the
//! view-dependent color field can be estimated in closed form by
//! projecting observed colors onto a spherical-harmonics basis, with
//! transmittance weighting for occlusion and a residual scheme that
//! reduces the bias of non-uniformly distributed views. The estimated
//! field drives a density-only photometric regularizer during training
//! and the inverse-mean-residual-color geometry metric.
//!
//! A self-contained 1D Fourier lab ([`fourier`]) reproduces the
//! bias-reduction experiments behind the residual scheme.

pub mod camera;
pub mod checkpoint;
pub mod dataset;
pub mod grid;
pub mod estimator;
pub mod metrics;
pub mod render;
pub mod sh;
pub mod synth;
pub mod train;

pub use camera::{Camera, PosedImage, Projection, Ray};
pub use grid::{DensityGrid, ShColorGrid};
pub use sh::ShCoeffs;

//! LiDAR-visual 3D Gaussian splatting SLAM.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] – SE(3) poses, pinhole camera and point clouds.
//! * [`raster`] – dense image containers shared by every image-space stage.
//! * [`registration`] – KISS-ICP style scan-to-map registration.
//! * [`gaussian_map`] – Gaussian primitives, LiDAR initialisation and submaps.
//! * [`rasterizer`] – differentiable tile-based splatting with analytic gradients.
//! * [`losses`] – colour, depth, semantic and feature losses plus the residual map.
//! * [`dynamic_masking`] – robust residual thresholding and mask fusion.
//! * [`pipeline`] – frame-by-frame tracking and mapping.
//! * [`io`] – dataset ingestion, exporters and the synthetic fixture generator.
//! * [`eval`] – ATE-RMSE, PSNR and SSIM.

pub mod dynamic_masking;
pub mod error;
pub mod eval;
pub mod gaussian_map;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod pipeline;
pub mod raster;
pub mod rasterizer;
pub mod registration;

pub use error::{Error, Result};

//! Image quality transfer for low-field MR volumes.
//!
//! This crate synthesizes low-field MR volumes from high-field ones with a
//! probabilistic decimation simulator, trains an anisotropic 3D U-Net on
//! paired patches, and evaluates reconstructions with PSNR, MSSIM, and the
//! Wilcoxon signed-rank test. Everything runs on the CPU at desk scale and is
//! exercised end to end on synthetic brain phantoms.
//!
//! The accompanying guide under `book/` walks through each stage; its code
//! snippets are compiled and run as doctests via the [`guide`] module.

pub mod metrics;
pub mod nn;
pub mod patch;
pub mod phantom;
pub mod pipeline;
pub mod seed;
pub mod sim;
pub mod spline;
pub mod unet;
pub mod volume;

pub mod guide;

pub use volume::{LoadedVolume, TissueMasks, Volume3D, VolumeStats};

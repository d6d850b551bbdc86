//! Multimodal maritime segmentation toolkit.
//!
//! The crate covers the full data path of an RGB / thermal / LIDAR
//! segmentation system:
//!
//! - [`geometry`]: pinhole projection, LIDAR splatting, RBF depth
//!   densification and parallax-correct remapping between cameras.
//! - [`sync`]: nearest-timestamp bundling of asynchronous sensor streams.
//! - [`dataio`]: sequence layout on disk, split manifests and a procedural
//!   day/night scene generator.
//! - [`model`]: a small two-branch encoder with gated fusion and up to three
//!   decoder heads, with hand-written backward pass.
//! - [`training`]: the composed two-pass loss, Adam, the training loop and
//!   finite-difference gradient checking.
//! - [`eval`]: confusion matrices, IoU/mIoU, modality ablation sweeps and
//!   report emission.
//! - [`cli`]: the `aquaseg` command-line front end.

pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod raster;
pub mod sync;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

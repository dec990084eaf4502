//! Multi-input fully convolutional speckle reduction for retinal OCT.
//!
//! The crate is organized in layers:
//!
//! * [`tensor`]: dense `f64` tensors, dilated convolution, and a reverse-mode
//!   autodiff tape.
//! * [`model`]: the branch/fusion/head network built on those pieces.
//! * [`training`]: the compound loss, Adam, augmentation, and the epoch loop.
//! * [`dataset`], [`image_io`], [`roi`]: patch extraction and the on-disk
//!   formats (PGM images, crop and ROI sidecars, patch archives, checkpoints).
//! * [`metrics`]: PSNR, MSR, CNR, ENL and the paired Wilcoxon test.
//! * [`reference`], [`gradcheck`]: slow literal oracles and the machinery
//!   that compares the fast paths against them.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod image_io;
pub mod metrics;
pub mod model;
pub mod reference;
pub mod roi;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

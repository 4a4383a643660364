//! Annotation-free semantic segmentation.
//!
//! The pipeline has three phases:
//!
//! 1. [`stage1`] turns image-text patch features and a mask oracle into
//!    pseudo annotations, with no human labels.
//! 2. [`align`] trains a small head that maps a frozen vision encoder's patch
//!    features into the text embedding space.
//! 3. [`infer`] classifies patches against text prototypes, upsamples to
//!    pixels, optionally refines with automatic masks, and scores mIoU.
//!
//! [`synthworld`] provides a deterministic stand-in for the foundation
//! models, and [`exchange`] is the on-disk format both backends share.

pub mod align;
pub mod error;
pub mod exchange;
pub mod infer;
pub mod numerics;
pub mod pipeline;
pub mod stage1;
pub mod synthworld;
pub mod types;

pub use error::{Error, Result};

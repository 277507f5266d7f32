//! Pixel-level infarct detection from cine image sequences.
//!
//! The crate is `no_std` (with `alloc`) and free of IO. It covers the whole
//! numerical path of the pipeline:
//!
//! * [`imaging`] - image, flow and mask containers, Gaussian smoothing, resampling.
//! * [`matching`] - correlation-pyramid quasi-dense matching.
//! * [`varflow`] - variational optical flow with a matching term, AAE evaluation.
//! * [`neural`] - LSTM stack, stacked auto-encoder, softmax head and RMSProp.
//! * [`features`] - local window features, trajectories and global motion features.
//! * [`localization`] - ROI max-pooling and the 64x64 ROI localizer.
//! * [`synth`] - beating-heart phantom with ground-truth flow and infarct masks.
//! * [`pipeline`] - training, inference, metrics, cross-validation and AHA segments.
//!
//! File formats, model persistence and the command line live in the `ofrnn` crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod math;

pub mod features;
pub mod imaging;
pub mod localization;
pub mod matching;
pub mod neural;
pub mod pipeline;
pub mod synth;
pub mod varflow;

pub use error::{Error, Result};

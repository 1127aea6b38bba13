//! Lightweight sky/cloud segmentation.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: NCHW tensors, a reverse-mode tape and gradient checking
//! - [`nn`]: parameter storage and the convolutional building blocks
//! - [`model`]: the four-stage segmentation network and its decoders
//! - [`objective`]: training losses, evaluation metrics and curves
//! - [`data`]: dataset layout, preprocessing, patch extraction, synthetic skies
//! - [`train`]: Adam, learning-rate schedule, training loops and checkpoints
//! - [`bench`]: FLOP counting and latency measurement

pub mod bench;
pub mod data;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Result, ScanetError};

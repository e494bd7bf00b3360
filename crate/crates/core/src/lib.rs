//! Waveform transformer pipeline for multi-label 12-lead ECG classification.

pub mod attention;
pub mod autograd;
pub mod dsp;
pub mod features;
pub mod metrics;
pub mod model;
pub mod record_io;
pub mod stratify;
pub mod synth;
pub mod train;

pub use autograd::{Tensor, TensorError};

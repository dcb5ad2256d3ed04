//! Motion-only surgical gesture recognition.
//!
//! Frames are reduced to dense optical flow, the flow is stored as quantized
//! magnitude/direction planes, ten consecutive pairs are stacked into a
//! 20-channel chunk and a batch-normalized residual network classifies the
//! chunks. Clip-level predictions average 20 chunk predictions, and accuracy
//! is reported under leave-one-supertrial-out cross-validation.

pub mod cli;
pub mod config;
pub mod encode;
pub mod eval;
pub mod flow;
pub mod ingest;
pub mod net;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod workflow;

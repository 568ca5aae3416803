//! Event-camera video reconstruction toolkit.
//!
//! The crate covers the full loop: an idealized event-camera simulator
//! ([`simulator`]), event windowing and voxel-grid encoding ([`events`]), a
//! small reverse-mode tensor engine with a recurrent UNet built on top of it
//! ([`nn`]), training objectives ([`losses`]), evaluation metrics
//! ([`metrics`]), the training loop ([`trainer`]) and inference-time
//! orchestration such as high-framerate and color synthesis ([`pipeline`]).

pub mod error;
pub mod events;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};

//! End-to-end sleepiness regression from raw speech audio.
//!
//! The crate covers the whole pipeline: WAV decoding and decimation
//! ([`audio`]), sliding-window expansion with balancing and augmentation
//! ([`dataset`]), a small from-scratch neural engine ([`nn`]), the 1D-CNN
//! ([`model`]), seeded training with best-dev checkpointing ([`train`]),
//! clip-level evaluation ([`eval`]), and a synthetic tone corpus for desk-scale
//! experiments ([`synth`]).

pub mod audio;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

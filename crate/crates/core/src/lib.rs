//! Controllable low-light enhancement with an RWKV-style backbone.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors, reverse-mode
//! differentiation, AdamW), [`color_hvi`] (the HVI colour transform),
//! [`wkv`] (the bidirectional WKV kernel), [`s2d`] (space-to-depth
//! embeddings), [`blocks`] and [`model`] (the network), [`lightsynth`]
//! (synthetic multi-illumination data), [`losses`] (objectives and
//! metrics), [`trainer`] (training and experiments), [`cli`] and
//! [`service`] (the operator surfaces).

pub mod blocks;
pub mod cli;
pub mod color_hvi;
pub mod error;
pub mod lightsynth;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod s2d;
pub mod service;
pub mod trainer;
pub mod wkv;

pub use error::{Error, Result};

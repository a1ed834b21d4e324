//! Change captioning for bi-temporal image pairs.
//!
//! Two co-registered images are encoded jointly as a two-frame clip, the
//! resulting tokens are filtered by a coarse change mask, and a causal
//! transformer decoder writes a caption. Everything runs in `f64` on a
//! small dynamic autodiff tape so that the whole pipeline can be trained
//! and gradient-checked on a CPU.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod maskguide;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod raster;
pub mod train;

pub use error::{Error, Result};

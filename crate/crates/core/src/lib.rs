//! Local editing of voxel latents by inverting a rectified flow.
//!
//! An asset is inverted to noise with a second-order Taylor solver while the
//! visited latents and the attention keys/values are cached. Denoising then
//! starts from that noise and, at every step, overwrites the preserved
//! region with the cached latents and keys/values, so only the masked region
//! is regenerated.

pub mod config;
pub mod editor;
pub mod error;
pub mod fields;
pub mod formats;
pub mod kvstore;
pub mod lattice;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod solver;
pub mod synth;

pub use error::{Error, ErrorClass, Result};

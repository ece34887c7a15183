//! Texel-grid inverse rendering for UV-space textures.
//!
//! Given a UV texture with baked-in, non-physical shadow artifacts, this
//! crate jointly optimizes a texel-grid spherical-harmonics lighting model
//! and samples a diffusion prior over reflectance stacks to recover a clean
//! diffuse albedo (plus coupled detail-normal and specular channels).
//! A procedural synthetic-scene generator provides ground truth so the whole
//! pipeline can be verified end to end at desk scale.

pub mod cli;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod light;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod sh;
pub mod shadow;
pub mod synthetic;
pub mod texture;
pub mod uvfield;

pub use error::{Error, Result};
pub use uvfield::{ReflectanceStack, UvField};

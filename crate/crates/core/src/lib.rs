//! Conditional volumetric diffusion for 3D shape completion.
//!
//! The crate covers the full pipeline: procedural desk-scale data synthesis
//! ([`datagen`]), discrete-time Gaussian diffusion ([`diffusion`]), a
//! dual-branch volumetric denoiser with hierarchical feature aggregation and
//! occupancy-aware multi-scan fusion ([`network`]), two-phase training
//! ([`training`]), ancestral/respaced sampling ([`sampling`]), and mesh
//! extraction plus the completion metric suite ([`evalmesh`]).


pub mod diffusion;
pub mod training;
pub mod error;

pub mod network;
pub mod nn;


pub mod volume;

pub use error::{Error, Result};

//! Patch-level zero-shot region captioning.
//!
//! A vision backbone turns an image into a dense [`PatchGrid`]. Any region
//! (whole image, single patch, box, box set, mouse trace) selects a multiset
//! of patches that is averaged into a single embedding, optionally projected
//! into the text subspace through a [`gap::MemoryBank`], and decoded by a
//! small prefix-conditioned transformer trained on text only.

pub mod backbones;
pub mod config;
pub mod decoder;
pub mod evalharness;
pub mod gap;
pub mod metrics;
pub mod pipeline;
pub mod regions;
pub mod tracebench;
pub mod types;

pub use config::{Config, ConfigError};
pub use types::{
    Caption, GridError, ImageSize, PatchGrid, PatchSelection, PixelBox, RegionEmbedding,
    RegionKind, RegionSpec, SpecError,
};

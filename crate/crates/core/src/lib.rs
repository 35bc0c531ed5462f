//! Implant position regression from triplets of adjacent CBCT slices.
//!
//! The pipeline: a shared-weight encoder embeds the `(t-k, t, t+k)` slices,
//! cross-attention from the middle slice to its neighbours fuses them, a
//! deconvolution decoder restores resolution, a text embedding of the target
//! region (`left`, `middle`, `right`) is injected as an extra feature plane,
//! and heatmap/offset heads regress the implant position. Per-slice positions
//! can then be fitted with a 3D centerline and projected to root depth.

pub mod config;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod loss;
pub mod manifest;
pub mod model;
pub mod synthdata;
pub mod trainer;
pub mod volume;

pub use error::{Error, ErrorKind, Result};

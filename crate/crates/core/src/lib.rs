//! Deterministic 3D-guided face manipulation: bilinear face model fitting,
//! UV-space conditioning maps, spectral shape correction, and compositing.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compositor;
pub mod fitting;
pub mod ganmath;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod raster;
pub mod shapenet;
pub mod spectral;
pub mod synthkit;

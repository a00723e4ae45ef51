//! Panoptic symbol spotting for vector CAD drawings.
//!
//! The pipeline: parse a drawing into geometric and text primitives, tile it
//! into 14m blocks, filter text annotations by corpus frequency, build a
//! k-nearest-neighbor primitive graph with typed edge features, run a
//! transformer whose neighbor attention is biased by an embedding of those
//! edge features, and assemble predicted symbols by clustering offset-shifted
//! primitive centers. Evaluation uses the log-length-weighted panoptic
//! quality metric (PQ = RQ x SQ).

pub mod autodiff;
pub mod error;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod network;
pub mod raster;
pub mod render;
pub mod spotting;
pub mod synth;
pub mod textint;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ClassInfo, ClassKind, Drawing, Geometry, Primitive, Symbol};

//! Synthetic two-object scenes, deterministic raster evaluation and analyses
//! of diffusion-transformer cross-attention and text embeddings.
//!
//! Modules:
//! - [`tensor_io`]: the `ATNS` binary tensor container and streaming reader.
//! - [`scene`]: scene sampling, rendering, captions and dataset output.
//! - [`raster`]: image parsing and scoring against scene queries.
//! - [`text`]: random-embedding text encoders and token-group masks.
//! - [`synopsis`]: cross-attention synopses, top-k heads and QK maps.
//! - [`varpart`]: variance partitioning, effect vectors and PCA.
//! - [`edit`]: embedding edits and intervention plans.

pub mod edit;
pub mod error;
pub mod geometry;
pub mod raster;
pub mod scene;
pub mod synopsis;
pub mod tensor_io;
pub mod text;
pub mod varpart;

pub use error::{Error, Result};
pub use geometry::{relation_from_centers, relation_from_offsets, Color, RelationLabel, ShapeKind};

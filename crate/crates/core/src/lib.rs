//! Structured perception of roadside infrastructure from street-level
//! panoramas.
//!
//! The crate turns equirectangular panoramas into schema-conformant asset
//! records by chaining an open-vocabulary detector, a multimodal language
//! model and two retrieval stores (standards text and annotated visual
//! exemplars), and scores the results with COCO-style detection metrics and
//! attribute accuracy.
//!
//! Modules:
//! - [`schema`]: attribute schema, record type, validation and repair
//! - [`geometry`]: panorama ↔ perspective view projection and cropping
//! - [`numerics`]: cosine similarity and low-rank adapter merging
//! - [`retrieval`]: text and visual vector stores
//! - [`clients`]: detector / VLM / embedder clients and offline mocks
//! - [`pipeline`]: per-scene and batch orchestration
//! - [`eval`]: IoU, AP/mAP, attribute accuracy and report tables
//! - [`config`]: the single human-readable configuration file

pub mod error;
pub mod eval;
pub mod clients;
pub mod config;
pub mod coco;
pub mod geometry;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod schema;

pub use error::{Error, Result};

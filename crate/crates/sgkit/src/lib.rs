//! Scene-graph dataset engine: a toolkit for building, filtering, editing,
//! merging, and scoring dense scene-graph datasets.
//!
//! The crate is organized around a pipeline:
//!
//! - [`graph`] — the data model (regions, relations, graphs, records) and
//!   its structural rules.
//! - [`geometry`] — box/mask IoU, 0-1000 coordinate normalization, and
//!   area-ordered NMS for region proposals.
//! - [`text`] — the region-token text grammar exchanged with models, and
//!   the edit-set wire format.
//! - [`filters`] — rule-based, judge-based, and similarity-based relation
//!   filtering.
//! - [`pipeline`] — proposal refinement, region validation, edit
//!   application, cross-dataset merging, and corpus statistics.
//! - [`teacher`] — prompt builders and pluggable chat-completion
//!   transports, including a deterministic replay mock.
//! - [`eval`] — open-ended scene-graph detection recall (R@K / mR@K) and
//!   region-classification semantic similarity.
//! - [`records`] — JSONL persistence.
//!
//! Every neural component (teachers, judges, embedders, segmenters) sits
//! behind a trait or an ingested file, so the whole pipeline runs
//! hermetically in tests.

pub mod eval;
pub mod filters;
pub mod geometry;
pub mod graph;
pub mod pipeline;
pub mod records;
pub mod teacher;
pub mod text;

pub use graph::{
    canonicalize, validate, BBox, DatasetRecord, Mask, Region, Relation, RelationCategory,
    SceneGraph, StageTag,
};

//! Open-set novel object detection engine.
//!
//! Closed-set detector outputs are turned into open-set detections in three
//! stages: the known-class, background and open-set detector pools are
//! gathered ([`fusion`]), background proposals get zero-shot labels from
//! synonym-averaged text features ([`saeg`]), and the fused pool is refined
//! with box-prompted segmentation and score standardisation ([`refine`]).
//! [`eval`] computes grouped box AP and localization recall.
//!
//! Model inference sits behind the [`backend`] protocol.

pub mod backend;
pub mod bbox;
pub mod detection;
pub mod embedding;
pub mod eval;
pub mod fusion;
pub mod ingest;
pub mod refine;
pub mod saeg;

pub use bbox::{clamp_to_image, iou, BBox};
pub use detection::{
    ClassId, ImageId, LabeledDetection, RawDetection, RefinedDetection, SourceTag,
};
pub use embedding::Embedding;

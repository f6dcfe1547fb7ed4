//! Model backend boundary.
//!
//! All neural inference (text and image encoders, box-prompted segmentation)
//! happens behind [`Backend`]. Implementations in this crate are the wire
//! client ([`WireClient`]) that talks to a model service over a byte stream,
//! and the deterministic [`SceneStub`] used for fixtures and tests.

mod client;
pub mod protocol;
mod server;
mod stub;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use client::{BackendEndpoint, WireClient};
pub use server::serve;
pub use stub::{SceneStub, StubFactory};

use crate::bbox::BBox;
use crate::detection::ImageId;
use crate::embedding::{Embedding, EmbeddingError};
use crate::ingest::{ImageInfo, SegmentationResult};

/// Image handle passed to the backend. The backend resolves `path` (or the id)
/// to pixels; the engine never decodes images itself.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: ImageId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub width: u32,
    pub height: u32,
}

impl ImageRef {
    pub fn from_info(info: &ImageInfo, image_root: Option<&str>) -> Self {
        let path = info.file_name.as_ref().map(|f| match image_root {
            Some(root) => format!("{}/{}", root.trim_end_matches('/'), f),
            None => f.clone(),
        });
        Self {
            id: info.id,
            path,
            width: info.width,
            height: info.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    /// Embedding dimension used for every embedding in the session.
    pub dim: usize,
    /// Names the loaded models; part of the class-matrix cache key.
    pub identity: String,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("backend reported error: {0}")]
    Remote(String),
    #[error("expected {expected} results, backend returned {got}")]
    Cardinality { expected: usize, got: usize },
    #[error("embedding dimension changed within session: expected {expected}, got {got}")]
    DimensionDrift { expected: usize, got: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub trait Backend: Send {
    fn info(&mut self) -> Result<BackendInfo, BackendError>;

    /// One embedding per input text, in input order.
    fn text_embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, BackendError>;

    /// One embedding per box crop, in input order. `context_pad` enlarges each
    /// crop by that fraction of the box size on every side.
    fn image_embed_roi(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
        context_pad: f64,
    ) -> Result<Vec<Embedding>, BackendError>;

    /// Exactly one mask per prompt box, in input order, at image resolution.
    fn segment_boxes(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
    ) -> Result<Vec<SegmentationResult>, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn info(&mut self) -> Result<BackendInfo, BackendError> {
        (**self).info()
    }
    fn text_embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        (**self).text_embed(texts)
    }
    fn image_embed_roi(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
        context_pad: f64,
    ) -> Result<Vec<Embedding>, BackendError> {
        (**self).image_embed_roi(image, boxes, context_pad)
    }
    fn segment_boxes(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
    ) -> Result<Vec<SegmentationResult>, BackendError> {
        (**self).segment_boxes(image, boxes)
    }
}

/// Opens independent sessions, one per worker.
pub trait BackendFactory: Send + Sync {
    fn connect(&self) -> Result<Box<dyn Backend>, BackendError>;
}

impl<F: BackendFactory + ?Sized> BackendFactory for Box<F> {
    fn connect(&self) -> Result<Box<dyn Backend>, BackendError> {
        (**self).connect()
    }
}

/// Per-kind request counters shared between clones of a [`Metered`] backend.
#[derive(Debug, Default)]
pub struct CallCounts {
    pub info: AtomicUsize,
    pub text_embed: AtomicUsize,
    pub image_embed_roi: AtomicUsize,
    pub segment_boxes: AtomicUsize,
}

impl CallCounts {
    pub fn total(&self) -> usize {
        self.text_embed.load(Ordering::SeqCst)
            + self.image_embed_roi.load(Ordering::SeqCst)
            + self.segment_boxes.load(Ordering::SeqCst)
    }
}

/// Wraps a backend and counts requests by kind. `info` is not counted in
/// [`CallCounts::total`] since it does not run a model.
pub struct Metered<B> {
    inner: B,
    counts: Arc<CallCounts>,
}

impl<B: Backend> Metered<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            counts: Arc::default(),
        }
    }

    pub fn with_counts(inner: B, counts: Arc<CallCounts>) -> Self {
        Self { inner, counts }
    }

    pub fn counts(&self) -> Arc<CallCounts> {
        Arc::clone(&self.counts)
    }
}

impl<B: Backend> Backend for Metered<B> {
    fn info(&mut self) -> Result<BackendInfo, BackendError> {
        self.counts.info.fetch_add(1, Ordering::SeqCst);
        self.inner.info()
    }
    fn text_embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        self.counts.text_embed.fetch_add(1, Ordering::SeqCst);
        self.inner.text_embed(texts)
    }
    fn image_embed_roi(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
        context_pad: f64,
    ) -> Result<Vec<Embedding>, BackendError> {
        self.counts.image_embed_roi.fetch_add(1, Ordering::SeqCst);
        self.inner.image_embed_roi(image, boxes, context_pad)
    }
    fn segment_boxes(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
    ) -> Result<Vec<SegmentationResult>, BackendError> {
        self.counts.segment_boxes.fetch_add(1, Ordering::SeqCst);
        self.inner.segment_boxes(image, boxes)
    }
}

/// Factory whose sessions all report into one shared [`CallCounts`].
pub struct MeteredFactory<F> {
    inner: F,
    counts: Arc<CallCounts>,
}

impl<F: BackendFactory> MeteredFactory<F> {
    pub fn new(inner: F) -> Self {
        Self {
            inner,
            counts: Arc::default(),
        }
    }

    pub fn counts(&self) -> Arc<CallCounts> {
        Arc::clone(&self.counts)
    }
}

impl<F: BackendFactory> BackendFactory for MeteredFactory<F> {
    fn connect(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(Box::new(Metered::with_counts(
            self.inner.connect()?,
            Arc::clone(&self.counts),
        )))
    }
}

//! File formats consumed by the engine: vocabularies, prompt templates,
//! detection dumps, ground truth and run-length encoded masks.
//!
//! Every parser is total: malformed input yields an [`IngestError`] that names
//! the file, and the line or field where that makes sense.

mod detections;
mod gt;
mod rle;
mod vocab;

use std::path::{Path, PathBuf};

pub use detections::{
    load_detections, parse_detections, write_detection_record, DetectionRecord, PerImage,
};
pub use gt::{load_ground_truth, parse_ground_truth, GroundTruthSet, GtObject, ImageGt, ImageInfo};
pub use rle::{decode_rle, encode_rle, BinaryMask, Rle, RleError, SegmentationResult};
pub use vocab::{
    load_templates, load_vocabulary, parse_templates, parse_vocabulary, ClassEntry,
    ClassVocabulary, PromptTemplateSet, CLASS_PLACEHOLDER,
};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// serde_json errors carry line and column.
    #[error("{origin}: {source}")]
    Json {
        origin: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{origin}: line {line}: {message}")]
    Line {
        origin: String,
        line: usize,
        message: String,
    },
    #[error("{origin}: {field}: {message}")]
    Field {
        origin: String,
        field: String,
        message: String,
    },
    #[error("duplicate class_id {0}")]
    DuplicateClassId(usize),
}

pub(crate) fn read_file(path: &Path) -> Result<String, IngestError> {
    std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })
}

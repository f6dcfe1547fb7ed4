//! Detection records and their provenance tags.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;

/// Dense class index into a [`crate::ingest::ClassVocabulary`].
pub type ClassId = usize;

/// Image identifier as it appears in annotation files.
pub type ImageId = u64;

/// Which box pool a detection came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SourceTag {
    /// Known-class detection from the closed-set detector.
    #[serde(rename = "KN")]
    Known,
    /// Closed-set detector proposal it could not classify.
    #[serde(rename = "BG")]
    Background,
    /// Open-set (grounded) detector output.
    #[serde(rename = "GD")]
    Grounded,
}

impl SourceTag {
    pub const ALL: [SourceTag; 3] = [SourceTag::Known, SourceTag::Background, SourceTag::Grounded];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceTag::Known => "KN",
            SourceTag::Background => "BG",
            SourceTag::Grounded => "GD",
        }
    }
}

impl fmt::Display for SourceTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "KN" => Ok(SourceTag::Known),
            "BG" => Ok(SourceTag::Background),
            "GD" => Ok(SourceTag::Grounded),
            other => Err(format!(
                "unknown source tag {other:?} (expected KN, BG or GD)"
            )),
        }
    }
}

/// A detector output before unknown-object labelling.
///
/// Background proposals carry neither class nor score; the other two sources
/// carry both. [`RawDetection::new`] enforces this.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub bbox: BBox,
    pub class_id: Option<ClassId>,
    pub score: Option<f64>,
    pub source: SourceTag,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DetectionError {
    #[error("background detections must not carry a class or score")]
    BackgroundWithLabel,
    #[error("{0} detections require both class_id and score")]
    MissingLabel(SourceTag),
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

impl RawDetection {
    pub fn new(
        bbox: BBox,
        class_id: Option<ClassId>,
        score: Option<f64>,
        source: SourceTag,
    ) -> Result<Self, DetectionError> {
        match source {
            SourceTag::Background => {
                if class_id.is_some() || score.is_some() {
                    return Err(DetectionError::BackgroundWithLabel);
                }
            }
            SourceTag::Known | SourceTag::Grounded => {
                if class_id.is_none() || score.is_none() {
                    return Err(DetectionError::MissingLabel(source));
                }
            }
        }
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(DetectionError::ScoreOutOfRange(s));
            }
        }
        Ok(Self {
            bbox,
            class_id,
            score,
            source,
        })
    }

    pub fn background(bbox: BBox) -> Self {
        Self {
            bbox,
            class_id: None,
            score: None,
            source: SourceTag::Background,
        }
    }

    /// Labelled view of a KN/GD detection; `None` for background proposals.
    pub fn to_labeled(&self) -> Option<LabeledDetection> {
        Some(LabeledDetection {
            bbox: self.bbox,
            class_id: self.class_id?,
            score: self.score?,
            source: self.source,
        })
    }
}

/// A detection in the fused pool: box, class, score and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDetection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: ClassId,
    pub score: f64,
    pub source: SourceTag,
}

/// Final output of the refinement stage.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedDetection {
    /// Mask-derived box, or the prompting box when `fallback` is set.
    pub bbox: BBox,
    /// Refined score used for ranking.
    pub score: f64,
    /// The fused-pool score before refinement.
    pub combined_score: f64,
    pub class_id: ClassId,
    pub source: SourceTag,
    /// Mask-quality score, absent when segmentation was disabled.
    pub sam_score: Option<f64>,
    /// Set when the mask was empty and the input box was kept.
    pub fallback: bool,
    /// Position of the originating entry in the fused pool.
    pub pool_index: usize,
}

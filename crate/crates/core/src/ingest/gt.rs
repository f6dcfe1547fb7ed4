use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, ClassVocabulary, IngestError};
use crate::bbox::BBox;
use crate::detection::{ClassId, ImageId};

/// Slack allowed when checking annotation boxes against image bounds.
const BOUNDS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtObject {
    pub bbox: BBox,
    pub class_id: ClassId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageGt {
    pub info: ImageInfo,
    pub objects: Vec<GtObject>,
}

/// Test-set annotations keyed by image id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    pub images: BTreeMap<ImageId, ImageGt>,
}

impl GroundTruthSet {
    pub fn image(&self, id: ImageId) -> Option<&ImageGt> {
        self.images.get(&id)
    }

    pub fn object_count(&self) -> usize {
        self.images.values().map(|i| i.objects.len()).sum()
    }
}

#[derive(Deserialize)]
struct GtFile {
    images: Vec<ImageInfo>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    image_id: ImageId,
    bbox: BBox,
    category_id: ClassId,
}

/// Parse a COCO-like document with corner-form `bbox`.
pub fn parse_ground_truth(
    text: &str,
    vocab: &ClassVocabulary,
    origin: &str,
) -> Result<GroundTruthSet, IngestError> {
    let file: GtFile = serde_json::from_str(text).map_err(|source| IngestError::Json {
        origin: origin.to_string(),
        source,
    })?;
    let field = |field: String, message: String| IngestError::Field {
        origin: origin.to_string(),
        field,
        message,
    };
    let mut set = GroundTruthSet::default();
    for (i, info) in file.images.into_iter().enumerate() {
        if info.width == 0 || info.height == 0 {
            return Err(field(
                format!("images[{i}]"),
                format!("image {} has zero size", info.id),
            ));
        }
        let id = info.id;
        if set
            .images
            .insert(
                id,
                ImageGt {
                    info,
                    objects: Vec::new(),
                },
            )
            .is_some()
        {
            return Err(field(
                format!("images[{i}].id"),
                format!("duplicate image id {id}"),
            ));
        }
    }
    for (i, ann) in file.annotations.into_iter().enumerate() {
        let path = format!("annotations[{i}]");
        if !vocab.contains(ann.category_id) {
            return Err(field(
                format!("{path}.category_id"),
                format!(
                    "class {} not in vocabulary of {} classes",
                    ann.category_id,
                    vocab.len()
                ),
            ));
        }
        let Some(img) = set.images.get_mut(&ann.image_id) else {
            return Err(field(
                format!("{path}.image_id"),
                format!("unknown image {}", ann.image_id),
            ));
        };
        let (w, h) = (img.info.width as f64, img.info.height as f64);
        let b = ann.bbox;
        if b.x1 < -BOUNDS_EPS
            || b.y1 < -BOUNDS_EPS
            || b.x2 > w + BOUNDS_EPS
            || b.y2 > h + BOUNDS_EPS
        {
            return Err(field(
                format!("{path}.bbox"),
                format!(
                    "box {:?} outside {}x{} image {}",
                    b.to_array(),
                    w,
                    h,
                    ann.image_id
                ),
            ));
        }
        img.objects.push(GtObject {
            bbox: b.clamp_to_image(w, h),
            class_id: ann.category_id,
        });
    }
    Ok(set)
}

pub fn load_ground_truth(
    path: &Path,
    vocab: &ClassVocabulary,
) -> Result<GroundTruthSet, IngestError> {
    parse_ground_truth(&read_file(path)?, vocab, &path.display().to_string())
}

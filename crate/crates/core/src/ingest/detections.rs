use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_file, IngestError};
use crate::bbox::BBox;
use crate::detection::{ClassId, ImageId, RawDetection, SourceTag};

/// Detections grouped by image, images in ascending id order.
pub type PerImage = BTreeMap<ImageId, Vec<RawDetection>>;

/// One line of a `dets_<source>.jsonl` dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<ClassId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourceTag>,
}

/// Parse a JSON-lines dump. Blank lines are ignored; everything else must be a
/// valid record for `source`.
pub fn parse_detections(
    text: &str,
    source: SourceTag,
    origin: &str,
) -> Result<PerImage, IngestError> {
    let mut out = PerImage::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let line_err = |message: String| IngestError::Line {
            origin: origin.to_string(),
            line: lineno,
            message,
        };
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| line_err(e.to_string()))?;
        if let Some(tag) = rec.source {
            if tag != source {
                return Err(line_err(format!("record tagged {tag} in a {source} dump")));
            }
        }
        let det = RawDetection::new(rec.bbox, rec.class_id, rec.score, source)
            .map_err(|e| line_err(e.to_string()))?;
        out.entry(rec.image_id).or_default().push(det);
    }
    Ok(out)
}

pub fn load_detections(path: &Path, source: SourceTag) -> Result<PerImage, IngestError> {
    parse_detections(&read_file(path)?, source, &path.display().to_string())
}

/// Append one record as a JSON line.
pub fn write_detection_record<W: Write>(
    w: &mut W,
    image_id: ImageId,
    det: &RawDetection,
) -> std::io::Result<()> {
    let rec = DetectionRecord {
        image_id,
        bbox: det.bbox,
        score: det.score,
        class_id: det.class_id,
        source: None,
    };
    serde_json::to_writer(&mut *w, &rec)?;
    w.write_all(b"\n")
}

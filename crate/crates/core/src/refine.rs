//! Mask-based box refinement, score refinement and final top-K selection.
//!
//! Every pool box is sent to the segmenter in one request. Each returned mask
//! is reduced to its tight pixel box; empty masks keep the prompting box and
//! are flagged. Combined detector scores and mask-quality scores are min-max
//! standardised per image and multiplied.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BackendError, ImageRef};
use crate::bbox::BBox;
use crate::detection::{ClassId, ImageId, RefinedDetection, SourceTag};
use crate::fusion::FusedPool;
use crate::ingest::{IngestError, RleError, SegmentationResult};

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error("cannot standardise an empty score list")]
    EmptyScores,
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("score lists differ in length: {combined} combined vs {sam} mask scores")]
    LengthMismatch { combined: usize, sam: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("mask {index}: {source}")]
    Mask {
        index: usize,
        #[source]
        source: RleError,
    },
    #[error("mask {index} is {got_h}x{got_w}, image is {want_h}x{want_w}")]
    MaskSize {
        index: usize,
        got_h: u32,
        got_w: u32,
        want_h: u32,
        want_w: u32,
    },
    #[error("segmenter returned {got} masks for {expected} prompt boxes")]
    Cardinality { expected: usize, got: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Combined detector score and mask-quality score of one pool entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub combined: f64,
    pub sam: f64,
}

/// Tight box `[min_col, min_row, max_col + 1, max_row + 1]` around the mask
/// foreground. An empty mask yields `(fallback, true)`.
pub fn mask_to_box(seg: &SegmentationResult, fallback: BBox) -> Result<(BBox, bool), RleError> {
    Ok(match seg.mask.foreground_extent()? {
        None => (fallback, true),
        Some((r0, r1, c0, c1)) => (
            BBox {
                x1: c0 as f64,
                y1: r0 as f64,
                x2: c1 as f64 + 1.0,
                y2: r1 as f64 + 1.0,
            },
            false,
        ),
    })
}

/// Min-max standardisation to `[0, 1]`.
///
/// Computed as `x * scale + offset` with `scale = 1 / (max - min)` and
/// `offset = -min * scale`, the same arithmetic as the common scaler
/// implementations, so that hand-computed cases like `[0.2, 0.6, 1.0]` come
/// out exact. The minimum and maximum themselves map to exactly 0 and 1.
/// A constant input uses `scale = 1`, which maps everything to 0.
pub fn minmax(scores: &[f64]) -> Result<Vec<f64>, RefineError> {
    if scores.is_empty() {
        return Err(RefineError::EmptyScores);
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(RefineError::NonFinite { index });
    }
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let range = hi - lo;
    let scale = if range == 0.0 { 1.0 } else { 1.0 / range };
    let offset = -(lo * scale);
    Ok(scores
        .iter()
        .map(|&s| match s {
            s if s == lo => 0.0,
            s if s == hi => 1.0,
            s => (s * scale + offset).clamp(0.0, 1.0),
        })
        .collect())
}

/// Refined scores from separate score lists; see [`srm`].
pub fn srm_scores(combined: &[f64], sam: &[f64]) -> Result<Vec<f64>, RefineError> {
    if combined.len() != sam.len() {
        return Err(RefineError::LengthMismatch {
            combined: combined.len(),
            sam: sam.len(),
        });
    }
    let a = minmax(combined)?;
    let b = minmax(sam)?;
    Ok(a.into_iter().zip(b).map(|(x, y)| x * y).collect())
}

/// Score refinement: element-wise product of the min-max standardised
/// combined scores and mask scores.
pub fn srm(pairs: &[ScorePair]) -> Result<Vec<f64>, RefineError> {
    let combined: Vec<f64> = pairs.iter().map(|p| p.combined).collect();
    let sam: Vec<f64> = pairs.iter().map(|p| p.sam).collect();
    srm_scores(&combined, &sam)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RefineOptions {
    /// Replace boxes by mask boxes. Without it the pool passes through with
    /// its combined scores and score refinement is skipped as well.
    pub use_sam: bool,
    pub use_srm: bool,
    /// Detections kept per image.
    pub k: usize,
}

impl RefineOptions {
    pub fn new(k: usize) -> Self {
        Self {
            use_sam: true,
            use_srm: true,
            k,
        }
    }
}

/// Sort by refined score descending, then combined score descending, then
/// pool index ascending, and keep the first `k`.
pub fn select_top_k(mut dets: Vec<RefinedDetection>, k: usize) -> Vec<RefinedDetection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(b.combined_score.total_cmp(&a.combined_score))
            .then(a.pool_index.cmp(&b.pool_index))
    });
    dets.truncate(k);
    dets
}

/// Refine one image's pool and return at most `k` detections.
pub fn refine(
    pool: &FusedPool,
    image: &ImageRef,
    backend: &mut dyn Backend,
    opts: &RefineOptions,
) -> Result<Vec<RefinedDetection>, RefineError> {
    if opts.k == 0 {
        return Err(RefineError::ZeroK);
    }
    let dets = pool.detections();
    if dets.is_empty() {
        return Ok(Vec::new());
    }
    let combined: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let refined: Vec<RefinedDetection> = if opts.use_sam {
        let (w, h) = (image.width as f64, image.height as f64);
        let prompts: Vec<BBox> = dets.iter().map(|d| d.bbox.clamp_to_image(w, h)).collect();
        let segs = backend.segment_boxes(image, &prompts)?;
        if segs.len() != prompts.len() {
            return Err(RefineError::Cardinality {
                expected: prompts.len(),
                got: segs.len(),
            });
        }
        let sam: Vec<f64> = segs.iter().map(|s| s.score).collect();
        let scores = if opts.use_srm {
            if combined.iter().all(|&s| s == combined[0]) && combined.len() > 1 {
                tracing::warn!(
                    image_id = image.id,
                    stage = "refine",
                    "uniform combined scores; refined scores are all zero"
                );
            }
            srm_scores(&combined, &sam)?
        } else {
            combined.clone()
        };
        let mut out = Vec::with_capacity(dets.len());
        for (index, (seg, prompt)) in segs.iter().zip(&prompts).enumerate() {
            if (seg.mask.height, seg.mask.width) != (image.height, image.width) {
                return Err(RefineError::MaskSize {
                    index,
                    got_h: seg.mask.height,
                    got_w: seg.mask.width,
                    want_h: image.height,
                    want_w: image.width,
                });
            }
            let (bbox, fallback) =
                mask_to_box(seg, *prompt).map_err(|source| RefineError::Mask { index, source })?;
            out.push(RefinedDetection {
                bbox: bbox.clamp_to_image(w, h),
                score: scores[index],
                combined_score: combined[index],
                class_id: dets[index].class_id,
                source: dets[index].source,
                sam_score: Some(seg.score),
                fallback,
                pool_index: index,
            });
        }
        let n_fallback = out.iter().filter(|d| d.fallback).count();
        tracing::debug!(
            image_id = image.id,
            stage = "refine",
            pool = out.len(),
            n_fallback,
            "segmented pool"
        );
        out
    } else {
        dets.iter()
            .enumerate()
            .map(|(index, d)| RefinedDetection {
                bbox: d.bbox,
                score: d.score,
                combined_score: d.score,
                class_id: d.class_id,
                source: d.source,
                sam_score: None,
                fallback: false,
                pool_index: index,
            })
            .collect()
    };
    Ok(select_top_k(refined, opts.k))
}

/// One line of `final.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub image_id: ImageId,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
    pub class_id: ClassId,
    pub source: SourceTag,
    pub fallback_flag: bool,
}

impl FinalRecord {
    pub fn new(image_id: ImageId, d: &RefinedDetection) -> Self {
        Self {
            image_id,
            bbox: d.bbox,
            score: d.score,
            class_id: d.class_id,
            source: d.source,
            fallback_flag: d.fallback,
        }
    }
}

/// Write images in ascending id order, detections in ranked order.
pub fn write_final<W: Write>(
    mut w: W,
    results: &BTreeMap<ImageId, Vec<RefinedDetection>>,
) -> std::io::Result<()> {
    for (&id, dets) in results {
        for d in dets {
            serde_json::to_writer(&mut w, &FinalRecord::new(id, d))?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()
}

pub fn parse_final(text: &str, origin: &str) -> Result<Vec<FinalRecord>, IngestError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<FinalRecord>(l).map_err(|e| IngestError::Line {
                origin: origin.to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_final(path: &Path) -> Result<Vec<FinalRecord>, IngestError> {
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_final(&text, &path.display().to_string())
}

//! Assembly of the combined detection pool from the known-class, background
//! and open-set detector outputs.
//!
//! The pool is a plain concatenation in KN, BG, GD order. Nothing is
//! suppressed or deduplicated here; an optional class-wise NMS filter exists
//! but is off unless configured.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backend::{Backend, ImageRef};
use crate::detection::{ImageId, LabeledDetection, RawDetection, SourceTag};
use crate::ingest::{ClassVocabulary, PerImage};
use crate::saeg::{label_background, ClassTextMatrix, LabelOptions, SaegError};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceCounts {
    pub n_kn: usize,
    pub n_bg: usize,
    pub n_gd: usize,
}

impl SourceCounts {
    pub fn total(&self) -> usize {
        self.n_kn + self.n_bg + self.n_gd
    }

    fn tally<'a>(dets: impl IntoIterator<Item = &'a LabeledDetection>) -> Self {
        let mut c = Self::default();
        for d in dets {
            match d.source {
                SourceTag::Known => c.n_kn += 1,
                SourceTag::Background => c.n_bg += 1,
                SourceTag::Grounded => c.n_gd += 1,
            }
        }
        c
    }
}

/// The combined pool for one image. `counts` always matches the per-tag
/// tallies of `detections`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FusedPool {
    detections: Vec<LabeledDetection>,
    counts: SourceCounts,
}

impl FusedPool {
    pub fn detections(&self) -> &[LabeledDetection] {
        &self.detections
    }

    pub fn counts(&self) -> SourceCounts {
        self.counts
    }

    pub fn len(&self) -> usize {
        self.detections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detections.is_empty()
    }

    /// Keep only the entries for which `keep` is true, preserving order.
    pub fn retain_indices(&self, keep: &[bool]) -> FusedPool {
        let detections: Vec<_> = self
            .detections
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(d, _)| d.clone())
            .collect();
        let counts = SourceCounts::tally(&detections);
        FusedPool { detections, counts }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("expected only {expected} detections in this list, found {found} at index {index}")]
    SourceMismatch {
        expected: SourceTag,
        found: SourceTag,
        index: usize,
    },
    #[error("{tag} detection {index} has class {class_id}, not in the vocabulary")]
    UnknownClass {
        tag: SourceTag,
        index: usize,
        class_id: usize,
    },
    #[error("image {0} has no metadata (width/height)")]
    MissingImage(ImageId),
    #[error("background labelling: {0}")]
    Labelling(#[from] SaegError),
}

fn check_tags(list: &[LabeledDetection], expected: SourceTag) -> Result<(), FusionError> {
    match list.iter().position(|d| d.source != expected) {
        Some(index) => Err(FusionError::SourceMismatch {
            expected,
            found: list[index].source,
            index,
        }),
        None => Ok(()),
    }
}

/// Concatenate KN, labelled BG and GD detections.
pub fn fuse(
    kn: Vec<LabeledDetection>,
    bg_labeled: Vec<LabeledDetection>,
    gd: Vec<LabeledDetection>,
) -> Result<FusedPool, FusionError> {
    check_tags(&kn, SourceTag::Known)?;
    check_tags(&bg_labeled, SourceTag::Background)?;
    check_tags(&gd, SourceTag::Grounded)?;
    let counts = SourceCounts {
        n_kn: kn.len(),
        n_bg: bg_labeled.len(),
        n_gd: gd.len(),
    };
    let mut detections = kn;
    detections.extend(bg_labeled);
    detections.extend(gd);
    Ok(FusedPool { detections, counts })
}

/// Greedy class-wise non-maximum suppression over a pool. Survivors keep
/// their pool order. Higher score wins; equal scores keep the earlier entry.
pub fn class_nms(pool: &FusedPool, iou_threshold: f64) -> FusedPool {
    let dets = pool.detections();
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id && dets[k].bbox.iou(&dets[i].bbox) > iou_threshold
        });
        if !suppressed {
            keep[i] = true;
            kept.push(i);
        }
    }
    pool.retain_indices(&keep)
}

/// Raw detections of one image split by source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageSources {
    pub kn: Vec<RawDetection>,
    pub bg: Vec<RawDetection>,
    pub gd: Vec<RawDetection>,
}

/// Join per-source dumps by image id. Returns the joined map together with
/// the ids of images that appear in some dumps but not in others.
pub fn group_sources(
    kn: PerImage,
    bg: PerImage,
    gd: PerImage,
) -> (BTreeMap<ImageId, ImageSources>, BTreeSet<ImageId>) {
    let ids: BTreeSet<ImageId> = kn
        .keys()
        .chain(bg.keys())
        .chain(gd.keys())
        .copied()
        .collect();
    let partial = ids
        .iter()
        .copied()
        .filter(|id| {
            let present = [&kn, &bg, &gd]
                .iter()
                .filter(|m| !m.is_empty())
                .all(|m| m.contains_key(id));
            !present
        })
        .collect();
    let mut out: BTreeMap<ImageId, ImageSources> = BTreeMap::new();
    for (map, tag) in [
        (kn, SourceTag::Known),
        (bg, SourceTag::Background),
        (gd, SourceTag::Grounded),
    ] {
        for (id, dets) in map {
            let slot = out.entry(id).or_default();
            match tag {
                SourceTag::Known => slot.kn = dets,
                SourceTag::Background => slot.bg = dets,
                SourceTag::Grounded => slot.gd = dets,
            }
        }
    }
    (out, partial)
}

/// Stage switches and options for unknown-object labelling.
#[derive(Debug, Clone, PartialEq)]
pub struct LabellingConfig {
    pub use_gdino: bool,
    pub use_bg_labelling: bool,
    pub label: LabelOptions,
    /// Class-wise NMS IoU threshold applied to the fused pool; `None` disables it.
    pub nms_iou: Option<f64>,
}

impl Default for LabellingConfig {
    fn default() -> Self {
        Self {
            use_gdino: true,
            use_bg_labelling: true,
            label: LabelOptions::default(),
            nms_iou: None,
        }
    }
}

fn labeled(
    list: &[RawDetection],
    source: SourceTag,
    vocab: &ClassVocabulary,
) -> Result<Vec<LabeledDetection>, FusionError> {
    list.iter()
        .enumerate()
        .map(|(index, d)| {
            let l = d.to_labeled().filter(|_| d.source == source).ok_or(
                FusionError::SourceMismatch {
                    expected: source,
                    found: d.source,
                    index,
                },
            )?;
            if !vocab.contains(l.class_id) {
                return Err(FusionError::UnknownClass {
                    tag: source,
                    index,
                    class_id: l.class_id,
                });
            }
            Ok(l)
        })
        .collect()
}

/// Unknown-object labelling for one image: KN and GD pass through, BG boxes
/// are classified zero-shot, and the three lists are fused.
///
/// With `use_bg_labelling` off the BG proposals are dropped (they have no
/// class to report); with `use_gdino` off the GD list is ignored. No backend
/// call is made when there are no BG boxes to label.
pub fn label_image(
    sources: &ImageSources,
    image: &ImageRef,
    vocab: &ClassVocabulary,
    matrix: Option<&ClassTextMatrix>,
    backend: &mut dyn Backend,
    config: &LabellingConfig,
) -> Result<FusedPool, FusionError> {
    let kn = labeled(&sources.kn, SourceTag::Known, vocab)?;
    let gd = if config.use_gdino {
        labeled(&sources.gd, SourceTag::Grounded, vocab)?
    } else {
        Vec::new()
    };
    let bg = match matrix {
        Some(m) if config.use_bg_labelling && !sources.bg.is_empty() => {
            label_background(&sources.bg, image, m, backend, &config.label)?
        }
        _ => Vec::new(),
    };
    let pool = fuse(kn, bg, gd)?;
    tracing::debug!(
        image_id = image.id,
        stage = "fusion",
        n_kn = pool.counts.n_kn,
        n_bg = pool.counts.n_bg,
        n_gd = pool.counts.n_gd,
        "fused pool"
    );
    Ok(match config.nms_iou {
        Some(t) => class_nms(&pool, t),
        None => pool,
    })
}

/// Outcome of processing one image that could not be completed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: ImageId,
    pub stage: String,
    pub message: String,
}

/// Sequential driver over all images. Images missing from some dumps are
/// processed with what is available and logged; images whose labelling fails
/// are reported in the failure list and skipped.
pub fn run_unknown_labelling(
    raw: &BTreeMap<ImageId, ImageSources>,
    images: &BTreeMap<ImageId, ImageRef>,
    vocab: &ClassVocabulary,
    matrix: Option<&ClassTextMatrix>,
    backend: &mut dyn Backend,
    config: &LabellingConfig,
) -> (BTreeMap<ImageId, FusedPool>, Vec<ImageFailure>) {
    let mut pools = BTreeMap::new();
    let mut failures = Vec::new();
    for (&id, sources) in raw {
        let result = images
            .get(&id)
            .ok_or(FusionError::MissingImage(id))
            .and_then(|img| label_image(sources, img, vocab, matrix, backend, config));
        match result {
            Ok(pool) => {
                pools.insert(id, pool);
            }
            Err(e) => {
                tracing::warn!(image_id = id, stage = "labelling", error = %e, "image failed");
                failures.push(ImageFailure {
                    image_id: id,
                    stage: "labelling".into(),
                    message: e.to_string(),
                });
            }
        }
    }
    (pools, failures)
}

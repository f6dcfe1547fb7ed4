//! Deterministic stand-in for the model service.
//!
//! The stub "sees" the ground-truth scene instead of pixels:
//! * text prompts mentioning a class synonym embed near that class's axis;
//! * an ROI overlapping a ground-truth object (IoU >= 0.5) embeds near the
//!   object's class axis, anything else embeds as noise;
//! * a prompt box overlapping an object (IoU >= 0.3) segments to that
//!   object's rectangle with a high mask score, otherwise to its own rounded
//!   rectangle with a low score.
//!
//! All noise is derived from a hash of the request content, so identical
//! requests always get identical answers. Embeddings are produced at `f32`
//! precision, so in-process and over-the-wire answers are bit-identical.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Backend, BackendError, BackendFactory, BackendInfo, ImageRef};
use crate::bbox::BBox;
use crate::detection::{ClassId, ImageId};
use crate::embedding::Embedding;
use crate::ingest::{ClassVocabulary, GroundTruthSet, GtObject, Rle, SegmentationResult};

const EXTRA_DIMS: usize = 4;
const ROI_MATCH_IOU: f64 = 0.5;
const SEGMENT_MATCH_IOU: f64 = 0.3;
pub const DEFAULT_ROI_NOISE: f64 = 0.3;

#[derive(Debug, Clone)]
pub struct SceneStub {
    /// Lower-cased synonym -> class, longest first.
    keywords: Vec<(String, ClassId)>,
    scene: BTreeMap<ImageId, Vec<GtObject>>,
    dim: usize,
    identity: String,
    roi_noise: f64,
}

impl SceneStub {
    pub fn new(vocab: &ClassVocabulary, gt: &GroundTruthSet) -> Self {
        let mut keywords: Vec<(String, ClassId)> = vocab
            .entries()
            .iter()
            .flat_map(|e| {
                e.synonyms
                    .iter()
                    .map(move |s| (s.to_lowercase(), e.class_id))
            })
            .collect();
        keywords.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.cmp(b)));
        let scene: BTreeMap<_, _> = gt
            .images
            .iter()
            .map(|(id, img)| (*id, img.objects.clone()))
            .collect();

        let mut h = Sha256::new();
        h.update(vocab.content_hash().to_le_bytes());
        for (id, objs) in &scene {
            h.update(id.to_le_bytes());
            for o in objs {
                h.update(o.class_id.to_le_bytes());
                for v in o.bbox.to_array() {
                    h.update(v.to_le_bytes());
                }
            }
        }
        let digest = h.finalize();
        let identity = format!(
            "scene-stub/v1/{:02x}{:02x}{:02x}{:02x}",
            digest[0], digest[1], digest[2], digest[3]
        );
        Self {
            keywords,
            scene,
            dim: vocab.len() + EXTRA_DIMS,
            identity,
            roi_noise: DEFAULT_ROI_NOISE,
        }
    }

    /// A weaker image encoder: ROI embeddings of matched objects get noise of
    /// amplitude `roi_noise` instead of the default. `variant` is appended to
    /// the identity so cached class matrices are not shared across variants.
    pub fn with_variant(mut self, variant: &str, roi_noise: f64) -> Self {
        self.identity = format!("{}/{variant}", self.identity);
        self.roi_noise = roi_noise;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn noise(&self, key: &str, scale: f64) -> Vec<f64> {
        let digest = Sha256::digest(key.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(digest.into());
        (0..self.dim)
            .map(|_| scale * (rng.gen::<f64>() * 2.0 - 1.0))
            .collect()
    }

    fn axis_plus_noise(&self, axis: ClassId, key: &str, scale: f64) -> Embedding {
        let mut v = self.noise(key, scale);
        v[axis] += 1.0;
        Embedding::new(v)
            .expect("finite by construction")
            .rounded_to_f32()
    }

    fn best_object(&self, image: ImageId, b: &BBox) -> Option<(&GtObject, f64)> {
        self.scene
            .get(&image)?
            .iter()
            .map(|o| (o, o.bbox.iou(b)))
            .fold(None, |best: Option<(&GtObject, f64)>, cur| match best {
                Some(bst) if bst.1 >= cur.1 => Some(bst),
                _ => Some(cur),
            })
    }

    fn check_image(&self, image: &ImageRef) -> Result<(), BackendError> {
        if self.scene.contains_key(&image.id) {
            Ok(())
        } else {
            Err(BackendError::Remote(format!("unknown image {}", image.id)))
        }
    }
}

/// Column-major RLE of the axis-aligned pixel rectangle covering `b`, with
/// edges rounded to the nearest pixel boundary.
pub(crate) fn rect_rle(b: &BBox, height: u32, width: u32) -> Rle {
    let (h, w) = (height as u64, width as u64);
    let round = |v: f64, hi: u64| (v.round().max(0.0) as u64).min(hi);
    let (c0, c1) = (round(b.x1, w), round(b.x2, w));
    let (r0, r1) = (round(b.y1, h), round(b.y2, h));
    if c1 <= c0 || r1 <= r0 {
        return Rle {
            height,
            width,
            counts: vec![(h * w) as u32],
        };
    }
    let fg = r1 - r0;
    let mut counts = vec![(c0 * h + r0) as u32];
    for col in c0..c1 {
        counts.push(fg as u32);
        if col + 1 < c1 {
            counts.push((h - fg) as u32);
        }
    }
    counts.push(((w - c1) * h + (h - r1)) as u32);
    Rle {
        height,
        width,
        counts,
    }
}

impl Backend for SceneStub {
    fn info(&mut self) -> Result<BackendInfo, BackendError> {
        Ok(BackendInfo {
            dim: self.dim,
            identity: self.identity.clone(),
        })
    }

    fn text_embed(&mut self, texts: &[String]) -> Result<Vec<Embedding>, BackendError> {
        Ok(texts
            .iter()
            .map(|t| {
                let lower = t.to_lowercase();
                match self
                    .keywords
                    .iter()
                    .find(|(k, _)| lower.contains(k.as_str()))
                {
                    Some(&(_, class)) => self.axis_plus_noise(class, &format!("text:{t}"), 0.05),
                    None => Embedding::new(self.noise(&format!("text:{t}"), 1.0))
                        .expect("finite")
                        .rounded_to_f32(),
                }
            })
            .collect())
    }

    fn image_embed_roi(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
        context_pad: f64,
    ) -> Result<Vec<Embedding>, BackendError> {
        self.check_image(image)?;
        Ok(boxes
            .iter()
            .map(|b| {
                let key = format!("roi:{}:{:?}:{context_pad}", image.id, b.to_array());
                match self.best_object(image.id, b) {
                    Some((obj, iou)) if iou >= ROI_MATCH_IOU => {
                        self.axis_plus_noise(obj.class_id, &key, self.roi_noise)
                    }
                    _ => Embedding::new(self.noise(&key, 1.0))
                        .expect("finite")
                        .rounded_to_f32(),
                }
            })
            .collect())
    }

    fn segment_boxes(
        &mut self,
        image: &ImageRef,
        boxes: &[BBox],
    ) -> Result<Vec<SegmentationResult>, BackendError> {
        self.check_image(image)?;
        Ok(boxes
            .iter()
            .map(|b| {
                let key = format!("seg:{}:{:?}", image.id, b.to_array());
                match self.best_object(image.id, b) {
                    Some((obj, iou)) if iou >= SEGMENT_MATCH_IOU => SegmentationResult {
                        mask: rect_rle(&obj.bbox, image.height, image.width),
                        score: 0.6 + 0.4 * iou,
                    },
                    _ => {
                        let mask = rect_rle(b, image.height, image.width);
                        let empty = mask.counts.len() == 1;
                        let jitter = self.noise(&key, 1.0)[0].abs();
                        SegmentationResult {
                            mask,
                            score: if empty { 0.05 } else { 0.2 + 0.1 * jitter },
                        }
                    }
                }
            })
            .collect())
    }
}

/// Hands out clones of one [`SceneStub`].
#[derive(Debug, Clone)]
pub struct StubFactory {
    stub: SceneStub,
}

impl StubFactory {
    pub fn new(stub: SceneStub) -> Self {
        Self { stub }
    }
}

impl BackendFactory for StubFactory {
    fn connect(&self) -> Result<Box<dyn Backend>, BackendError> {
        Ok(Box::new(self.stub.clone()))
    }
}

//! Straightforward reference evaluator and random scene generator.
//!
//! Written independently of `opendet_core::eval`: its own IoU, quadratic
//! matching loops, and AP taken directly as the mean over recall levels of
//! the best precision achieved at any rank with at least that recall.

#![allow(dead_code)]

use std::collections::BTreeMap;

use opendet_core::eval::Prediction;
use opendet_core::ingest::{
    ClassEntry, ClassVocabulary, GroundTruthSet, GtObject, ImageGt, ImageInfo,
};
use opendet_core::BBox;
use rand::Rng;

pub fn ref_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = a[2].min(b[2]) - a[0].max(b[0]);
    let ih = a[3].min(b[3]) - a[1].max(b[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

#[derive(Clone, Debug)]
pub struct RefDet {
    pub bbox: [f64; 4],
    pub score: f64,
    pub class: usize,
}

#[derive(Clone, Debug)]
pub struct RefImage {
    pub id: u64,
    pub gts: Vec<([f64; 4], usize)>,
    pub dets: Vec<RefDet>,
}

#[derive(Clone, Debug)]
pub struct RefScene {
    pub n_classes: usize,
    pub known: Vec<bool>,
    pub images: Vec<RefImage>,
}

/// Indices of `dets` by descending score, ties by position.
fn ranked(dets: &[RefDet]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && dets[idx[j - 1]].score < dets[idx[j]].score {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

fn truncated(img: &RefImage, max_dets: usize) -> Vec<RefDet> {
    ranked(&img.dets)
        .into_iter()
        .take(max_dets)
        .map(|i| img.dets[i].clone())
        .collect()
}

/// Greedy matching of `dets` (already ranked) to `gts`; returns TP flags.
fn match_flags(dets: &[RefDet], gts: &[[f64; 4]], thr: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    let mut flags = Vec::new();
    for d in dets {
        let mut best_g = usize::MAX;
        let mut best_iou = -1.0;
        for (g, gt) in gts.iter().enumerate() {
            let v = ref_iou(d.bbox, *gt);
            if !used[g] && v >= thr && v > best_iou {
                best_iou = v;
                best_g = g;
            }
        }
        if best_g != usize::MAX {
            used[best_g] = true;
        }
        flags.push(best_g != usize::MAX);
    }
    flags
}

/// Mean over the 101 recall levels of max precision at recall >= level.
pub fn ref_ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (k, &f) in flags.iter().enumerate() {
        if f {
            tp += 1.0;
        }
        points.push((tp / n_gt as f64, tp / (k as f64 + 1.0)));
    }
    let mut total = 0.0;
    for level in 0..=100 {
        let r = level as f64 / 100.0;
        let best = points
            .iter()
            .filter(|p| p.0 >= r)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

pub fn ref_class_ap(scene: &RefScene, class: usize, thr: f64, max_dets: usize) -> Option<f64> {
    let n_gt: usize = scene
        .images
        .iter()
        .map(|i| i.gts.iter().filter(|g| g.1 == class).count())
        .sum();
    if n_gt == 0 {
        return None;
    }
    let mut pooled: Vec<(f64, u64, usize, bool)> = Vec::new();
    for img in &scene.images {
        let dets: Vec<RefDet> = truncated(img, max_dets)
            .into_iter()
            .filter(|d| d.class == class)
            .collect();
        let gts: Vec<[f64; 4]> = img
            .gts
            .iter()
            .filter(|g| g.1 == class)
            .map(|g| g.0)
            .collect();
        for (rank, (d, f)) in dets.iter().zip(match_flags(&dets, &gts, thr)).enumerate() {
            pooled.push((d.score, img.id, rank, f));
        }
    }
    pooled.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let flags: Vec<bool> = pooled.iter().map(|p| p.3).collect();
    Some(ref_ap_from_flags(&flags, n_gt))
}

pub struct RefReport {
    pub class_ap: Vec<Option<f64>>,
    pub ap_novel: Option<f64>,
    pub ap_known: Option<f64>,
    pub ap_all: Option<f64>,
    pub tp: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

pub fn ref_evaluate(scene: &RefScene, max_dets: usize) -> RefReport {
    let thresholds: Vec<f64> = (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect();
    let class_ap: Vec<Option<f64>> = (0..scene.n_classes)
        .map(|c| {
            let aps: Option<Vec<f64>> = thresholds
                .iter()
                .map(|&t| ref_class_ap(scene, c, t, max_dets))
                .collect();
            aps.map(|v| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect();
    let group = |want: Option<bool>| {
        let vals: Vec<f64> = class_ap
            .iter()
            .enumerate()
            .filter(|(c, _)| want.is_none_or(|k| scene.known[*c] == k))
            .filter_map(|(_, a)| *a)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let (tp, n_gt, n_pred) = ref_recall(scene, max_dets, 0.5);
    RefReport {
        ap_novel: group(Some(false)),
        ap_known: group(Some(true)),
        ap_all: group(None),
        class_ap,
        tp,
        n_gt,
        n_pred,
    }
}

/// Class-agnostic greedy recall counts `(tp, n_gt, n_pred)`.
pub fn ref_recall(scene: &RefScene, max_dets: usize, thr: f64) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut n_gt = 0;
    let mut n_pred = 0;
    for img in &scene.images {
        let dets = truncated(img, max_dets);
        let gts: Vec<[f64; 4]> = img.gts.iter().map(|g| g.0).collect();
        tp += match_flags(&dets, &gts, thr).iter().filter(|&&f| f).count();
        n_gt += gts.len();
        n_pred += dets.len();
    }
    (tp, n_gt, n_pred)
}

fn rand_box<R: Rng>(rng: &mut R, w: f64, h: f64) -> [f64; 4] {
    let bw = rng.gen_range(4.0..w / 2.0);
    let bh = rng.gen_range(4.0..h / 2.0);
    let x = rng.gen_range(0.0..w - bw);
    let y = rng.gen_range(0.0..h - bh);
    [x, y, x + bw, y + bh]
}

fn jitter<R: Rng>(rng: &mut R, b: [f64; 4], amount: f64, w: f64, h: f64) -> [f64; 4] {
    let bw = b[2] - b[0];
    let bh = b[3] - b[1];
    let mut j = |v: f64, s: f64, hi: f64| (v + rng.gen_range(-amount..amount) * s).clamp(0.0, hi);
    let x1 = j(b[0], bw, w);
    let y1 = j(b[1], bh, h);
    let x2 = j(b[2], bw, w).max(x1);
    let y2 = j(b[3], bh, h).max(y1);
    [x1, y1, x2, y2]
}

/// Random multi-image scene: up to `max_gt` objects and `max_dets` detections
/// per image over `n_classes` classes. Half the detections are perturbed
/// copies of ground truth, the rest are random; some scores are coarsely
/// quantised so ties occur.
pub fn random_scene<R: Rng>(
    rng: &mut R,
    n_classes: usize,
    max_gt: usize,
    max_dets: usize,
) -> RefScene {
    let (w, h) = (100.0, 80.0);
    let n_images = rng.gen_range(1..=5);
    let known: Vec<bool> = (0..n_classes).map(|c| c < n_classes.div_ceil(2)).collect();
    let images = (0..n_images)
        .map(|i| {
            let gts: Vec<([f64; 4], usize)> = (0..rng.gen_range(0..=max_gt))
                .map(|_| (rand_box(rng, w, h), rng.gen_range(0..n_classes)))
                .collect();
            let dets = (0..rng.gen_range(0..=max_dets))
                .map(|_| {
                    let (bbox, class) = if !gts.is_empty() && rng.gen_bool(0.6) {
                        let g = gts[rng.gen_range(0..gts.len())];
                        let class = if rng.gen_bool(0.8) {
                            g.1
                        } else {
                            rng.gen_range(0..n_classes)
                        };
                        (jitter(rng, g.0, 0.15, w, h), class)
                    } else {
                        (rand_box(rng, w, h), rng.gen_range(0..n_classes))
                    };
                    let score = if rng.gen_bool(0.2) {
                        (rng.gen_range(0..10) as f64) / 10.0
                    } else {
                        rng.gen::<f64>()
                    };
                    RefDet { bbox, score, class }
                })
                .collect();
            RefImage {
                id: (i * 7 + 3) as u64,
                gts,
                dets,
            }
        })
        .collect();
    RefScene {
        n_classes,
        known,
        images,
    }
}

pub fn to_engine(
    scene: &RefScene,
) -> (
    ClassVocabulary,
    GroundTruthSet,
    BTreeMap<u64, Vec<Prediction>>,
) {
    let vocab = ClassVocabulary::new(
        (0..scene.n_classes)
            .map(|c| ClassEntry {
                class_id: c,
                name: format!("class{c}"),
                synonyms: vec![],
                known: scene.known[c],
            })
            .collect(),
    )
    .unwrap();
    let mut gt = GroundTruthSet::default();
    let mut preds = BTreeMap::new();
    for img in &scene.images {
        let objects = img
            .gts
            .iter()
            .map(|(b, c)| GtObject {
                bbox: BBox::new(b[0], b[1], b[2], b[3]).unwrap(),
                class_id: *c,
            })
            .collect();
        gt.images.insert(
            img.id,
            ImageGt {
                info: ImageInfo {
                    id: img.id,
                    width: 100,
                    height: 80,
                    file_name: None,
                },
                objects,
            },
        );
        let dets: Vec<Prediction> = img
            .dets
            .iter()
            .map(|d| Prediction {
                bbox: BBox::new(d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3]).unwrap(),
                score: d.score,
                class_id: d.class,
            })
            .collect();
        if !dets.is_empty() {
            preds.insert(img.id, dets);
        }
    }
    (vocab, gt, preds)
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}

//! Grouped box AP and class-agnostic recall.
//!
//! Matching follows the COCO box protocol: per image and class, detections in
//! descending score order each take the still-unmatched ground truth with the
//! highest IoU at or above the threshold (ties go to the lower GT index).
//! Per-class precision/recall curves are built across all images, the
//! precision envelope is sampled at the 101 recall points `0, 0.01, ..., 1`,
//! and AP is averaged over IoU thresholds `0.50, 0.55, ..., 0.95`.
//!
//! LVIS federated annotations (negative / not-exhaustive category lists) and
//! area-range breakdowns are not modelled.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::detection::{ClassId, ImageId};
use crate::ingest::{ClassVocabulary, GroundTruthSet};
use crate::refine::FinalRecord;

/// Number of recall sample points.
pub const RECALL_POINTS: usize = 101;

/// `0.50, 0.55, ..., 0.95`.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Whether a pair at exactly the threshold counts as a match.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouCmp {
    #[default]
    AtLeast,
    Greater,
}

impl IouCmp {
    pub fn passes(self, iou: f64, threshold: f64) -> bool {
        match self {
            IouCmp::AtLeast => iou >= threshold,
            IouCmp::Greater => iou > threshold,
        }
    }
}

/// A scored, labelled box under evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: ClassId,
}

impl From<&FinalRecord> for Prediction {
    fn from(r: &FinalRecord) -> Self {
        Self {
            bbox: r.bbox,
            score: r.score,
            class_id: r.class_id,
        }
    }
}

/// Group final records by image, keeping file order within an image.
pub fn predictions_by_image(records: &[FinalRecord]) -> BTreeMap<ImageId, Vec<Prediction>> {
    let mut out: BTreeMap<ImageId, Vec<Prediction>> = BTreeMap::new();
    for r in records {
        out.entry(r.image_id).or_default().push(r.into());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub det_index: usize,
    pub gt_index: Option<usize>,
    /// IoU with the matched ground truth, 0 for false positives.
    pub iou: f64,
    pub score: f64,
    pub class_id: ClassId,
    pub image_id: ImageId,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("image {image_id}: prediction has class {class_id}, not in the vocabulary")]
    UnknownClass {
        image_id: ImageId,
        class_id: ClassId,
    },
    #[error("max_dets must be positive")]
    ZeroMaxDets,
    #[error("IoU threshold {0} must lie in (0, 1)")]
    Threshold(f64),
}

/// Greedy assignment on a precomputed IoU table (`ious[det][gt]`), detections
/// already in priority order.
pub fn greedy_assign(
    ious: &[Vec<f64>],
    n_gt: usize,
    threshold: f64,
    cmp: IouCmp,
) -> Vec<Option<usize>> {
    let mut taken = vec![false; n_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || !cmp.passes(iou, threshold) {
                    continue;
                }
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            best.map(|(g, _)| {
                taken[g] = true;
                g
            })
        })
        .collect()
}

/// Stable descending-score order of `dets`.
fn score_order(dets: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Match one image's detections of a single class against that class's
/// ground truth. Detections are visited in descending score order (ties by
/// input order); records come back in that visiting order.
pub fn greedy_match(
    dets: &[Prediction],
    gts: &[BBox],
    image_id: ImageId,
    threshold: f64,
    cmp: IouCmp,
) -> Vec<MatchRecord> {
    let order = score_order(dets);
    let ious: Vec<Vec<f64>> = order
        .iter()
        .map(|&d| gts.iter().map(|g| dets[d].bbox.iou(g)).collect())
        .collect();
    let assigned = greedy_assign(&ious, gts.len(), threshold, cmp);
    order
        .iter()
        .zip(assigned)
        .enumerate()
        .map(|(rank, (&d, g))| MatchRecord {
            det_index: d,
            gt_index: g,
            iou: g.map_or(0.0, |g| ious[rank][g]),
            score: dets[d].score,
            class_id: dets[d].class_id,
            image_id,
        })
        .collect()
}

/// 101-point interpolated AP from a TP/FP sequence in ranking order.
/// `None` when there is no ground truth (the class is left out of means).
pub fn average_precision_from_flags(is_tp: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(is_tp.len());
    let mut precision = Vec::with_capacity(is_tp.len());
    for (i, &hit) in is_tp.iter().enumerate() {
        tp += hit as usize;
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    let mut idx = 0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        while idx < recall.len() && recall[idx] < level {
            idx += 1;
        }
        if idx == recall.len() {
            break;
        }
        sum += precision[idx];
    }
    Some(sum / RECALL_POINTS as f64)
}

/// AP for one class at one threshold from records already in ranking order.
pub fn average_precision(records: &[MatchRecord], n_gt: usize) -> Option<f64> {
    let flags: Vec<bool> = records.iter().map(|r| r.gt_index.is_some()).collect();
    average_precision_from_flags(&flags, n_gt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalParams {
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
    pub recall_iou: f64,
    pub cmp: IouCmp,
}

impl EvalParams {
    pub fn new(max_dets: usize) -> Self {
        Self {
            max_dets,
            iou_thresholds: coco_iou_thresholds(),
            recall_iou: 0.5,
            cmp: IouCmp::AtLeast,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: ClassId,
    pub name: String,
    pub known: bool,
    pub n_gt: usize,
    pub n_pred: usize,
    /// Mean over IoU thresholds; `None` without ground truth.
    pub ap: Option<f64>,
    /// AP at the first (loosest) threshold.
    pub ap50: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Group means over classes with ground truth; `None` for an empty group.
    pub ap_novel: Option<f64>,
    pub ap_known: Option<f64>,
    pub ap_all: Option<f64>,
    pub ap50_novel: Option<f64>,
    pub ap50_known: Option<f64>,
    pub ap50_all: Option<f64>,
    /// Class-agnostic recall at `recall_iou`; `None` without ground truth.
    pub recall_05: Option<f64>,
    pub tp_count: usize,
    pub gt_count: usize,
    pub pred_count: usize,
    pub max_dets: usize,
    pub iou_thresholds: Vec<f64>,
    pub per_class: Vec<ClassAp>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Keep the `max_dets` highest-scoring predictions of each image.
pub fn truncate_per_image(
    preds: &BTreeMap<ImageId, Vec<Prediction>>,
    max_dets: usize,
) -> BTreeMap<ImageId, Vec<Prediction>> {
    preds
        .iter()
        .map(|(&id, dets)| {
            let order = score_order(dets);
            (
                id,
                order.into_iter().take(max_dets).map(|i| dets[i]).collect(),
            )
        })
        .collect()
}

/// Drop predictions for images absent from the ground truth, returning one
/// warning per dropped image.
fn restrict_to_gt(
    preds: &BTreeMap<ImageId, Vec<Prediction>>,
    gt: &GroundTruthSet,
) -> (BTreeMap<ImageId, Vec<Prediction>>, Vec<String>) {
    let mut kept = BTreeMap::new();
    let mut warnings = Vec::new();
    for (&id, dets) in preds {
        if gt.images.contains_key(&id) {
            kept.insert(id, dets.clone());
        } else {
            warnings.push(format!(
                "image {id} has {} predictions but no ground truth; ignored",
                dets.len()
            ));
        }
    }
    (kept, warnings)
}

/// Grouped mAP over known, novel and all classes, plus class-agnostic recall.
pub fn grouped_map(
    preds: &BTreeMap<ImageId, Vec<Prediction>>,
    gt: &GroundTruthSet,
    vocab: &ClassVocabulary,
    params: &EvalParams,
) -> Result<EvalReport, EvalError> {
    if params.max_dets == 0 {
        return Err(EvalError::ZeroMaxDets);
    }
    for (&image_id, dets) in preds {
        if let Some(d) = dets.iter().find(|d| !vocab.contains(d.class_id)) {
            return Err(EvalError::UnknownClass {
                image_id,
                class_id: d.class_id,
            });
        }
    }
    let (preds, mut warnings) = restrict_to_gt(preds, gt);
    let preds = truncate_per_image(&preds, params.max_dets);

    // (class, image) -> predictions / gt boxes
    let mut det_cells: BTreeMap<(ClassId, ImageId), Vec<Prediction>> = BTreeMap::new();
    for (&id, dets) in &preds {
        for d in dets {
            det_cells.entry((d.class_id, id)).or_default().push(*d);
        }
    }
    let mut gt_cells: BTreeMap<(ClassId, ImageId), Vec<BBox>> = BTreeMap::new();
    for (&id, img) in &gt.images {
        for o in &img.objects {
            gt_cells.entry((o.class_id, id)).or_default().push(o.bbox);
        }
    }
    let keys: BTreeSet<(ClassId, ImageId)> =
        det_cells.keys().chain(gt_cells.keys()).copied().collect();

    let n_thr = params.iou_thresholds.len();
    let mut per_class = Vec::with_capacity(vocab.len());
    let mut key_iter = keys.iter().peekable();
    for entry in vocab.entries() {
        let class = entry.class_id;
        let mut n_gt = 0;
        let mut n_pred = 0;
        // per threshold: (score, image_id, rank within image, is_tp)
        let mut ranked: Vec<Vec<(f64, ImageId, usize, bool)>> = vec![Vec::new(); n_thr];
        while let Some(&&(c, image_id)) = key_iter.peek() {
            if c != class {
                break;
            }
            key_iter.next();
            let dets = det_cells.get(&(c, image_id)).map_or(&[][..], Vec::as_slice);
            let gts = gt_cells.get(&(c, image_id)).map_or(&[][..], Vec::as_slice);
            n_gt += gts.len();
            n_pred += dets.len();
            if dets.is_empty() {
                continue;
            }
            let order = score_order(dets);
            let ious: Vec<Vec<f64>> = order
                .iter()
                .map(|&d| gts.iter().map(|g| dets[d].bbox.iou(g)).collect())
                .collect();
            for (t, &thr) in params.iou_thresholds.iter().enumerate() {
                let assigned = greedy_assign(&ious, gts.len(), thr, params.cmp);
                for (rank, (&d, g)) in order.iter().zip(&assigned).enumerate() {
                    ranked[t].push((dets[d].score, image_id, rank, g.is_some()));
                }
            }
        }
        let mut aps = Vec::with_capacity(n_thr);
        for list in &mut ranked {
            list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let flags: Vec<bool> = list.iter().map(|x| x.3).collect();
            aps.push(average_precision_from_flags(&flags, n_gt));
        }
        let ap = if n_gt == 0 {
            None
        } else {
            mean(aps.iter().map(|a| a.unwrap_or(0.0)))
        };
        per_class.push(ClassAp {
            class_id: class,
            name: entry.name.clone(),
            known: entry.known,
            n_gt,
            n_pred,
            ap,
            ap50: aps.first().copied().flatten(),
        });
    }

    let group = |pick: fn(&ClassAp) -> Option<f64>, filter: &dyn Fn(&ClassAp) -> bool| {
        mean(per_class.iter().filter(|c| filter(c)).filter_map(pick))
    };
    let recall = localization_recall(&preds, gt, params.recall_iou, params.cmp)?;
    let mut notes = Vec::new();
    if recall.n_pred == 0 {
        notes.push("no predictions".to_string());
    }
    if gt.object_count() == 0 {
        warnings.push("ground truth has no annotations".into());
    }
    Ok(EvalReport {
        ap_novel: group(|c| c.ap, &|c| !c.known),
        ap_known: group(|c| c.ap, &|c| c.known),
        ap_all: group(|c| c.ap, &|_| true),
        ap50_novel: group(|c| c.ap50, &|c| !c.known),
        ap50_known: group(|c| c.ap50, &|c| c.known),
        ap50_all: group(|c| c.ap50, &|_| true),
        recall_05: recall.recall,
        tp_count: recall.tp,
        gt_count: recall.n_gt,
        pred_count: recall.n_pred,
        max_dets: params.max_dets,
        iou_thresholds: params.iou_thresholds.clone(),
        per_class,
        warnings,
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallResult {
    /// `tp / n_gt`; `None` when there is no ground truth.
    pub recall: Option<f64>,
    pub tp: usize,
    pub n_gt: usize,
    pub n_pred: usize,
}

/// Class-agnostic recall: per image, predictions in descending score order
/// greedily claim unmatched ground-truth boxes of any class. Predictions for
/// images without ground truth count towards `n_pred` only.
pub fn localization_recall(
    preds: &BTreeMap<ImageId, Vec<Prediction>>,
    gt: &GroundTruthSet,
    threshold: f64,
    cmp: IouCmp,
) -> Result<RecallResult, EvalError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(EvalError::Threshold(threshold));
    }
    let mut tp = 0;
    let n_pred = preds.values().map(Vec::len).sum();
    let n_gt = gt.object_count();
    for (id, img) in &gt.images {
        let Some(dets) = preds.get(id) else { continue };
        let boxes: Vec<BBox> = img.objects.iter().map(|o| o.bbox).collect();
        let order = score_order(dets);
        let ious: Vec<Vec<f64>> = order
            .iter()
            .map(|&d| boxes.iter().map(|g| dets[d].bbox.iou(g)).collect())
            .collect();
        tp += greedy_assign(&ious, boxes.len(), threshold, cmp)
            .iter()
            .filter(|g| g.is_some())
            .count();
    }
    let recall = (n_gt > 0).then(|| tp as f64 / n_gt as f64);
    Ok(RecallResult {
        recall,
        tp,
        n_gt,
        n_pred,
    })
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", v * 100.0))
}

impl EvalReport {
    /// Markdown summary. `ap50_table` adds the AP50-only table used for
    /// open-vocabulary COCO reporting.
    pub fn to_markdown(&self, ap50_table: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Evaluation report\n");
        let _ = writeln!(
            s,
            "mAP@[0.5:0.95], top {} predictions per image\n",
            self.max_dets
        );
        let _ = writeln!(s, "| Novel AP | Known AP | All AP |");
        let _ = writeln!(s, "|---:|---:|---:|");
        let _ = writeln!(
            s,
            "| {} | {} | {} |\n",
            pct(self.ap_novel),
            pct(self.ap_known),
            pct(self.ap_all)
        );
        if ap50_table {
            let _ = writeln!(s, "AP50\n");
            let _ = writeln!(s, "| Novel AP50 | Known AP50 | All AP50 |");
            let _ = writeln!(s, "|---:|---:|---:|");
            let _ = writeln!(
                s,
                "| {} | {} | {} |\n",
                pct(self.ap50_novel),
                pct(self.ap50_known),
                pct(self.ap50_all)
            );
        }
        let _ = writeln!(s, "Localization (class-agnostic, IoU 0.5)\n");
        let _ = writeln!(s, "| Recall (%) | Num TP | Num GT | Tot Pred |");
        let _ = writeln!(s, "|---:|---:|---:|---:|");
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} |",
            pct(self.recall_05),
            self.tp_count,
            self.gt_count,
            self.pred_count
        );
        for (title, items) in [("Notes", &self.notes), ("Warnings", &self.warnings)] {
            if !items.is_empty() {
                let _ = writeln!(s, "\n## {title}\n");
                for n in items {
                    let _ = writeln!(s, "- {n}");
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{ClassEntry, GtObject, ImageGt, ImageInfo};

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn p(bbox: BBox, score: f64, class_id: ClassId) -> Prediction {
        Prediction {
            bbox,
            score,
            class_id,
        }
    }

    #[test]
    fn greedy_examples() {
        let g = [b(0., 0., 10., 10.)];
        let one = greedy_match(&[p(g[0], 0.9, 0)], &g, 1, 0.5, IouCmp::AtLeast);
        assert_eq!(one[0].gt_index, Some(0));
        assert_eq!(one[0].iou, 1.0);

        let two = greedy_match(
            &[p(g[0], 0.4, 0), p(g[0], 0.9, 0)],
            &g,
            1,
            0.5,
            IouCmp::AtLeast,
        );
        assert_eq!((two[0].det_index, two[0].gt_index), (1, Some(0)));
        assert_eq!((two[1].det_index, two[1].gt_index), (0, None));
    }

    #[test]
    fn greedy_on_iou_table() {
        // A: 0.6 with G1, 0.55 with G2; B: 0.6 with G1, nothing with G2.
        let ious = vec![vec![0.6, 0.55], vec![0.6, 0.0]];
        assert_eq!(
            greedy_assign(&ious, 2, 0.5, IouCmp::AtLeast),
            vec![Some(0), None]
        );
        assert_eq!(
            greedy_assign(&[vec![0.5]], 1, 0.5, IouCmp::AtLeast),
            vec![Some(0)]
        );
        assert_eq!(
            greedy_assign(&[vec![0.5]], 1, 0.5, IouCmp::Greater),
            vec![None]
        );
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision_from_flags(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision_from_flags(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision_from_flags(&[], 3), Some(0.0));
        assert_eq!(average_precision_from_flags(&[true], 0), None);
        let half = average_precision_from_flags(&[true, false], 2).unwrap();
        assert!((half - 51.0 / 101.0).abs() < 1e-15);
    }

    fn toy() -> (ClassVocabulary, GroundTruthSet) {
        let vocab = ClassVocabulary::new(vec![
            ClassEntry {
                class_id: 0,
                name: "known".into(),
                synonyms: vec![],
                known: true,
            },
            ClassEntry {
                class_id: 1,
                name: "novel".into(),
                synonyms: vec![],
                known: false,
            },
            ClassEntry {
                class_id: 2,
                name: "absent".into(),
                synonyms: vec![],
                known: false,
            },
        ])
        .unwrap();
        let mut gt = GroundTruthSet::default();
        gt.images.insert(
            1,
            ImageGt {
                info: ImageInfo {
                    id: 1,
                    width: 100,
                    height: 100,
                    file_name: None,
                },
                objects: vec![
                    GtObject {
                        bbox: b(0., 0., 10., 10.),
                        class_id: 0,
                    },
                    GtObject {
                        bbox: b(50., 50., 70., 80.),
                        class_id: 1,
                    },
                ],
            },
        );
        (vocab, gt)
    }

    #[test]
    fn perfect_predictions_score_one() {
        let (vocab, gt) = toy();
        let preds = BTreeMap::from([(
            1,
            vec![
                p(b(0., 0., 10., 10.), 0.9, 0),
                p(b(50., 50., 70., 80.), 0.8, 1),
            ],
        )]);
        let r = grouped_map(&preds, &gt, &vocab, &EvalParams::new(300)).unwrap();
        assert_eq!(r.ap_all, Some(1.0));
        assert_eq!(r.ap_known, Some(1.0));
        assert_eq!(r.ap_novel, Some(1.0));
        assert_eq!(r.per_class[2].ap, None);
        assert_eq!((r.tp_count, r.gt_count, r.pred_count), (2, 2, 2));
    }

    #[test]
    fn closed_set_predictions_give_zero_novel_ap() {
        let (vocab, gt) = toy();
        let preds = BTreeMap::from([(
            1,
            vec![
                p(b(0., 0., 10., 10.), 0.9, 0),
                p(b(50., 50., 70., 80.), 0.8, 0),
            ],
        )]);
        let r = grouped_map(&preds, &gt, &vocab, &EvalParams::new(300)).unwrap();
        assert_eq!(r.ap_novel, Some(0.0));
        assert_eq!(r.ap_all, Some(0.5));
    }

    #[test]
    fn max_dets_truncates_per_image() {
        let (vocab, gt) = toy();
        let preds = BTreeMap::from([(
            1,
            vec![
                p(b(0., 0., 10., 10.), 0.1, 0),
                p(b(50., 50., 70., 80.), 0.8, 1),
            ],
        )]);
        let r = grouped_map(&preds, &gt, &vocab, &EvalParams::new(1)).unwrap();
        assert_eq!(r.pred_count, 1);
        assert_eq!(r.ap_known, Some(0.0));
    }

    #[test]
    fn errors_and_warnings() {
        let (vocab, gt) = toy();
        let bad = BTreeMap::from([(1, vec![p(b(0., 0., 1., 1.), 0.5, 7)])]);
        assert!(matches!(
            grouped_map(&bad, &gt, &vocab, &EvalParams::new(10)),
            Err(EvalError::UnknownClass { .. })
        ));
        assert!(grouped_map(&BTreeMap::new(), &gt, &vocab, &EvalParams::new(0)).is_err());
        let stray = BTreeMap::from([(9, vec![p(b(0., 0., 1., 1.), 0.5, 0)])]);
        let r = grouped_map(&stray, &gt, &vocab, &EvalParams::new(10)).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert_eq!(r.notes, vec!["no predictions".to_string()]);
        assert_eq!(r.recall_05, Some(0.0));
        assert!(localization_recall(&stray, &gt, 1.0, IouCmp::AtLeast).is_err());
    }

    #[test]
    fn recall_from_table_counts() {
        let r: f64 = 17026.0 / 45570.0 * 100.0;
        assert!((r - 37.36).abs() < 0.005);
    }

    #[test]
    fn markdown_has_tables() {
        let (vocab, gt) = toy();
        let r = grouped_map(&BTreeMap::new(), &gt, &vocab, &EvalParams::new(100)).unwrap();
        let md = r.to_markdown(true);
        assert!(md.contains("| Novel AP | Known AP | All AP |"));
        assert!(md.contains("Novel AP50"));
        assert!(!r.to_markdown(false).contains("Novel AP50"));
    }
}

//! Detection metrics: greedy IoU matching, precision/recall, top-1 accuracy, all-points
//! average precision and a confusion matrix with a background row and column.

use serde::Serialize;

use crate::annotation::{Annotation, LabelMap};
use crate::geometry::{rank_order, Detection};

/// Default IoU a detection needs to count as a hit.
pub const DEFAULT_IOU: f64 = 0.5;

/// Outcome of matching one image's detections against its ground truths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MatchResult {
    /// For each detection (input order), the ground truth it consumed.
    pub detections: Vec<Option<usize>>,
    /// For each ground truth, the detection that matched it.
    pub ground_truths: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.detections.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.detections.len() - self.tp()
    }

    pub fn missed(&self) -> usize {
        self.ground_truths.iter().filter(|m| m.is_none()).count()
    }

    pub fn is_tp(&self, det: usize) -> bool {
        self.detections[det].is_some()
    }
}

/// Detection indices in processing order: [`rank_order`], then input index.
fn ranked(dets: &[Detection]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dets.len()).collect();
    idx.sort_by(|&a, &b| rank_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    idx
}

/// Greedy matching in descending confidence. Each detection takes the unmatched same-class
/// ground truth with the highest IoU, provided it reaches `iou_threshold`; ties go to the
/// lowest ground-truth index.
pub fn match_detections(dets: &[Detection], gts: &[Annotation], iou_threshold: f64) -> MatchResult {
    let mut out = MatchResult {
        detections: vec![None; dets.len()],
        ground_truths: vec![None; gts.len()],
    };
    for d in ranked(dets) {
        let det = &dets[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if out.ground_truths[g].is_some() || gt.class_id != det.class_id {
                continue;
            }
            let v = det.bbox.iou(&gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            out.detections[d] = Some(g);
            out.ground_truths[g] = Some(d);
        }
    }
    out
}

/// Precision and recall of one match result, with 1.0 for an empty denominator.
pub fn precision_recall(m: &MatchResult) -> (f64, f64) {
    ratio_pair(m.tp(), m.detections.len(), m.ground_truths.len())
}

fn ratio_pair(tp: usize, dets: usize, gts: usize) -> (f64, f64) {
    let p = if dets == 0 { 1.0 } else { tp as f64 / dets as f64 };
    let r = if gts == 0 { 1.0 } else { tp as f64 / gts as f64 };
    (p, r)
}

/// A single-object image: its detections and the class of its one ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifiedImage {
    pub dets: Vec<Detection>,
    pub gt_class: usize,
}

/// Highest-ranked detection.
pub fn top_detection(dets: &[Detection]) -> Option<&Detection> {
    dets.iter().min_by(|a, b| rank_order(a, b))
}

/// Fraction of images whose top detection carries the ground-truth class. An image without
/// detections counts as wrong; an empty list gives 0.
pub fn accuracy_top1(images: &[ClassifiedImage]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let correct = images
        .iter()
        .filter(|im| top_detection(&im.dets).is_some_and(|d| d.class_id == im.gt_class))
        .count();
    correct as f64 / images.len() as f64
}

/// All-points interpolated average precision over a pooled set of images, each given as
/// `(detections, ground truths)`. No ground truths gives 1.0 without detections and 0.0
/// with them.
pub fn average_precision(images: &[(Vec<Detection>, Vec<Annotation>)], iou_threshold: f64) -> f64 {
    let total_gts: usize = images.iter().map(|(_, g)| g.len()).sum();
    let total_dets: usize = images.iter().map(|(d, _)| d.len()).sum();
    if total_gts == 0 {
        return if total_dets == 0 { 1.0 } else { 0.0 };
    }
    // (image, detection, hit)
    let mut pooled: Vec<(usize, usize, bool)> = Vec::with_capacity(total_dets);
    for (i, (dets, gts)) in images.iter().enumerate() {
        let m = match_detections(dets, gts, iou_threshold);
        pooled.extend((0..dets.len()).map(|d| (i, d, m.is_tp(d))));
    }
    pooled.sort_by(|a, b| {
        let (da, db) = (&images[a.0].0[a.1], &images[b.0].0[b.1]);
        rank_order(da, db).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    let mut points = Vec::with_capacity(pooled.len());
    let mut tp = 0usize;
    for (k, (_, _, hit)) in pooled.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / total_gts as f64, tp as f64 / (k + 1) as f64));
    }
    // Running maximum of precision from the right.
    for k in (0..points.len().saturating_sub(1)).rev() {
        points[k].1 = points[k].1.max(points[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in points {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap.clamp(0.0, 1.0)
}

/// `(C + 1) x (C + 1)` counts; rows are ground-truth classes, columns predicted classes, and
/// index `C` is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes + 1]; classes + 1],
        }
    }

    pub fn background(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    pub fn row_sum(&self, gt: usize) -> u64 {
        self.counts[gt].iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> Vec<u64> {
        (0..self.classes).map(|c| self.counts[c][c]).collect()
    }

    /// Off-diagonal cells with a non-zero count, as `(gt, pred, count)`.
    pub fn confusions(&self) -> Vec<(usize, usize, u64)> {
        let mut out = Vec::new();
        for (g, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                if g != p && n > 0 {
                    out.push((g, p, n));
                }
            }
        }
        out
    }
}

/// One increment per image: `(gt, top class)` for the best detection at or above
/// `conf_threshold`, `(gt, background)` when there is none. Class ids at or beyond `classes`
/// land in the background slot.
pub fn confusion(images: &[ClassifiedImage], classes: usize, conf_threshold: f64) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::new(classes);
    let slot = |c: usize| c.min(classes);
    for im in images {
        let kept: Vec<Detection> = im.dets.iter().filter(|d| d.confidence >= conf_threshold).copied().collect();
        let pred = top_detection(&kept).map_or(classes, |d| slot(d.class_id));
        m.counts[slot(im.gt_class)][pred] += 1;
    }
    m
}

/// One image in an evaluation set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub id: String,
    pub dets: Vec<Detection>,
    pub gts: Vec<Annotation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: usize,
    pub ground_truths: usize,
    pub detections: usize,
    pub iou_threshold: f64,
    pub conf_threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
    /// Top-1 accuracy over the images holding exactly one ground truth.
    pub accuracy: f64,
    pub accuracy_images: usize,
    pub average_precision: f64,
    pub confusion: ConfusionMatrix,
}

/// Full metric set. Detections below `conf_threshold` are dropped before matching,
/// accuracy and the confusion matrix; average precision sweeps every detection.
pub fn evaluate(images: &[EvalImage], classes: usize, iou_threshold: f64, conf_threshold: f64) -> EvalReport {
    let mut tp = 0;
    let mut kept_total = 0;
    let mut gts_total = 0;
    let mut single = Vec::new();
    let mut pooled = Vec::with_capacity(images.len());
    for im in images {
        let kept: Vec<Detection> = im.dets.iter().filter(|d| d.confidence >= conf_threshold).copied().collect();
        let m = match_detections(&kept, &im.gts, iou_threshold);
        tp += m.tp();
        kept_total += kept.len();
        gts_total += im.gts.len();
        if im.gts.len() == 1 {
            single.push(ClassifiedImage {
                dets: kept,
                gt_class: im.gts[0].class_id,
            });
        }
        pooled.push((im.dets.clone(), im.gts.clone()));
    }
    let (precision, recall) = ratio_pair(tp, kept_total, gts_total);
    EvalReport {
        images: images.len(),
        ground_truths: gts_total,
        detections: kept_total,
        iou_threshold,
        conf_threshold,
        tp,
        fp: kept_total - tp,
        precision,
        recall,
        accuracy: accuracy_top1(&single),
        accuracy_images: single.len(),
        average_precision: average_precision(&pooled, iou_threshold),
        confusion: confusion(&single, classes, 0.0),
    }
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned two-column table of the headline metrics.
    pub fn to_table(&self) -> String {
        let rows = [
            ("Precision".to_string(), self.precision),
            ("Recall".to_string(), self.recall),
            ("Accuracy".to_string(), self.accuracy),
            (format!("AP@{:.2}", self.iou_threshold), self.average_precision),
        ];
        let mut out = format!("{:<10} {:>8}\n", "Metric", "Value");
        for (k, v) in rows {
            out.push_str(&format!("{k:<10} {v:>8.3}\n"));
        }
        out.push_str(&format!(
            "\nimages {}  ground truths {}  detections {}  TP {}  FP {}\n",
            self.images, self.ground_truths, self.detections, self.tp, self.fp
        ));
        out
    }

    /// Off-diagonal confusion entries rendered with class names.
    pub fn confusion_lines(&self, map: &LabelMap) -> Vec<String> {
        let name = |c: usize| {
            if c == self.confusion.background() {
                "background".to_string()
            } else {
                map.name(c).map_or_else(|| c.to_string(), str::to_string)
            }
        };
        self.confusion
            .confusions()
            .into_iter()
            .map(|(g, p, n)| format!("{} -> {}: {n}", name(g), name(p)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cmp::Ordering;
    use crate::geometry::BBox;
    use proptest::prelude::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn det(class_id: usize, b: BBox, confidence: f64) -> Detection {
        Detection {
            bbox: b,
            class_id,
            confidence,
        }
    }

    fn gt(class_id: usize, b: BBox) -> Annotation {
        Annotation { class_id, bbox: b }
    }

    #[test]
    fn match_examples() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let m = match_detections(&[det(1, b, 0.9)], &[gt(1, b)], 1.0);
        assert_eq!((m.tp(), m.fp()), (1, 0));

        let m = match_detections(&[det(1, b, 0.9), det(1, b, 0.8)], &[gt(1, b)], 0.5);
        assert_eq!((m.tp(), m.fp()), (1, 1));
        assert_eq!(m.detections, vec![Some(0), None]);
        assert_eq!(precision_recall(&m), (0.5, 1.0));

        let m = match_detections(&[det(2, b, 0.9)], &[gt(1, b)], 0.5);
        assert_eq!((m.tp(), m.fp(), m.missed()), (0, 1, 1));
    }

    #[test]
    fn precision_recall_conventions() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let gts: Vec<_> = (0..4).map(|_| gt(0, b)).collect();
        assert_eq!(precision_recall(&match_detections(&[], &gts, 0.5)), (1.0, 0.0));
        assert_eq!(precision_recall(&match_detections(&[], &[], 0.5)), (1.0, 1.0));
        let m = match_detections(&[det(0, b, 0.5)], &[gt(0, b)], 0.5);
        assert_eq!(precision_recall(&m), (1.0, 1.0));
    }

    #[test]
    fn accuracy_examples() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let right = |c| ClassifiedImage {
            dets: vec![det(c, b, 0.9)],
            gt_class: c,
        };
        let wrong = |c| ClassifiedImage {
            dets: vec![det(c + 1, b, 0.9), det(c, b, 0.3)],
            gt_class: c,
        };
        assert_eq!(accuracy_top1(&[right(0), right(3)]), 1.0);
        let mut set: Vec<_> = (0..23).map(right).collect();
        set.push(wrong(4));
        set.push(ClassifiedImage {
            dets: vec![],
            gt_class: 2,
        });
        assert_eq!(accuracy_top1(&set), 0.92);
        let none: Vec<_> = (0..5)
            .map(|c| ClassifiedImage {
                dets: vec![],
                gt_class: c,
            })
            .collect();
        assert_eq!(accuracy_top1(&none), 0.0);
    }

    #[test]
    fn ap_examples() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let far = bx(0.1, 0.1, 0.1, 0.1);
        assert_eq!(average_precision(&[(vec![det(0, b, 0.9)], vec![gt(0, b)])], 0.5), 1.0);
        let ap = average_precision(&[(vec![det(0, far, 0.9), det(0, b, 0.8)], vec![gt(0, b)])], 0.5);
        assert!((ap - 0.5).abs() < 1e-15);
        assert_eq!(average_precision(&[], 0.5), 1.0);
        assert_eq!(average_precision(&[(vec![det(0, b, 0.9)], vec![])], 0.5), 0.0);
        assert_eq!(average_precision(&[(vec![], vec![gt(0, b)])], 0.5), 0.0);
    }

    #[test]
    fn confusion_examples() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let im = |gt_class, pred: Option<usize>| ClassifiedImage {
            dets: pred.map(|p| det(p, b, 0.9)).into_iter().collect(),
            gt_class,
        };
        let m = confusion(&[im(0, Some(0)), im(1, Some(1)), im(1, Some(1))], 3, 0.25);
        assert_eq!(m.diagonal(), vec![1, 2, 0]);
        assert!(m.confusions().is_empty());

        let m = confusion(&[im(0, Some(2)), im(2, Some(0)), im(1, None)], 3, 0.25);
        assert_eq!(m.get(0, 2), 1);
        assert_eq!(m.get(2, 0), 1);
        assert_eq!(m.get(1, m.background()), 1);
        assert_eq!(m.total(), 3);
        assert_eq!(m.row_sum(1), 1);

        // Below-threshold detections fall back to background.
        let low = ClassifiedImage {
            dets: vec![det(0, b, 0.1)],
            gt_class: 0,
        };
        assert_eq!(confusion(&[low], 3, 0.25).get(0, 3), 1);
    }

    #[test]
    fn report_rendering() {
        let b = bx(0.5, 0.5, 0.2, 0.2);
        let images = vec![
            EvalImage {
                id: "a".into(),
                dets: vec![det(0, b, 0.9)],
                gts: vec![gt(0, b)],
            },
            EvalImage {
                id: "b".into(),
                dets: vec![det(2, b, 0.9)],
                gts: vec![gt(1, b)],
            },
        ];
        let r = evaluate(&images, 3, 0.5, 0.25);
        assert_eq!((r.tp, r.fp), (1, 1));
        assert_eq!(r.accuracy, 0.5);
        let table = r.to_table();
        assert!(table.contains("Precision     0.500"));
        assert!(table.contains("Accuracy      0.500"));
        let lines = r.confusion_lines(&LabelMap::addsl());
        assert_eq!(lines, vec!["B -> C: 1".to_string()]);
        assert!(r.to_json().contains("\"accuracy\": 0.5"));
    }

    /// Enumerates every consistent assignment of detections to ground truths and keeps the
    /// lexicographically best under greedy priority: in processing order, prefer being
    /// matched, then higher IoU, then the lower ground-truth index.
    fn exhaustive(dets: &[Detection], gts: &[Annotation], thr: f64) -> MatchResult {
        let order = ranked(dets);
        let mut best: Option<(Vec<(u8, f64, i64)>, Vec<Option<usize>>)> = None;
        let mut cur = vec![None; dets.len()];
        fn rec(
            k: usize,
            order: &[usize],
            dets: &[Detection],
            gts: &[Annotation],
            thr: f64,
            used: &mut Vec<bool>,
            cur: &mut Vec<Option<usize>>,
            best: &mut Option<(Vec<(u8, f64, i64)>, Vec<Option<usize>>)>,
        ) {
            if k == order.len() {
                let key: Vec<(u8, f64, i64)> = order
                    .iter()
                    .map(|&d| match cur[d] {
                        Some(g) => (1, dets[d].bbox.iou(&gts[g].bbox), -(g as i64)),
                        None => (0, 0.0, 0),
                    })
                    .collect();
                let better = match best {
                    None => true,
                    Some((bk, _)) => key
                        .iter()
                        .zip(bk.iter())
                        .map(|(a, b)| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)))
                        .find(|o| *o != Ordering::Equal)
                        == Some(Ordering::Greater),
                };
                if better {
                    *best = Some((key, cur.clone()));
                }
                return;
            }
            let d = order[k];
            cur[d] = None;
            rec(k + 1, order, dets, gts, thr, used, cur, best);
            for g in 0..gts.len() {
                if !used[g] && gts[g].class_id == dets[d].class_id && dets[d].bbox.iou(&gts[g].bbox) >= thr {
                    used[g] = true;
                    cur[d] = Some(g);
                    rec(k + 1, order, dets, gts, thr, used, cur, best);
                    used[g] = false;
                    cur[d] = None;
                }
            }
        }
        let mut used = vec![false; gts.len()];
        rec(0, &order, dets, gts, thr, &mut used, &mut cur, &mut best);
        let chosen = best.unwrap().1;
        let mut ground_truths = vec![None; gts.len()];
        for (d, g) in chosen.iter().enumerate() {
            if let Some(g) = g {
                ground_truths[*g] = Some(d);
            }
        }
        MatchResult {
            detections: chosen,
            ground_truths,
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.2f64..0.8, 0.2f64..0.8, 0.1f64..0.4, 0.1f64..0.4).prop_map(|(cx, cy, w, h)| bx(cx, cy, w, h))
    }

    fn arb_det() -> impl Strategy<Value = Detection> {
        (arb_box(), 0usize..2, prop_oneof![Just(0.5), 0.0f64..1.0]).prop_map(|(b, c, s)| det(c, b, s))
    }

    proptest! {
        #[test]
        fn greedy_matches_exhaustive_oracle(
            dets in prop::collection::vec(arb_det(), 0..=6),
            gts in prop::collection::vec((0usize..2, arb_box()).prop_map(|(c, b)| gt(c, b)), 0..=4),
            thr in 0.05f64..0.9,
        ) {
            let m = match_detections(&dets, &gts, thr);
            prop_assert_eq!(&m, &exhaustive(&dets, &gts, thr));
            prop_assert!(m.tp() <= dets.len().min(gts.len()));
            let (p, r) = precision_recall(&m);
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        }

        #[test]
        fn ap_is_bounded_and_monotone_in_threshold(
            dets in prop::collection::vec(arb_det(), 0..=6),
            gts in prop::collection::vec((0usize..2, arb_box()).prop_map(|(c, b)| gt(c, b)), 0..=4),
            t1 in 0.05f64..0.95, t2 in 0.05f64..0.95,
        ) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let set = [(dets, gts)];
            let a_lo = average_precision(&set, lo);
            let a_hi = average_precision(&set, hi);
            prop_assert!((0.0..=1.0).contains(&a_lo));
            prop_assert!(a_hi <= a_lo + 1e-12);
        }

        #[test]
        fn equal_confidence_permutation_keeps_counts(
            boxes in prop::collection::vec((arb_box(), 0usize..2), 1..=6),
            gts in prop::collection::vec((0usize..2, arb_box()).prop_map(|(c, b)| gt(c, b)), 0..=4),
            rot in 0usize..6,
        ) {
            let dets: Vec<_> = boxes.iter().map(|(b, c)| det(*c, *b, 0.7)).collect();
            let mut perm = dets.clone();
            perm.rotate_left(rot % dets.len());
            let a = match_detections(&dets, &gts, 0.3);
            let b = match_detections(&perm, &gts, 0.3);
            prop_assert_eq!((a.tp(), a.fp()), (b.tp(), b.fp()));
        }

        #[test]
        fn confusion_rows_match_class_frequencies(
            items in prop::collection::vec((0usize..4, prop::option::of((0usize..4, 0.0f64..1.0))), 0..30),
        ) {
            let b = bx(0.5, 0.5, 0.2, 0.2);
            let images: Vec<_> = items.iter().map(|(g, p)| ClassifiedImage {
                dets: p.iter().map(|(c, s)| det(*c, b, *s)).collect(),
                gt_class: *g,
            }).collect();
            let m = confusion(&images, 4, 0.3);
            prop_assert_eq!(m.total(), images.len() as u64);
            for c in 0..4 {
                prop_assert_eq!(m.row_sum(c), items.iter().filter(|(g, _)| *g == c).count() as u64);
            }
        }
    }
}

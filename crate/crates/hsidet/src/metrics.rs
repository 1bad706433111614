//! Detection evaluation: greedy matching, precision/recall, and mean
//! average precision as the area under the interpolated precision-recall
//! curve (all-point interpolation).

use serde::Serialize;

use crate::detect::{detection_order, iou_cxcywh, Detection, GtBox};

/// Counts at a fixed confidence threshold. tp + fn == total ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EvalCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// One point of the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Full evaluation output.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Precision at the configured confidence threshold.
    pub precision: f64,
    /// Recall at the configured confidence threshold.
    pub recall: f64,
    pub counts: EvalCounts,
    pub ap_per_class: Vec<f64>,
    pub map: f64,
    /// Precision-recall curve of class 0.
    pub pr_curve: Vec<PrPoint>,
    pub conf_threshold: f64,
    pub iou_threshold: f64,
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "# evaluation (IoU >= {}, recall/precision at conf >= {})",
            self.iou_threshold, self.conf_threshold
        )?;
        writeln!(
            f,
            "precision {:.4}  recall {:.4}  (tp {} fp {} fn {})",
            self.precision, self.recall, self.counts.tp, self.counts.fp, self.counts.fn_
        )?;
        for (c, ap) in self.ap_per_class.iter().enumerate() {
            writeln!(f, "AP class {c}: {ap:.4}")?;
        }
        writeln!(f, "mAP@{}: {:.4}", self.iou_threshold, self.map)
    }
}

/// Greedy matcher: detections must be sorted by descending score; each
/// ground truth matches at most once; a detection is a true positive iff
/// its best still-unmatched ground truth reaches the IoU threshold.
pub fn match_detections(
    dets: &[Detection],
    gts: &[(f64, f64, f64, f64)],
    iou_thresh: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for d in dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if taken[gi] {
                continue;
            }
            let iou = iou_cxcywh((d.cx, d.cy, d.w, d.h), *gt);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= iou_thresh => {
                taken[gi] = true;
                flags.push(true);
            }
            _ => flags.push(false),
        }
    }
    flags
}

/// Cumulative precision/recall over score-ranked flags, and the area under
/// the interpolated curve: precision at each recall replaced by the maximum
/// precision at any recall at least as large, integrated exactly by
/// rectangles. With no ground truth, AP is 0.
pub fn pr_and_ap(flags: &[bool], total_gt: usize) -> (f64, Vec<PrPoint>) {
    if total_gt == 0 || flags.is_empty() {
        return (0.0, Vec::new());
    }
    let mut curve = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &flag) in flags.iter().enumerate() {
        if flag {
            tp += 1;
        }
        curve.push(PrPoint {
            recall: tp as f64 / total_gt as f64,
            precision: tp as f64 / (i + 1) as f64,
        });
    }
    // Right-to-left precision envelope.
    let mut envelope = vec![0.0f64; curve.len()];
    let mut best = 0.0f64;
    for i in (0..curve.len()).rev() {
        best = best.max(curve[i].precision);
        envelope[i] = best;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (point, env) in curve.iter().zip(&envelope) {
        ap += (point.recall - prev_recall) * env;
        prev_recall = point.recall;
    }
    (ap, curve)
}

/// Evaluate per-image detections against per-image ground truth.
///
/// Matching runs per image and class over globally score-ranked detections;
/// AP is computed per class and averaged into mAP (classes with neither
/// ground truth nor detections are skipped). Precision and recall are
/// reported at `conf_thresh`.
pub fn evaluate(
    dets_per_image: &[Vec<Detection>],
    gts_per_image: &[Vec<GtBox>],
    ncls: usize,
    iou_thresh: f64,
    conf_thresh: f64,
) -> EvalReport {
    assert_eq!(
        dets_per_image.len(),
        gts_per_image.len(),
        "detection and ground-truth image counts differ"
    );
    let mut ap_per_class = Vec::with_capacity(ncls);
    let mut class_curves: Vec<Vec<PrPoint>> = Vec::with_capacity(ncls);
    let mut tp_at_conf = 0usize;
    let mut fp_at_conf = 0usize;
    let mut total_gt_all = 0usize;
    let mut skipped = 0usize;

    for class in 0..ncls {
        // Globally ranked detections of this class, tagged with image ids.
        let mut ranked: Vec<(usize, &Detection)> = dets_per_image
            .iter()
            .enumerate()
            .flat_map(|(image, dets)| {
                dets.iter()
                    .filter(|d| d.class_id == class)
                    .map(move |d| (image, d))
            })
            .collect();
        ranked.sort_by(|a, b| detection_order(a.1, b.1));

        let gts: Vec<Vec<(f64, f64, f64, f64)>> = gts_per_image
            .iter()
            .map(|gts| {
                gts.iter()
                    .filter(|g| g.class == class)
                    .map(|g| (g.cx, g.cy, g.w, g.h))
                    .collect()
            })
            .collect();
        let total_gt: usize = gts.iter().map(Vec::len).sum();
        total_gt_all += total_gt;

        // Greedy per-image matching in global score order.
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut flags = Vec::with_capacity(ranked.len());
        for (image, d) in &ranked {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in gts[*image].iter().enumerate() {
                if taken[*image][gi] {
                    continue;
                }
                let iou = iou_cxcywh((d.cx, d.cy, d.w, d.h), *gt);
                if best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            let tp = matches!(best, Some((_, iou)) if iou >= iou_thresh);
            if tp {
                taken[*image][best.unwrap().0] = true;
            }
            flags.push(tp);
            if d.score >= conf_thresh {
                if tp {
                    tp_at_conf += 1;
                } else {
                    fp_at_conf += 1;
                }
            }
        }

        if total_gt == 0 && ranked.is_empty() {
            skipped += 1;
            ap_per_class.push(0.0);
            class_curves.push(Vec::new());
            continue;
        }
        let (ap, curve) = pr_and_ap(&flags, total_gt);
        ap_per_class.push(ap);
        class_curves.push(curve);
    }

    let scored = ncls - skipped;
    let map = if scored == 0 {
        0.0
    } else {
        ap_per_class.iter().sum::<f64>() / scored as f64
    };
    let precision = if tp_at_conf + fp_at_conf == 0 {
        0.0
    } else {
        tp_at_conf as f64 / (tp_at_conf + fp_at_conf) as f64
    };
    let recall = if total_gt_all == 0 {
        0.0
    } else {
        tp_at_conf as f64 / total_gt_all as f64
    };
    EvalReport {
        precision,
        recall,
        counts: EvalCounts {
            tp: tp_at_conf,
            fp: fp_at_conf,
            fn_: total_gt_all - tp_at_conf,
        },
        ap_per_class,
        map,
        pr_curve: class_curves.into_iter().next().unwrap_or_default(),
        conf_threshold: conf_thresh,
        iou_threshold: iou_thresh,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection {
            cx,
            cy,
            w,
            h,
            objectness: score,
            class_id: 0,
            score,
        }
    }

    fn gt(image: usize, cx: f64, cy: f64, w: f64, h: f64) -> GtBox {
        GtBox {
            image,
            class: 0,
            cx,
            cy,
            w,
            h,
        }
    }

    #[test]
    fn exact_hit_is_tp_and_perfect_ap() {
        let dets = vec![vec![det(10.0, 10.0, 4.0, 4.0, 0.9)]];
        let gts = vec![vec![gt(0, 10.0, 10.0, 4.0, 4.0)]];
        let report = evaluate(&dets, &gts, 1, 0.5, 0.25);
        assert_eq!(report.counts, EvalCounts { tp: 1, fp: 0, fn_: 0 });
        assert_eq!(report.map, 1.0);
        assert_eq!(report.recall, 1.0);
        assert_eq!(report.precision, 1.0);
    }

    #[test]
    fn double_detection_of_one_gt_counts_one_tp() {
        let dets = vec![vec![
            det(10.0, 10.0, 4.0, 4.0, 0.9),
            det(10.2, 10.0, 4.0, 4.0, 0.8),
        ]];
        let gts = vec![vec![gt(0, 10.0, 10.0, 4.0, 4.0)]];
        let report = evaluate(&dets, &gts, 1, 0.5, 0.0);
        assert_eq!(report.counts.tp, 1);
        assert_eq!(report.counts.fp, 1);
        // AP = 1.0: the TP comes first, envelope stays 1 up to recall 1.
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn one_of_two_gives_half_ap() {
        let dets = vec![vec![det(10.0, 10.0, 4.0, 4.0, 0.9)]];
        let gts = vec![vec![
            gt(0, 10.0, 10.0, 4.0, 4.0),
            gt(0, 50.0, 50.0, 4.0, 4.0),
        ]];
        let report = evaluate(&dets, &gts, 1, 0.5, 0.25);
        assert_eq!(report.recall, 0.5);
        assert_eq!(report.precision, 1.0);
        assert_eq!(report.map, 0.5);
    }

    #[test]
    fn zero_detections_and_zero_gt_edges() {
        let report = evaluate(&[vec![]], &[vec![gt(0, 1.0, 1.0, 2.0, 2.0)]], 1, 0.5, 0.25);
        assert_eq!(report.recall, 0.0);
        assert_eq!(report.map, 0.0);

        let report = evaluate(
            &[vec![det(1.0, 1.0, 2.0, 2.0, 0.9)]],
            &[vec![]],
            1,
            0.5,
            0.25,
        );
        assert_eq!(report.map, 0.0);
        assert_eq!(report.counts.fp, 1);
    }

    #[test]
    fn curve_identities_hold() {
        let mut rng = crate::nn::test_rng(100);
        let flags: Vec<bool> = (0..50).map(|_| rng.gen_bool(0.6)).collect();
        let total_gt = flags.iter().filter(|&&f| f).count() + 5;
        let (_, curve) = pr_and_ap(&flags, total_gt);
        // precision * (tp + fp) == tp exactly, and recall non-decreasing.
        let mut tp = 0;
        for (i, point) in curve.iter().enumerate() {
            if flags[i] {
                tp += 1;
            }
            let reconstructed = point.precision * (i + 1) as f64;
            assert!((reconstructed - tp as f64).abs() < 1e-12);
            if i > 0 {
                assert!(point.recall >= curve[i - 1].recall);
            }
        }
    }

    #[test]
    fn ap_invariant_under_monotone_score_rescale_and_shuffle() {
        let mut rng = crate::nn::test_rng(101);
        let mut dets = Vec::new();
        let mut gts = Vec::new();
        for _ in 0..10 {
            dets.push(det(
                rng.gen_range(0.0..64.0),
                rng.gen_range(0.0..64.0),
                rng.gen_range(2.0..10.0),
                rng.gen_range(2.0..10.0),
                rng.gen_range(0.05..0.95),
            ));
            gts.push(gt(
                0,
                rng.gen_range(0.0..64.0),
                rng.gen_range(0.0..64.0),
                rng.gen_range(2.0..10.0),
                rng.gen_range(2.0..10.0),
            ));
        }
        let base = evaluate(&[dets.clone()], &[gts.clone()], 1, 0.3, 0.0);

        let rescaled: Vec<Detection> = dets
            .iter()
            .map(|d| Detection {
                score: d.score * 0.5 + 0.01, // positive monotone map
                ..*d
            })
            .collect();
        let re = evaluate(&[rescaled], &[gts.clone()], 1, 0.3, 0.0);
        assert!((re.map - base.map).abs() < 1e-12);

        let mut shuffled = dets.clone();
        shuffled.reverse();
        let sh = evaluate(&[shuffled], &[gts.clone()], 1, 0.3, 0.0);
        assert!((sh.map - base.map).abs() < 1e-12);
        assert_eq!(sh.counts, base.counts);
    }

    #[test]
    fn duplicate_lower_scored_detection_never_raises_ap() {
        let mut rng = crate::nn::test_rng(102);
        for _ in 0..50 {
            let mut dets = Vec::new();
            let mut gts = Vec::new();
            for _ in 0..6 {
                dets.push(det(
                    rng.gen_range(0.0..40.0),
                    rng.gen_range(0.0..40.0),
                    rng.gen_range(2.0..8.0),
                    rng.gen_range(2.0..8.0),
                    rng.gen_range(0.1..1.0),
                ));
                gts.push(gt(
                    0,
                    rng.gen_range(0.0..40.0),
                    rng.gen_range(0.0..40.0),
                    rng.gen_range(2.0..8.0),
                    rng.gen_range(2.0..8.0),
                ));
            }
            let base = evaluate(&[dets.clone()], &[gts.clone()], 1, 0.3, 0.0);
            // Duplicate the best-matching detection with a lower score.
            let mut dup = dets.clone();
            let mut copy = dets[0];
            copy.score *= 0.5;
            dup.push(copy);
            let with_dup = evaluate(&[dup], &[gts.clone()], 1, 0.3, 0.0);
            assert!(with_dup.map <= base.map + 1e-12);
        }
    }

    /// Independent naive evaluator: for every prefix of the ranked list it
    /// re-runs matching from scratch and integrates the envelope by direct
    /// max scans.
    fn naive_evaluate(dets: &[Detection], gts: &[GtBox], iou_thresh: f64) -> f64 {
        let mut ranked = dets.to_vec();
        ranked.sort_by(detection_order);
        let total_gt = gts.len();
        if total_gt == 0 {
            return 0.0;
        }
        let mut points = Vec::new();
        for k in 1..=ranked.len() {
            let prefix = &ranked[..k];
            let mut taken = vec![false; gts.len()];
            let mut tp = 0;
            for d in prefix {
                let mut best: Option<(usize, f64)> = None;
                for (gi, g) in gts.iter().enumerate() {
                    if taken[gi] {
                        continue;
                    }
                    let iou = iou_cxcywh((d.cx, d.cy, d.w, d.h), (g.cx, g.cy, g.w, g.h));
                    if best.is_none_or(|(_, b)| iou > b) {
                        best = Some((gi, iou));
                    }
                }
                if let Some((gi, iou)) = best {
                    if iou >= iou_thresh {
                        taken[gi] = true;
                        tp += 1;
                    }
                }
            }
            points.push((tp as f64 / total_gt as f64, tp as f64 / k as f64));
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for i in 0..points.len() {
            let env = points[i..]
                .iter()
                .map(|p| p.1)
                .fold(0.0f64, f64::max);
            ap += (points[i].0 - prev_r) * env;
            prev_r = points[i].0;
        }
        ap
    }

    #[test]
    fn matches_naive_prefix_rematching_evaluator() {
        let mut rng = crate::nn::test_rng(103);
        for _ in 0..20 {
            let n_det = rng.gen_range(1..15);
            let n_gt = rng.gen_range(1..10);
            let dets: Vec<Detection> = (0..n_det)
                .map(|_| {
                    det(
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(2.0..12.0),
                        rng.gen_range(2.0..12.0),
                        rng.gen_range(0.01..1.0),
                    )
                })
                .collect();
            let gts: Vec<GtBox> = (0..n_gt)
                .map(|_| {
                    gt(
                        0,
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(0.0..50.0),
                        rng.gen_range(2.0..12.0),
                        rng.gen_range(2.0..12.0),
                    )
                })
                .collect();
            let fast = evaluate(&[dets.clone()], &[gts.clone()], 1, 0.5, 0.0);
            let naive = naive_evaluate(&dets, &gts, 0.5);
            assert!(
                (fast.map - naive).abs() < 1e-12,
                "{} vs {naive}",
                fast.map
            );
        }
    }
}

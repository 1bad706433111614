//! Anchor-based box decoding and greedy non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::sigmoid_val;
use crate::tensor::{Scalar, Tensor};

/// One decoded, scored box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    pub class_id: usize,
    /// objectness · class probability.
    pub score: f64,
}

impl Detection {
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

/// IoU of two center-format boxes.
pub fn box_iou(a: &Detection, b: &Detection) -> f64 {
    iou_cxcywh((a.cx, a.cy, a.w, a.h), (b.cx, b.cy, b.w, b.h))
}

pub fn iou_cxcywh(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.0 - a.2 / 2.0, a.1 - a.3 / 2.0, a.0 + a.2 / 2.0, a.1 + a.3 / 2.0);
    let (bx1, by1, bx2, by2) = (b.0 - b.2 / 2.0, b.1 - b.3 / 2.0, b.0 + b.2 / 2.0, b.1 + b.3 / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// The documented total order on detections: score descending, then
/// cx, cy, w, h ascending. Makes suppression independent of input order.
pub fn detection_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
        .then(a.w.total_cmp(&b.w))
        .then(a.h.total_cmp(&b.h))
}

/// Decode one head level for one image of the batch.
///
/// Raw channels per anchor are (tx, ty, tw, th, obj, cls..). With sigmoided
/// outputs σ: center = (2σ(t) - 0.5 + cell)·stride, size = (2σ(t))²·anchor,
/// score = σ(obj)·σ(cls). Detections with score ≥ `conf` are kept.
pub fn decode_level<T: Scalar>(
    head: &Tensor<T>,
    image: usize,
    anchors: &[(f64, f64); 3],
    stride: usize,
    ncls: usize,
    conf: f64,
) -> Result<Vec<Detection>> {
    let s = head.shape();
    let per_anchor = 5 + ncls;
    if s.c != 3 * per_anchor {
        return Err(Error::shape(
            "decode",
            format!("head has {} channels, expected {}", s.c, 3 * per_anchor),
        ));
    }
    if image >= s.n {
        return Err(Error::shape(
            "decode",
            format!("image index {image} out of batch {}", s.n),
        ));
    }
    let mut out = Vec::new();
    for (a, &(aw, ah)) in anchors.iter().enumerate() {
        let base_c = a * per_anchor;
        for gi in 0..s.h {
            for gj in 0..s.w {
                let raw = |k: usize| head.at(image, base_c + k, gi, gj).to_f64_val();
                let obj = sigmoid_val(raw(4));
                let (class_id, cls_p) = (0..ncls)
                    .map(|c| (c, sigmoid_val(raw(5 + c))))
                    .max_by(|x, y| x.1.total_cmp(&y.1))
                    .unwrap_or((0, 1.0));
                let score = obj * cls_p;
                if score < conf {
                    continue;
                }
                let cx = (2.0 * sigmoid_val(raw(0)) - 0.5 + gj as f64) * stride as f64;
                let cy = (2.0 * sigmoid_val(raw(1)) - 0.5 + gi as f64) * stride as f64;
                let w = (2.0 * sigmoid_val(raw(2))).powi(2) * aw;
                let h = (2.0 * sigmoid_val(raw(3))).powi(2) * ah;
                out.push(Detection {
                    cx,
                    cy,
                    w,
                    h,
                    objectness: obj,
                    class_id,
                    score,
                });
            }
        }
    }
    Ok(out)
}

/// Greedy per-class suppression: survivors have pairwise IoU < threshold,
/// processed in the documented total order, at most `max_out` kept.
pub fn nms(detections: &[Detection], iou_threshold: f64, max_out: usize) -> Vec<Detection> {
    let mut sorted: Vec<Detection> = detections.to_vec();
    sorted.sort_by(detection_order);
    let mut keep: Vec<Detection> = Vec::new();
    for d in &sorted {
        if keep.len() >= max_out {
            break;
        }
        let suppressed = keep
            .iter()
            .any(|k| k.class_id == d.class_id && box_iou(k, d) >= iou_threshold);
        if !suppressed {
            keep.push(*d);
        }
    }
    keep
}

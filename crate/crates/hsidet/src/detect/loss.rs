//! Composite detection loss: CIoU box regression, binary cross-entropy
//! objectness against CIoU-weighted targets, and per-class BCE.
//!
//! Targets are assigned to anchors by the shape-ratio test
//! max(w/aw, aw/w, h/ah, ah/h) < 4 and spread over the 3-cell neighborhood
//! (own cell plus the nearer horizontal and vertical neighbours).

use crate::error::{Error, Result};
use crate::nn::Forward;
use crate::tensor::graph::Var;
use crate::tensor::{Scalar, Tensor};

/// A ground-truth box in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Loss term weights. `level_balance` aligns with the model's active levels.
#[derive(Debug, Clone)]
pub struct LossWeights {
    pub box_w: f64,
    pub obj_w: f64,
    pub cls_w: f64,
    pub level_balance: Vec<f64>,
    /// Anchor/target shape-ratio acceptance threshold.
    pub anchor_ratio: f64,
    /// Weight on the positive term of the objectness BCE. At desk scale
    /// a few positive cells face thousands of negatives; weighting the
    /// positives keeps their gradient from washing out.
    pub obj_pos_weight: f64,
}

impl LossWeights {
    /// Defaults keyed by pyramid stride: shallow levels carry more
    /// objectness weight.
    pub fn for_strides(strides: &[usize]) -> Self {
        let balance = strides
            .iter()
            .map(|s| match s {
                4 => 4.0,
                8 => 1.0,
                16 => 0.4,
                _ => 0.1,
            })
            .collect();
        LossWeights {
            box_w: 0.05,
            obj_w: 1.0,
            cls_w: 0.5,
            level_balance: balance,
            anchor_ratio: 4.0,
            obj_pos_weight: 1.0,
        }
    }

    /// Defaults for toy-scale overfitting: stronger box term and a small
    /// extra weight on the objectness positives.
    pub fn toy_overfit(strides: &[usize]) -> Self {
        LossWeights {
            obj_pos_weight: 2.0,
            box_w: 1.0,
            ..Self::for_strides(strides)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.box_w < 0.0 || self.obj_w < 0.0 || self.cls_w < 0.0 {
            return Err(Error::InvalidSpec("loss weights must be >= 0".into()));
        }
        if self.box_w + self.obj_w + self.cls_w <= 0.0 {
            return Err(Error::InvalidSpec(
                "at least one loss weight must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// One anchor/cell responsibility for a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub level: usize,
    pub image: usize,
    pub anchor: usize,
    pub gi: usize,
    pub gj: usize,
    /// Target center relative to the cell origin, in (-0.5, 1.5).
    pub tx: f64,
    pub ty: f64,
    /// Target size in cell units.
    pub tw: f64,
    pub th: f64,
    pub class: usize,
}

/// Assign targets to (level, anchor, cell) triples.
pub fn assign_targets(
    targets: &[GtBox],
    anchors: &[[(f64, f64); 3]],
    strides: &[usize],
    grids: &[(usize, usize)],
    ratio_thresh: f64,
) -> Vec<Assignment> {
    let mut out = Vec::new();
    for t in targets {
        for (level, &stride) in strides.iter().enumerate() {
            let (gh, gw) = grids[level];
            let s = stride as f64;
            let gx = t.cx / s;
            let gy = t.cy / s;
            for (a, &(aw, ah)) in anchors[level].iter().enumerate() {
                let rw = t.w / aw;
                let rh = t.h / ah;
                let ratio = rw.max(1.0 / rw).max(rh).max(1.0 / rh);
                if ratio >= ratio_thresh {
                    continue;
                }
                let base_j = gx.floor();
                let base_i = gy.floor();
                let mut cells = vec![(base_j, base_i)];
                let fx = gx - base_j;
                let fy = gy - base_i;
                if fx < 0.5 && gx > 1.0 {
                    cells.push((base_j - 1.0, base_i));
                } else if fx >= 0.5 && gx < gw as f64 - 1.0 {
                    cells.push((base_j + 1.0, base_i));
                }
                if fy < 0.5 && gy > 1.0 {
                    cells.push((base_j, base_i - 1.0));
                } else if fy >= 0.5 && gy < gh as f64 - 1.0 {
                    cells.push((base_j, base_i + 1.0));
                }
                for (cj, ci) in cells {
                    let gj = cj.clamp(0.0, gw as f64 - 1.0) as usize;
                    let gi = ci.clamp(0.0, gh as f64 - 1.0) as usize;
                    out.push(Assignment {
                        level,
                        image: t.image,
                        anchor: a,
                        gi,
                        gj,
                        tx: gx - gj as f64,
                        ty: gy - gi as f64,
                        tw: t.w / s,
                        th: t.h / s,
                        class: t.class,
                    });
                }
            }
        }
    }
    out
}

/// Scalar loss plus its components (plain numbers for logging).
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub total: f64,
    pub box_loss: f64,
    pub obj_loss: f64,
    pub cls_loss: f64,
    pub assigned: usize,
}

/// Everything the loss needs to know about the head layout.
#[derive(Debug, Clone)]
pub struct HeadLayout {
    pub strides: Vec<usize>,
    pub anchors: Vec<[(f64, f64); 3]>,
    pub ncls: usize,
}

/// Differentiable composite loss over all head levels.
pub fn detection_loss<T: Scalar>(
    cx: &mut Forward<'_, T>,
    heads: &[Var],
    targets: &[GtBox],
    layout: &HeadLayout,
    weights: &LossWeights,
) -> Result<(Var, LossParts)> {
    weights.validate()?;
    if heads.len() != layout.strides.len() || heads.len() != layout.anchors.len() {
        return Err(Error::shape(
            "loss",
            format!(
                "{} heads vs {} strides/{} anchor groups",
                heads.len(),
                layout.strides.len(),
                layout.anchors.len()
            ),
        ));
    }
    let per_anchor = 5 + layout.ncls;
    let grids: Vec<(usize, usize)> = heads
        .iter()
        .map(|&h| {
            let s = cx.graph.shape(h);
            (s.h, s.w)
        })
        .collect();
    let assignments = assign_targets(
        targets,
        &layout.anchors,
        &layout.strides,
        &grids,
        weights.anchor_ratio,
    );

    let mut box_terms: Vec<Var> = Vec::new();
    let mut obj_terms: Vec<Var> = Vec::new();
    let mut cls_terms: Vec<Var> = Vec::new();
    let mut assigned_total = 0usize;

    for (level, &head) in heads.iter().enumerate() {
        let shape = cx.graph.shape(head);
        let level_assignments: Vec<&Assignment> =
            assignments.iter().filter(|a| a.level == level).collect();
        assigned_total += level_assignments.len();

        // Objectness target/weight planes for every anchor cell.
        let mut obj_indices =
            Vec::with_capacity(shape.n * 3 * shape.h * shape.w);
        for b in 0..shape.n {
            for a in 0..3 {
                for gi in 0..shape.h {
                    for gj in 0..shape.w {
                        obj_indices.push(shape.index(b, a * per_anchor + 4, gi, gj));
                    }
                }
            }
        }
        let mut obj_target = vec![T::zero(); obj_indices.len()];
        let obj_pos = |b: usize, a: usize, gi: usize, gj: usize| {
            ((b * 3 + a) * shape.h + gi) * shape.w + gj
        };

        if !level_assignments.is_empty() {
            let count = level_assignments.len();
            let gather_coord = |cx: &mut Forward<'_, T>, k: usize| -> Result<Var> {
                let idx: Vec<usize> = level_assignments
                    .iter()
                    .map(|a| shape.index(a.image, a.anchor * per_anchor + k, a.gi, a.gj))
                    .collect();
                cx.graph.gather(head, idx)
            };
            let row = |vals: Vec<f64>| -> Tensor<T> {
                Tensor::row_vector(vals.into_iter().map(T::from_f64).collect())
                    .expect("nonempty rows")
            };

            let tx_raw = gather_coord(cx, 0)?;
            let ty_raw = gather_coord(cx, 1)?;
            let tw_raw = gather_coord(cx, 2)?;
            let th_raw = gather_coord(cx, 3)?;

            // Predicted box in cell units.
            let half = T::from_f64(-0.5);
            let two = T::from_f64(2.0);
            let sx = cx.graph.sigmoid(tx_raw);
            let px = cx.graph.mul_scalar(sx, two);
            let px = cx.graph.add_scalar(px, half);
            let sy = cx.graph.sigmoid(ty_raw);
            let py = cx.graph.mul_scalar(sy, two);
            let py = cx.graph.add_scalar(py, half);
            let anchor_w = row(
                level_assignments
                    .iter()
                    .map(|a| layout.anchors[level][a.anchor].0 / layout.strides[level] as f64)
                    .collect(),
            );
            let anchor_h = row(
                level_assignments
                    .iter()
                    .map(|a| layout.anchors[level][a.anchor].1 / layout.strides[level] as f64)
                    .collect(),
            );
            let sw = cx.graph.sigmoid(tw_raw);
            let sw2 = cx.graph.mul_scalar(sw, two);
            let sw_sq = cx.graph.mul(sw2, sw2)?;
            let aw = cx.graph.constant(anchor_w);
            let pw = cx.graph.mul(sw_sq, aw)?;
            let sh = cx.graph.sigmoid(th_raw);
            let sh2 = cx.graph.mul_scalar(sh, two);
            let sh_sq = cx.graph.mul(sh2, sh2)?;
            let ah = cx.graph.constant(anchor_h);
            let ph = cx.graph.mul(sh_sq, ah)?;

            let tgt = |f: fn(&Assignment) -> f64| -> Vec<f64> {
                level_assignments.iter().map(|a| f(a)).collect()
            };
            let ciou = ciou_terms(
                cx,
                (px, py, pw, ph),
                (
                    tgt(|a| a.tx),
                    tgt(|a| a.ty),
                    tgt(|a| a.tw),
                    tgt(|a| a.th),
                ),
            )?;

            // Box term: mean(1 - CIoU) over this level's assignments.
            let neg = cx.graph.mul_scalar(ciou, T::from_f64(-1.0));
            let one_minus = cx.graph.add_scalar(neg, T::one());
            box_terms.push(cx.graph.mean(one_minus));

            // Objectness targets: detached CIoU clamped to [0, 1];
            // duplicate assignments keep the largest.
            let ciou_vals = cx.graph.value(ciou).data().to_vec();
            for (a, v) in level_assignments.iter().zip(ciou_vals) {
                let pos = obj_pos(a.image, a.anchor, a.gi, a.gj);
                let clamped = v.to_f64_val().clamp(0.0, 1.0);
                if T::from_f64(clamped) > obj_target[pos] {
                    obj_target[pos] = T::from_f64(clamped);
                }
            }

            // Class term (kept even for the degenerate single class).
            if layout.ncls >= 1 {
                let mut cls_idx = Vec::with_capacity(count * layout.ncls);
                let mut cls_tgt = Vec::with_capacity(count * layout.ncls);
                for a in &level_assignments {
                    for c in 0..layout.ncls {
                        cls_idx.push(shape.index(
                            a.image,
                            a.anchor * per_anchor + 5 + c,
                            a.gi,
                            a.gj,
                        ));
                        cls_tgt.push(if a.class == c { 1.0 } else { 0.0 });
                    }
                }
                let logits = cx.graph.gather(head, cls_idx)?;
                let targets = row(cls_tgt);
                cls_terms.push(cx.graph.bce_with_logits_mean(logits, targets)?);
            }
        }

        // Objectness: negatives and positives are normalized separately so
        // a handful of positive cells is not washed out by the negative sea;
        // positives carry obj_pos_weight on top.
        let positive_cells: std::collections::HashSet<usize> = obj_target
            .iter()
            .enumerate()
            .filter(|(_, t)| **t > T::zero())
            .map(|(i, _)| i)
            .collect();
        let balance = weights.level_balance.get(level).copied().unwrap_or(1.0);
        let mut level_obj: Vec<Var> = Vec::new();
        let negatives: Vec<usize> = (0..obj_indices.len())
            .filter(|i| !positive_cells.contains(i))
            .map(|i| obj_indices[i])
            .collect();
        if !negatives.is_empty() {
            let neg_logits = cx.graph.gather(head, negatives)?;
            let zeros = Tensor::zeros(cx.graph.shape(neg_logits));
            level_obj.push(cx.graph.bce_with_logits_mean(neg_logits, zeros)?);
        }
        if !positive_cells.is_empty() {
            let mut pos_sorted: Vec<usize> = positive_cells.iter().copied().collect();
            pos_sorted.sort_unstable();
            let pos_logits = cx
                .graph
                .gather(head, pos_sorted.iter().map(|&i| obj_indices[i]).collect())?;
            let pos_targets = Tensor::row_vector(
                pos_sorted.iter().map(|&i| obj_target[i]).collect(),
            )
            .expect("nonempty positives");
            let pos_bce = cx.graph.bce_with_logits_mean(pos_logits, pos_targets)?;
            level_obj.push(
                cx.graph
                    .mul_scalar(pos_bce, T::from_f64(weights.obj_pos_weight)),
            );
        }
        let mut obj_level = cx.graph.constant(Tensor::scalar(T::zero()));
        for term in level_obj {
            obj_level = cx.graph.add(obj_level, term)?;
        }
        obj_terms.push(cx.graph.mul_scalar(obj_level, T::from_f64(balance)));
    }

    let sum_terms = |cx: &mut Forward<'_, T>, terms: &[Var]| -> Result<Var> {
        let mut acc = cx.graph.constant(Tensor::scalar(T::zero()));
        for &t in terms {
            acc = cx.graph.add(acc, t)?;
        }
        Ok(acc)
    };
    let box_sum = sum_terms(cx, &box_terms)?;
    let obj_sum = sum_terms(cx, &obj_terms)?;
    let cls_sum = sum_terms(cx, &cls_terms)?;

    let box_w = cx.graph.mul_scalar(box_sum, T::from_f64(weights.box_w));
    let obj_w = cx.graph.mul_scalar(obj_sum, T::from_f64(weights.obj_w));
    let cls_w = cx.graph.mul_scalar(cls_sum, T::from_f64(weights.cls_w));
    let partial = cx.graph.add(box_w, obj_w)?;
    let total = cx.graph.add(partial, cls_w)?;

    let parts = LossParts {
        total: cx.graph.value(total).item().to_f64_val(),
        box_loss: cx.graph.value(box_sum).item().to_f64_val() * weights.box_w,
        obj_loss: cx.graph.value(obj_sum).item().to_f64_val() * weights.obj_w,
        cls_loss: cx.graph.value(cls_sum).item().to_f64_val() * weights.cls_w,
        assigned: assigned_total,
    };
    Ok((total, parts))
}

const CIOU_EPS: f64 = 1e-7;

/// Complete-IoU between predicted boxes (graph vars, cell units) and
/// constant targets. The aspect-term coefficient α is detached, matching
/// the usual CIoU implementation.
fn ciou_terms<T: Scalar>(
    cx: &mut Forward<'_, T>,
    pred: (Var, Var, Var, Var),
    target: (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>),
) -> Result<Var> {
    let (px, py, pw, ph) = pred;
    let count = target.0.len();
    let row = |cx: &mut Forward<'_, T>, vals: &[f64]| -> Var {
        let t = Tensor::row_vector(vals.iter().map(|&v| T::from_f64(v)).collect())
            .expect("nonempty rows");
        cx.graph.constant(t)
    };
    let eps = T::from_f64(CIOU_EPS);
    let half = T::from_f64(0.5);

    // Predicted corners.
    let pw_half = cx.graph.mul_scalar(pw, half);
    let ph_half = cx.graph.mul_scalar(ph, half);
    let px1 = cx.graph.sub(px, pw_half)?;
    let px2 = cx.graph.add(px, pw_half)?;
    let py1 = cx.graph.sub(py, ph_half)?;
    let py2 = cx.graph.add(py, ph_half)?;

    // Target corners as constants.
    let (tx, ty, tw, th) = (&target.0, &target.1, &target.2, &target.3);
    let corner = |cx: &mut Forward<'_, T>, c: &[f64], s: &[f64], sign: f64| -> Var {
        let vals: Vec<f64> = c.iter().zip(s).map(|(&c, &s)| c + sign * s / 2.0).collect();
        row(cx, &vals)
    };
    let tx1 = corner(cx, tx, tw, -1.0);
    let tx2 = corner(cx, tx, tw, 1.0);
    let ty1 = corner(cx, ty, th, -1.0);
    let ty2 = corner(cx, ty, th, 1.0);
    let tw_c = row(cx, tw);
    let th_c = row(cx, th);
    let tcx = row(cx, tx);
    let tcy = row(cx, ty);

    // Intersection and union.
    let ix2 = cx.graph.minimum(px2, tx2)?;
    let ix1 = cx.graph.maximum(px1, tx1)?;
    let iw_raw = cx.graph.sub(ix2, ix1)?;
    let iw = cx.graph.relu(iw_raw);
    let iy2 = cx.graph.minimum(py2, ty2)?;
    let iy1 = cx.graph.maximum(py1, ty1)?;
    let ih_raw = cx.graph.sub(iy2, iy1)?;
    let ih = cx.graph.relu(ih_raw);
    let inter = cx.graph.mul(iw, ih)?;
    let parea = cx.graph.mul(pw, ph)?;
    let tarea = cx.graph.mul(tw_c, th_c)?;
    let areas = cx.graph.add(parea, tarea)?;
    let union_raw = cx.graph.sub(areas, inter)?;
    let union = cx.graph.add_scalar(union_raw, eps);
    let iou = cx.graph.div(inter, union)?;

    // Enclosing-box diagonal and center distance.
    let ex2 = cx.graph.maximum(px2, tx2)?;
    let ex1 = cx.graph.minimum(px1, tx1)?;
    let ew = cx.graph.sub(ex2, ex1)?;
    let ey2 = cx.graph.maximum(py2, ty2)?;
    let ey1 = cx.graph.minimum(py1, ty1)?;
    let eh = cx.graph.sub(ey2, ey1)?;
    let ew2 = cx.graph.mul(ew, ew)?;
    let eh2 = cx.graph.mul(eh, eh)?;
    let c2_raw = cx.graph.add(ew2, eh2)?;
    let c2 = cx.graph.add_scalar(c2_raw, eps);
    let dx = cx.graph.sub(px, tcx)?;
    let dy = cx.graph.sub(py, tcy)?;
    let dx2 = cx.graph.mul(dx, dx)?;
    let dy2 = cx.graph.mul(dy, dy)?;
    let rho2 = cx.graph.add(dx2, dy2)?;
    let dist = cx.graph.div(rho2, c2)?;

    // Aspect-ratio term.
    let ph_eps = cx.graph.add_scalar(ph, eps);
    let p_ratio = cx.graph.div(pw, ph_eps)?;
    let p_atan = cx.graph.atan(p_ratio);
    let t_atan_vals: Vec<f64> = tw.iter().zip(th).map(|(&w, &h)| (w / h).atan()).collect();
    let t_atan = row(cx, &t_atan_vals);
    let datan = cx.graph.sub(t_atan, p_atan)?;
    let datan2 = cx.graph.mul(datan, datan)?;
    let four_over_pi2 = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
    let v = cx.graph.mul_scalar(datan2, T::from_f64(four_over_pi2));

    // Detached alpha = v / (1 - iou + v + eps).
    let v_vals = cx.graph.value(v).data().to_vec();
    let iou_vals = cx.graph.value(iou).data().to_vec();
    let alpha_vals: Vec<f64> = (0..count)
        .map(|i| {
            let vv = v_vals[i].to_f64_val();
            let io = iou_vals[i].to_f64_val();
            vv / (vv - io + 1.0 + CIOU_EPS)
        })
        .collect();
    let alpha = row(cx, &alpha_vals);
    let av = cx.graph.mul(alpha, v)?;
    let penalty = cx.graph.add(dist, av)?;
    cx.graph.sub(iou, penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{bind, ParamKind, ParamStore};
    use crate::tensor::graph::Graph;
    use crate::tensor::Shape;

    fn layout_one_level() -> HeadLayout {
        HeadLayout {
            strides: vec![8],
            anchors: vec![[(16.0, 16.0), (24.0, 12.0), (12.0, 24.0)]],
            ncls: 1,
        }
    }

    fn head_store(shape: Shape, fill: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store
            .register(
                "head",
                vec![shape.n, shape.c, shape.h, shape.w],
                Tensor::full(shape, fill),
                ParamKind::Learnable,
            )
            .unwrap();
        store
    }

    fn run_loss(
        store: &ParamStore<f64>,
        targets: &[GtBox],
        layout: &HeadLayout,
        weights: &LossWeights,
    ) -> LossParts {
        let mut graph = Graph::new();
        let bound = bind(store, &mut graph);
        let mut cx = Forward::new(&mut graph, &bound, store, true);
        let head = cx.bound.var("head").unwrap();
        let (_, parts) = detection_loss(&mut cx, &[head], targets, layout, weights).unwrap();
        parts
    }

    #[test]
    fn assignment_respects_ratio_and_neighborhood() {
        let layout = layout_one_level();
        let targets = [GtBox {
            image: 0,
            class: 0,
            cx: 33.0,
            cy: 50.0,
            w: 16.0,
            h: 16.0,
        }];
        let a = assign_targets(
            &targets,
            &layout.anchors,
            &layout.strides,
            &[(10, 10)],
            4.0,
        );
        // gx=4.125, gy=6.25: own cell (4,6) plus left (3,6) and top (4,5),
        // for each anchor passing the ratio test (all three here).
        assert_eq!(a.len(), 9);
        assert!(a.iter().all(|x| x.tw == 2.0 && x.th == 2.0));
        let cells: std::collections::BTreeSet<(usize, usize)> =
            a.iter().map(|x| (x.gj, x.gi)).collect();
        assert_eq!(
            cells,
            [(4usize, 6usize), (3, 6), (4, 5)].into_iter().collect()
        );

        // A 100x100 target fails the ratio-4 test against all anchors.
        let big = [GtBox {
            image: 0,
            class: 0,
            cx: 40.0,
            cy: 40.0,
            w: 100.0,
            h: 100.0,
        }];
        assert!(assign_targets(&big, &layout.anchors, &layout.strides, &[(10, 10)], 4.0)
            .is_empty());
    }

    #[test]
    fn no_targets_and_sunk_objectness_gives_vanishing_loss() {
        let shape = Shape::new(1, 18, 4, 4).unwrap();
        let store = head_store(shape, 0.0);
        // Zero logits, no targets: loss = obj BCE at sigmoid(0)=0.5.
        let layout = layout_one_level();
        let weights = LossWeights::for_strides(&layout.strides);
        let parts = run_loss(&store, &[], &layout, &weights);
        assert_eq!(parts.assigned, 0);
        assert!((parts.obj_loss - (2.0f64.ln())).abs() < 1e-9, "{}", parts.obj_loss);

        // Objectness logits driven to -inf: loss -> 0.
        let store = head_store(shape, -40.0);
        let parts = run_loss(&store, &[], &layout, &weights);
        assert!(parts.total < 1e-9);
        assert_eq!(parts.box_loss, 0.0);
        assert_eq!(parts.cls_loss, 0.0);
    }

    #[test]
    fn perfect_prediction_zeroes_the_box_term() {
        // Anchor-sized target centered on a cell center: zero logits decode
        // to exactly that box, so CIoU = 1 and the box term vanishes.
        let shape = Shape::new(1, 18, 8, 8).unwrap();
        let store = head_store(shape, 0.0);
        let layout = layout_one_level();
        let weights = LossWeights::for_strides(&layout.strides);
        let targets = [GtBox {
            image: 0,
            class: 0,
            cx: 36.0, // cell (4, _) center: gx = 4.5
            cy: 36.0,
            w: 16.0, // anchor 0 exactly
            h: 16.0,
        }];
        let parts = run_loss(&store, &targets, &layout, &weights);
        assert!(parts.assigned > 0);
        // One of the assignments (the own cell with anchor 0) is perfect,
        // but neighbors are not; isolate by hand instead:
        let own = Assignment {
            level: 0,
            image: 0,
            anchor: 0,
            gi: 4,
            gj: 4,
            tx: 0.5,
            ty: 0.5,
            tw: 2.0,
            th: 2.0,
            class: 0,
        };
        let mut graph = Graph::new();
        let bound = bind(&store, &mut graph);
        let mut cx = Forward::new(&mut graph, &bound, &store, true);
        let head = cx.bound.var("head").unwrap();
        let idx = |k: usize| vec![shape.index(0, k, own.gi, own.gj)];
        let gx = cx.graph.gather(head, idx(0)).unwrap();
        let gy = cx.graph.gather(head, idx(1)).unwrap();
        let gw = cx.graph.gather(head, idx(2)).unwrap();
        let gh = cx.graph.gather(head, idx(3)).unwrap();
        let two = 2.0;
        let sx = cx.graph.sigmoid(gx);
        let px = cx.graph.mul_scalar(sx, two);
        let px = cx.graph.add_scalar(px, -0.5);
        let sy = cx.graph.sigmoid(gy);
        let py = cx.graph.mul_scalar(sy, two);
        let py = cx.graph.add_scalar(py, -0.5);
        let swv = cx.graph.sigmoid(gw);
        let sw2 = cx.graph.mul_scalar(swv, two);
        let sw_sq = cx.graph.mul(sw2, sw2).unwrap();
        let awc = cx.graph.constant(Tensor::row_vector(vec![2.0]).unwrap());
        let pw = cx.graph.mul(sw_sq, awc).unwrap();
        let shv = cx.graph.sigmoid(gh);
        let sh2 = cx.graph.mul_scalar(shv, two);
        let sh_sq = cx.graph.mul(sh2, sh2).unwrap();
        let ahc = cx.graph.constant(Tensor::row_vector(vec![2.0]).unwrap());
        let ph = cx.graph.mul(sh_sq, ahc).unwrap();
        let ciou = ciou_terms(
            &mut cx,
            (px, py, pw, ph),
            (vec![0.5], vec![0.5], vec![2.0], vec![2.0]),
        )
        .unwrap();
        let value = cx.graph.value(ciou).item();
        assert!((value - 1.0).abs() < 1e-6, "CIoU of identical boxes, got {value}");
    }

    #[test]
    fn loss_matches_hand_computed_composite_for_single_cell() {
        // One target on a 2x2 grid, one anchor family; every piece of the
        // composite is recomputed by hand below.
        let shape = Shape::new(1, 18, 2, 2).unwrap();
        let store = head_store(shape, 0.0);
        let layout = HeadLayout {
            strides: vec![8],
            anchors: vec![[(8.0, 8.0), (80.0, 80.0), (80.0, 8.0)]],
            ncls: 1,
        };
        let weights = LossWeights {
            box_w: 1.0,
            obj_w: 1.0,
            cls_w: 1.0,
            level_balance: vec![1.0],
            anchor_ratio: 4.0,
            obj_pos_weight: 1.0,
        };
        // gx = gy = 1.5 exactly: own cell (1,1) only (fx=0.5 pushes right,
        // but gx >= gw-1 suppresses it). Only anchor 0 passes the ratio test.
        let targets = [GtBox {
            image: 0,
            class: 0,
            cx: 12.0,
            cy: 12.0,
            w: 12.0,
            h: 6.0,
        }];
        let parts = run_loss(&store, &targets, &layout, &weights);
        assert_eq!(parts.assigned, 1);

        // Hand computation. Prediction at zero logits: p = (0.5, 0.5, 1, 1)
        // in cell units (anchor 8/stride 8 = 1). Target: (0.5, 0.5, 1.5, 0.75).
        let (pw, phh, tw, th) = (1.0f64, 1.0f64, 1.5f64, 0.75f64);
        let inter = pw.min(tw) * phh.min(th);
        let union = pw * phh + tw * th - inter + 1e-7;
        let iou = inter / union;
        let c2 = tw.max(pw).powi(2) + th.max(phh).powi(2) + 1e-7;
        let rho2 = 0.0;
        let v = 4.0 / std::f64::consts::PI.powi(2)
            * ((tw / th).atan() - (pw / (phh + 1e-7)).atan()).powi(2);
        let alpha = v / (v - iou + 1.0 + 1e-7);
        let ciou = iou - rho2 / c2 - alpha * v;
        let expected_box = 1.0 - ciou;
        assert!((parts.box_loss - expected_box).abs() < 1e-9);

        // Objectness: 12 cells' BCE, one with target=ciou, rest 0, all at
        // logit 0.
        let bce0 = 2.0f64.ln();
        let bce_pos = bce0 - 0.0f64.max(0.0) + 0.0; // max(x,0) - x*t + ln(1+e^-|x|) at x=0
        let bce_pos = bce_pos - 0.0 * ciou + 0.0; // simplifies to ln2 regardless of t at x=0
        let expected_obj = (11.0 * bce0 + bce_pos) / 12.0;
        assert!((parts.obj_loss - expected_obj).abs() < 1e-9);

        // Class: single logit 0 against target 1: ln 2.
        assert!((parts.cls_loss - bce0).abs() < 1e-9);
        assert!(
            (parts.total - (expected_box + expected_obj + bce0)).abs() < 1e-9
        );
    }

    #[test]
    fn loss_is_nonnegative_on_random_logits() {
        let mut rng = crate::nn::test_rng(77);
        use rand::Rng;
        for trial in 0..10 {
            let shape = Shape::new(1, 18, 4, 4).unwrap();
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.gen_range(-3.0..3.0);
            }
            let mut store = ParamStore::new();
            store
                .register("head", vec![1, 18, 4, 4], t, ParamKind::Learnable)
                .unwrap();
            let layout = layout_one_level();
            let weights = LossWeights::for_strides(&layout.strides);
            let targets = [GtBox {
                image: 0,
                class: 0,
                cx: rng.gen_range(4.0..28.0),
                cy: rng.gen_range(4.0..28.0),
                w: rng.gen_range(8.0..30.0),
                h: rng.gen_range(8.0..30.0),
            }];
            let parts = run_loss(&store, &targets, &layout, &weights);
            assert!(parts.total >= 0.0, "trial {trial}: {}", parts.total);
        }
    }
}

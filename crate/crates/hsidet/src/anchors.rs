//! Anchor priors and k-means clustering of box sizes under the 1-IoU
//! distance.
//!
//! Boxes are compared corner-aligned: IoU of (w,h) pairs anchored at the
//! same origin. Lloyd iterations assign boxes to their nearest center and
//! move each center to the coordinatewise median of its members, keeping the
//! old center whenever the median would not improve the cluster's mean
//! distance, so the objective never increases. Empty clusters are reseeded
//! from the box farthest from its assigned center.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::test_rng;

/// A box size (width, height) in input-image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxWH {
    pub w: f64,
    pub h: f64,
}

impl BoxWH {
    pub fn new(w: f64, h: f64) -> Result<Self> {
        if w <= 0.0 || h <= 0.0 || !w.is_finite() || !h.is_finite() {
            return Err(Error::InvalidSpec(format!(
                "box dimensions must be positive and finite, got {w}x{h}"
            )));
        }
        Ok(BoxWH { w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Corner-aligned IoU of two box sizes, in (0, 1].
pub fn iou_wh(a: BoxWH, b: BoxWH) -> Result<f64> {
    if a.w <= 0.0 || a.h <= 0.0 || b.w <= 0.0 || b.h <= 0.0 {
        return Err(Error::InvalidSpec(
            "iou_wh requires positive box dimensions".into(),
        ));
    }
    Ok(iou_wh_unchecked(a, b))
}

#[inline]
fn iou_wh_unchecked(a: BoxWH, b: BoxWH) -> f64 {
    let inter = a.w.min(b.w) * a.h.min(b.h);
    inter / (a.area() + b.area() - inter)
}

#[inline]
fn distance(a: BoxWH, b: BoxWH) -> f64 {
    1.0 - iou_wh_unchecked(a, b)
}

/// Result of one clustering run: centers sorted by area ascending.
#[derive(Debug, Clone)]
pub struct ClusterResult {
    pub centers: Vec<BoxWH>,
    pub mean_distance: f64,
    pub iterations: usize,
    /// Mean assigned distance after every assignment step, for monitoring
    /// the non-increase invariant.
    pub distance_trace: Vec<f64>,
}

/// Lloyd k-means under d = 1 - IoU with k-means++-style seeding and
/// guarded coordinatewise-median center updates.
pub fn kmeans_1iou(
    boxes: &[BoxWH],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterResult> {
    if k == 0 {
        return Err(Error::InvalidSpec("kmeans needs k >= 1".into()));
    }
    if boxes.len() < k {
        return Err(Error::InvalidSpec(format!(
            "kmeans needs at least k={k} boxes, got {}",
            boxes.len()
        )));
    }
    for b in boxes {
        BoxWH::new(b.w, b.h)?;
    }

    let mut rng = test_rng(seed);
    let mut centers = seed_centers(boxes, k, &mut rng);
    let mut assignment = vec![0usize; boxes.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for iter in 0..max_iter.max(1) {
        iterations = iter + 1;

        // Assignment step.
        let mut changed = false;
        let mut mean_dist = 0.0;
        for (i, b) in boxes.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = distance(*b, *center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
            mean_dist += best_d;
        }
        mean_dist /= boxes.len() as f64;
        trace.push(mean_dist);

        // Reseed empty clusters from the farthest box.
        let mut counts = vec![0usize; k];
        for &a in &assignment {
            counts[a] += 1;
        }
        let mut reseeded = false;
        for c in 0..k {
            if counts[c] == 0 {
                let (far_i, _) = boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (i, distance(*b, centers[assignment[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("boxes nonempty");
                centers[c] = boxes[far_i];
                counts[assignment[far_i]] -= 1;
                assignment[far_i] = c;
                counts[c] = 1;
                reseeded = true;
            }
        }

        if iter > 0 && !changed && !reseeded {
            break;
        }

        // Update step: guarded coordinatewise median.
        let mut max_move = 0.0f64;
        for c in 0..k {
            let members: Vec<BoxWH> = boxes
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == c)
                .map(|(b, _)| *b)
                .collect();
            if members.is_empty() {
                continue;
            }
            let candidate = BoxWH {
                w: median(members.iter().map(|b| b.w)),
                h: median(members.iter().map(|b| b.h)),
            };
            let cur_cost: f64 = members.iter().map(|b| distance(*b, centers[c])).sum();
            let cand_cost: f64 = members.iter().map(|b| distance(*b, candidate)).sum();
            if cand_cost <= cur_cost {
                max_move = max_move
                    .max((candidate.w - centers[c].w).abs())
                    .max((candidate.h - centers[c].h).abs());
                centers[c] = candidate;
            }
        }
        if max_move < tol && !reseeded {
            break;
        }
    }

    // Final assignment cost with the last centers.
    let mean_distance = boxes
        .iter()
        .map(|b| {
            centers
                .iter()
                .map(|c| distance(*b, *c))
                .fold(f64::INFINITY, f64::min)
        })
        .sum::<f64>()
        / boxes.len() as f64;
    trace.push(mean_distance);

    centers.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
    Ok(ClusterResult {
        centers,
        mean_distance,
        iterations,
        distance_trace: trace,
    })
}

/// k-means++-style seeding under the 1-IoU distance.
fn seed_centers(boxes: &[BoxWH], k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<BoxWH> {
    let mut centers = Vec::with_capacity(k);
    centers.push(boxes[rng.gen_range(0..boxes.len())]);
    while centers.len() < k {
        let weights: Vec<f64> = boxes
            .iter()
            .map(|b| {
                centers
                    .iter()
                    .map(|c| distance(*b, *c))
                    .fold(f64::INFINITY, f64::min)
                    .powi(2)
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // All boxes coincide with some center; duplicate one.
            centers.push(boxes[0]);
            continue;
        }
        let mut pick = rng.gen_range(0.0..total);
        let mut chosen = boxes.len() - 1;
        for (i, w) in weights.iter().enumerate() {
            if pick < *w {
                chosen = i;
                break;
            }
            pick -= w;
        }
        centers.push(boxes[chosen]);
    }
    centers
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Twelve anchors in four stride groups of three, ordered by stride.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// groups[level][slot] = (w, h); level 0 is the tiny (stride-4) group.
    pub groups: [[(f64, f64); 3]; 4],
}

/// Pyramid strides of the four detection levels.
pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

impl Default for AnchorSet {
    /// Cluster-derived ship anchors for 640² inputs.
    fn default() -> Self {
        AnchorSet {
            groups: [
                [(7.0, 16.0), (10.0, 9.0), (18.0, 7.0)],
                [(16.0, 15.0), (20.0, 27.0), (34.0, 16.0)],
                [(37.0, 30.0), (60.0, 21.0), (26.0, 58.0)],
                [(63.0, 34.0), (45.0, 54.0), (66.0, 57.0)],
            ],
        }
    }
}

impl AnchorSet {
    /// Partition twelve area-sorted centers into four consecutive groups of
    /// three, assigned to strides 4/8/16/32.
    pub fn from_centers(centers: &[BoxWH]) -> Result<Self> {
        if centers.len() != 12 {
            return Err(Error::InvalidSpec(format!(
                "anchor set needs exactly 12 centers, got {}",
                centers.len()
            )));
        }
        let mut sorted = centers.to_vec();
        sorted.sort_by(|a, b| a.area().total_cmp(&b.area()).then(a.w.total_cmp(&b.w)));
        let mut groups = [[(0.0, 0.0); 3]; 4];
        for (i, c) in sorted.iter().enumerate() {
            groups[i / 3][i % 3] = (c.w, c.h);
        }
        Ok(AnchorSet { groups })
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.groups {
            for &(w, h) in g {
                BoxWH::new(w, h)?;
            }
        }
        Ok(())
    }

    /// Text form: one line per stride group, three "w,h" pairs each.
    pub fn to_text(&self) -> String {
        self.groups
            .iter()
            .map(|g| {
                g.iter()
                    .map(|(w, h)| format!("{},{}", trim_num(*w), trim_num(*h)))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

fn trim_num(v: f64) -> String {
    if (v - v.round()).abs() < 1e-9 {
        format!("{}", v.round() as i64)
    } else {
        format!("{v:.1}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_wh_hand_values() {
        let b = |w, h| BoxWH::new(w, h).unwrap();
        assert_eq!(iou_wh(b(3.0, 5.0), b(3.0, 5.0)).unwrap(), 1.0);
        assert!((iou_wh(b(2.0, 2.0), b(4.0, 4.0)).unwrap() - 0.25).abs() < 1e-15);
        assert!((iou_wh(b(1.0, 4.0), b(4.0, 1.0)).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        assert!(BoxWH::new(0.0, 1.0).is_err());
        assert!(iou_wh(BoxWH { w: -1.0, h: 2.0 }, b(1.0, 1.0)).is_err());
    }

    #[test]
    fn distance_is_symmetric_zero_iff_equal_bounded() {
        let mut rng = test_rng(50);
        for _ in 0..200 {
            let a = BoxWH {
                w: rng.gen_range(0.5..100.0),
                h: rng.gen_range(0.5..100.0),
            };
            let b = BoxWH {
                w: rng.gen_range(0.5..100.0),
                h: rng.gen_range(0.5..100.0),
            };
            let dab = distance(a, b);
            let dba = distance(b, a);
            assert!((dab - dba).abs() < 1e-15);
            assert!((0.0..1.0).contains(&dab));
            assert_eq!(distance(a, a), 0.0);
            if dab == 0.0 {
                assert!((a.w - b.w).abs() < 1e-12 && (a.h - b.h).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_identical_boxes() {
        let boxes = vec![BoxWH { w: 10.0, h: 20.0 }; 8];
        let result = kmeans_1iou(&boxes, 3, 1, 50, 1e-9).unwrap();
        assert_eq!(result.mean_distance, 0.0);
        for c in &result.centers {
            assert_eq!((c.w, c.h), (10.0, 20.0));
        }
    }

    #[test]
    fn recovers_two_tight_generators() {
        for seed in 0..20u64 {
            let mut rng = test_rng(1000 + seed);
            let mut boxes = Vec::new();
            for _ in 0..50 {
                boxes.push(BoxWH {
                    w: 10.0 + rng.gen_range(-0.5..0.5),
                    h: 10.0 + rng.gen_range(-0.5..0.5),
                });
                boxes.push(BoxWH {
                    w: 50.0 + rng.gen_range(-0.5..0.5),
                    h: 50.0 + rng.gen_range(-0.5..0.5),
                });
            }
            let result = kmeans_1iou(&boxes, 2, seed, 100, 1e-9).unwrap();
            assert!((result.centers[0].w - 10.0).abs() <= 1.0, "seed {seed}");
            assert!((result.centers[0].h - 10.0).abs() <= 1.0);
            assert!((result.centers[1].w - 50.0).abs() <= 1.0);
            assert!((result.centers[1].h - 50.0).abs() <= 1.0);
        }
    }

    #[test]
    fn objective_trace_never_increases() {
        let mut rng = test_rng(60);
        let boxes: Vec<BoxWH> = (0..120)
            .map(|_| BoxWH {
                w: rng.gen_range(2.0..80.0),
                h: rng.gen_range(2.0..80.0),
            })
            .collect();
        let result = kmeans_1iou(&boxes, 12, 7, 200, 1e-9).unwrap();
        for pair in result.distance_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn deterministic_for_fixed_seed_and_rejects_small_input() {
        let mut rng = test_rng(61);
        let boxes: Vec<BoxWH> = (0..40)
            .map(|_| BoxWH {
                w: rng.gen_range(2.0..40.0),
                h: rng.gen_range(2.0..40.0),
            })
            .collect();
        let a = kmeans_1iou(&boxes, 12, 5, 100, 1e-9).unwrap();
        let b = kmeans_1iou(&boxes, 12, 5, 100, 1e-9).unwrap();
        assert_eq!(a.centers, b.centers);
        assert!(kmeans_1iou(&boxes[..5], 12, 5, 100, 1e-9).is_err());
    }

    #[test]
    fn anchor_grouping_matches_text_format() {
        let set = AnchorSet::default();
        let text = set.to_text();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), "7,16 10,9 18,7");
        set.validate().unwrap();

        let centers: Vec<BoxWH> = set
            .groups
            .iter()
            .flatten()
            .map(|&(w, h)| BoxWH { w, h })
            .collect();
        let rebuilt = AnchorSet::from_centers(&centers).unwrap();
        // Area-ascending regrouping keeps 4 groups of 3.
        for g in rebuilt.groups.iter() {
            assert_eq!(g.len(), 3);
        }
        let areas: Vec<f64> = rebuilt.groups.iter().flatten().map(|(w, h)| w * h).collect();
        for pair in areas.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
    }
}

//! Boxes, overlap measures, the centerness target, and the Average Recall
//! evaluator.
//!
//! All coordinates are normalized to [0, 1]. Degeneracy conventions (zero-area
//! boxes, points outside a box) are chosen so every function is total — no 0/0
//! branches can reach training.

use serde::{Deserialize, Serialize};

/// Axis-aligned box in corner encoding, normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxXYXY {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Axis-aligned box in center-size encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCCWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Distances from a point to the four edges of a box (FCOS-style l, r, t, b).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeDistances {
    pub l: f64,
    pub r: f64,
    pub t: f64,
    pub b: f64,
}

impl BoxXYXY {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "corners out of order: {x1},{y1},{x2},{y2}");
        BoxXYXY { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn to_ccwh(&self) -> BoxCCWH {
        BoxCCWH {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }
}

impl BoxCCWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        debug_assert!(w >= 0.0 && h >= 0.0, "negative size: {w}×{h}");
        BoxCCWH { cx, cy, w, h }
    }

    pub fn to_xyxy(&self) -> BoxXYXY {
        BoxXYXY {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }
}

/// Intersection-over-union. Degenerate (zero-area) operands give 0, including
/// identical degenerate boxes.
pub fn iou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Generalized IoU: iou − (hull − union)/hull. Equals iou when one box
/// contains the other; both-degenerate operands give 0.
pub fn giou(a: &BoxXYXY, b: &BoxXYXY) -> f64 {
    let area_a = a.area();
    let area_b = b.area();
    if area_a == 0.0 && area_b == 0.0 {
        return 0.0;
    }
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = area_a + area_b - inter;
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if hull <= 0.0 {
        return 0.0;
    }
    let iou_term = if union > 0.0 { inter / union } else { 0.0 };
    iou_term - (hull - union) / hull
}

/// Distances from `point` to the four edges of `bx` (negative when outside).
pub fn edge_distances(point: (f64, f64), bx: &BoxXYXY) -> EdgeDistances {
    EdgeDistances {
        l: point.0 - bx.x1,
        r: bx.x2 - point.0,
        t: point.1 - bx.y1,
        b: bx.y2 - point.1,
    }
}

/// Centerness supervision target: sqrt(min(l,r)/max(l,r) · min(t,b)/max(t,b)).
///
/// 1 exactly at the box center, 0 on any edge. Points outside the box and
/// zero-width/height boxes yield 0 (the caller treats such points as
/// non-positive — they carry no centerness supervision).
pub fn centerness_target(point: (f64, f64), bx: &BoxXYXY) -> f64 {
    let d = edge_distances(point, bx);
    centerness_from_distances(&d)
}

/// Centerness from explicit edge distances.
pub fn centerness_from_distances(d: &EdgeDistances) -> f64 {
    if d.l < 0.0 || d.r < 0.0 || d.t < 0.0 || d.b < 0.0 {
        return 0.0;
    }
    let mx = d.l.max(d.r);
    let my = d.t.max(d.b);
    if mx <= 0.0 || my <= 0.0 {
        return 0.0;
    }
    ((d.l.min(d.r) / mx) * (d.t.min(d.b) / my)).sqrt()
}

/// IoU thresholds of the AR protocol: 0.50 to 0.95 in steps of 0.05.
pub const AR_THRESHOLDS: [f64; 10] =
    [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Normalized-area size buckets (COCO's 32²/96² pixel cuts rescaled to a
/// 128-pixel canvas): small < (1/16)², medium < (1/4)², large otherwise.
pub const SMALL_AREA_MAX: f64 = 1.0 / 256.0;
pub const MEDIUM_AREA_MAX: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBucket {
    Small,
    Medium,
    Large,
}

pub fn size_bucket(area: f64) -> SizeBucket {
    if area < SMALL_AREA_MAX {
        SizeBucket::Small
    } else if area < MEDIUM_AREA_MAX {
        SizeBucket::Medium
    } else {
        SizeBucket::Large
    }
}

/// Average recall of one proposal budget, overall and per size bucket.
/// A bucket with no GT anywhere in the dataset has no defined recall (None).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArScores {
    pub ar: Option<f64>,
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

/// Maximum-cardinality one-to-one matching count on the thresholded overlap
/// graph (edges where IoU ≥ tau), via augmenting paths. The count is
/// order-invariant, so the result is deterministic by construction.
/// `ious[g][p]` is GT g × proposal p; `subset` selects the GT rows in play.
fn max_matched(ious: &[Vec<f64>], subset: &[usize], tau: f64) -> usize {
    let props = match ious.first() {
        Some(row) => row.len(),
        None => return 0,
    };
    fn augment(
        ious: &[Vec<f64>],
        subset: &[usize],
        tau: f64,
        gi: usize,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for p in 0..seen.len() {
            if ious[subset[gi]][p] >= tau && !seen[p] {
                seen[p] = true;
                let free = match owner[p] {
                    None => true,
                    Some(prev) => augment(ious, subset, tau, prev, seen, owner),
                };
                if free {
                    owner[p] = Some(gi);
                    return true;
                }
            }
        }
        false
    }
    let mut owner: Vec<Option<usize>> = vec![None; props];
    let mut count = 0;
    for gi in 0..subset.len() {
        let mut seen = vec![false; props];
        if augment(ious, subset, tau, gi, &mut seen, &mut owner) {
            count += 1;
        }
    }
    count
}

/// Dataset-level average recall at the top-`budget` proposals per image.
///
/// `proposals_per_image` must be ranked by score descending. Counting is
/// pooled: per IoU threshold, summed matches over all images divided by the
/// summed GT count, then averaged over the 10 thresholds. Images with no GT
/// contribute to no denominator. Size-bucket scores rerun the matcher against
/// only that bucket's GT (all proposals stay available).
pub fn average_recall(
    proposals_per_image: &[Vec<BoxXYXY>],
    gt_per_image: &[Vec<BoxXYXY>],
    budget: usize,
) -> ArScores {
    assert_eq!(
        proposals_per_image.len(),
        gt_per_image.len(),
        "proposal/GT image counts differ"
    );
    assert!(budget >= 1, "budget must be ≥ 1");

    // [all, small, medium, large]
    let mut total_gt = [0usize; 4];
    let mut matched = [[0usize; AR_THRESHOLDS.len()]; 4];

    for (props, gts) in proposals_per_image.iter().zip(gt_per_image) {
        if gts.is_empty() {
            continue;
        }
        let top = &props[..budget.min(props.len())];
        let ious: Vec<Vec<f64>> = gts
            .iter()
            .map(|g| top.iter().map(|p| iou(g, p)).collect())
            .collect();

        let all: Vec<usize> = (0..gts.len()).collect();
        let subsets: [Vec<usize>; 4] = [
            all.clone(),
            all.iter().copied().filter(|&g| size_bucket(gts[g].area()) == SizeBucket::Small).collect(),
            all.iter().copied().filter(|&g| size_bucket(gts[g].area()) == SizeBucket::Medium).collect(),
            all.iter().copied().filter(|&g| size_bucket(gts[g].area()) == SizeBucket::Large).collect(),
        ];
        for (bucket, subset) in subsets.iter().enumerate() {
            if subset.is_empty() {
                continue;
            }
            total_gt[bucket] += subset.len();
            for (ti, &tau) in AR_THRESHOLDS.iter().enumerate() {
                matched[bucket][ti] += max_matched(&ious, subset, tau);
            }
        }
    }

    let score = |bucket: usize| -> Option<f64> {
        if total_gt[bucket] == 0 {
            return None;
        }
        let mut acc = 0.0;
        for ti in 0..AR_THRESHOLDS.len() {
            acc += matched[bucket][ti] as f64 / total_gt[bucket] as f64;
        }
        Some(acc / AR_THRESHOLDS.len() as f64)
    };

    ArScores { ar: score(0), small: score(1), medium: score(2), large: score(3) }
}

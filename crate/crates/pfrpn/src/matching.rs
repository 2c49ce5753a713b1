//! Set-prediction objective: Hungarian assignment between predicted and
//! ground-truth boxes, focal classification against the refined embedding,
//! L1+GIoU regression, and the total objective that folds in the router
//! balance and centerness terms.
//!
//! The assignment is recomputed every step and treated as a constant during
//! backpropagation — it is piecewise constant in the parameters, so this is
//! the exact gradient almost everywhere.

use crate::geometry::{giou, BoxCCWH, BoxXYXY};
use crate::numerics::{BufId, Tape};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Injective GT→prediction assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (prediction index, GT index), sorted by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_predictions: Vec<usize>,
}

/// Minimum-cost assignment of every GT (column) to a distinct prediction
/// (row) via the standard potentials algorithm. O(G²·P). Deterministic:
/// columns are introduced in order and rows scanned ascending, so fully tied
/// matrices resolve to the identity-like assignment.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let p = cost.len();
    let g = cost.first().map_or(0, |row| row.len());
    for row in cost {
        if row.len() != g {
            return Err(Error::InvalidArgument("ragged cost matrix".into()));
        }
        if row.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument("non-finite matching cost".into()));
        }
    }
    if p < g {
        return Err(Error::InvalidArgument(format!(
            "cannot assign {g} ground-truth boxes to only {p} predictions"
        )));
    }
    if g == 0 {
        return Ok(MatchResult { pairs: Vec::new(), unmatched_predictions: (0..p).collect() });
    }

    // jobs (1-based) = GT, workers (1-based) = predictions
    let (n, m) = (g, p);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1]; // worker → job, 0 = free
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[j - 1][i0 - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::with_capacity(g);
    let mut matched = vec![false; p];
    for j in 1..=m {
        if owner[j] != 0 {
            pairs.push((j - 1, owner[j] - 1));
            matched[j - 1] = true;
        }
    }
    pairs.sort_unstable();
    let unmatched_predictions = (0..p).filter(|&i| !matched[i]).collect();
    Ok(MatchResult { pairs, unmatched_predictions })
}

/// Focal-loss shape parameters; γ must be a small non-negative integer so the
/// power is expressible as exact repeated multiplication on the tape.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 0.25, gamma: 2.0 }
    }
}

impl FocalParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config {
                field: "train.focal.alpha".into(),
                message: "must be in [0, 1]".into(),
            });
        }
        if self.gamma < 0.0 || self.gamma.fract() != 0.0 || self.gamma > 8.0 {
            return Err(Error::Config {
                field: "train.focal.gamma".into(),
                message: "must be an integer in [0, 8]".into(),
            });
        }
        Ok(())
    }

    fn gamma_int(&self) -> u32 {
        self.gamma as u32
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One focal term. softplus(−x) is −log σ(x), so this is the standard
/// α(1−p)^γ·BCE⁺ / (1−α)p^γ·BCE⁻ decomposition in stable form.
pub fn focal_element(logit: f64, positive: bool, focal: &FocalParams) -> f64 {
    let p = sigmoid(logit);
    if positive {
        focal.alpha * (1.0 - p).powf(focal.gamma) * softplus(-logit)
    } else {
        (1.0 - focal.alpha) * p.powf(focal.gamma) * softplus(logit)
    }
}

/// Focal loss over all prediction logits, targets 1 at matched indices and 0
/// elsewhere, normalized by max(1, matched count).
pub fn classification_loss(logits: &[f64], matched: &[bool], focal: &FocalParams) -> f64 {
    assert_eq!(logits.len(), matched.len());
    let total: f64 = logits
        .iter()
        .zip(matched)
        .map(|(&x, &m)| focal_element(x, m, focal))
        .sum();
    let norm = matched.iter().filter(|&&m| m).count().max(1);
    total / norm as f64
}

fn powi_tape(tape: &mut Tape, x: BufId, k: u32) -> BufId {
    if k == 0 {
        let (r, c) = tape.dims(x);
        return tape.leaf(r, c, vec![1.0; r * c]);
    }
    let mut acc = x;
    for _ in 1..k {
        acc = tape.mul(acc, x);
    }
    acc
}

/// Tape focal classification loss over a (P, 1) logit column.
pub fn classification_loss_tape(
    tape: &mut Tape,
    logits: BufId,
    matched: &[bool],
    focal: &FocalParams,
) -> BufId {
    let (rows, cols) = tape.dims(logits);
    assert_eq!(cols, 1, "logits must be a column");
    assert_eq!(rows, matched.len());
    let gamma = focal.gamma_int();

    let pos_mask: Vec<f64> = matched.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
    let neg_mask: Vec<f64> = matched.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
    let pos_mask = tape.leaf(rows, 1, pos_mask);
    let neg_mask = tape.leaf(rows, 1, neg_mask);

    let p = tape.sigmoid(logits);
    let one_minus_p = tape.affine(p, -1.0, 1.0);
    let neg_logits = tape.neg(logits);
    let bce_pos = tape.softplus(neg_logits);
    let bce_neg = tape.softplus(logits);

    let focus_pos = powi_tape(tape, one_minus_p, gamma);
    let focus_neg = powi_tape(tape, p, gamma);

    let pos = tape.mul(focus_pos, bce_pos);
    let pos = tape.scale(pos, focal.alpha);
    let pos = tape.mul(pos, pos_mask);
    let neg = tape.mul(focus_neg, bce_neg);
    let neg = tape.scale(neg, 1.0 - focal.alpha);
    let neg = tape.mul(neg, neg_mask);

    let both = tape.add(pos, neg);
    let total = tape.sum_all(both);
    let norm = matched.iter().filter(|&&m| m).count().max(1);
    tape.scale(total, 1.0 / norm as f64)
}

/// Mean over matched pairs of w_l1·Σ|Δccwh| + w_giou·(1 − GIoU).
pub fn regression_loss(pred: &[BoxCCWH], gt: &[BoxCCWH], weights: (f64, f64)) -> f64 {
    assert_eq!(pred.len(), gt.len());
    if pred.is_empty() {
        return 0.0;
    }
    let (w_l1, w_giou) = weights;
    let mut total = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let l1 = (p.cx - g.cx).abs() + (p.cy - g.cy).abs() + (p.w - g.w).abs() + (p.h - g.h).abs();
        let gi = giou(&p.to_xyxy(), &g.to_xyxy());
        total += w_l1 * l1 + w_giou * (1.0 - gi);
    }
    total / pred.len() as f64
}

/// Split a (1, 4) row into four scalar buffers.
pub fn split4(tape: &mut Tape, row: BufId) -> [BufId; 4] {
    let col = tape.reshape(row, 4, 1);
    [
        tape.gather_rows(col, &[0]),
        tape.gather_rows(col, &[1]),
        tape.gather_rows(col, &[2]),
        tape.gather_rows(col, &[3]),
    ]
}

/// ccwh scalars → xyxy scalars on the tape.
pub fn ccwh_to_xyxy_tape(tape: &mut Tape, ccwh: [BufId; 4]) -> [BufId; 4] {
    let [cx, cy, w, h] = ccwh;
    let half_w = tape.scale(w, 0.5);
    let half_h = tape.scale(h, 0.5);
    [
        tape.sub(cx, half_w),
        tape.sub(cy, half_h),
        tape.add(cx, half_w),
        tape.add(cy, half_h),
    ]
}

/// GIoU between an on-tape box (xyxy scalars, assumed non-degenerate) and a
/// constant GT box.
pub fn giou_tape(tape: &mut Tape, pred: [BufId; 4], gt: &BoxXYXY) -> BufId {
    let [px1, py1, px2, py2] = pred;
    let gx1 = tape.leaf(1, 1, vec![gt.x1]);
    let gy1 = tape.leaf(1, 1, vec![gt.y1]);
    let gx2 = tape.leaf(1, 1, vec![gt.x2]);
    let gy2 = tape.leaf(1, 1, vec![gt.y2]);

    let ix1 = tape.max_elem(px1, gx1);
    let iy1 = tape.max_elem(py1, gy1);
    let ix2 = tape.min_elem(px2, gx2);
    let iy2 = tape.min_elem(py2, gy2);
    let iw_raw = tape.sub(ix2, ix1);
    let ih_raw = tape.sub(iy2, iy1);
    let iw = tape.relu(iw_raw);
    let ih = tape.relu(ih_raw);
    let inter = tape.mul(iw, ih);

    let pw = tape.sub(px2, px1);
    let ph = tape.sub(py2, py1);
    let area_p = tape.mul(pw, ph);
    let area_g = tape.leaf(1, 1, vec![gt.area()]);
    let sum_areas = tape.add(area_p, area_g);
    let union = tape.sub(sum_areas, inter);

    let hx1 = tape.min_elem(px1, gx1);
    let hy1 = tape.min_elem(py1, gy1);
    let hx2 = tape.max_elem(px2, gx2);
    let hy2 = tape.max_elem(py2, gy2);
    let hw = tape.sub(hx2, hx1);
    let hh = tape.sub(hy2, hy1);
    let hull = tape.mul(hw, hh);

    let iou_term = tape.div(inter, union);
    let slack = tape.sub(hull, union);
    let penalty = tape.div(slack, hull);
    tape.sub(iou_term, penalty)
}

/// Tape regression loss: `pred_rows` are (1, 4) ccwh rows, one per matched
/// pair, aligned with `gt`.
pub fn regression_loss_tape(
    tape: &mut Tape,
    pred_rows: &[BufId],
    gt: &[BoxCCWH],
    weights: (f64, f64),
) -> BufId {
    assert_eq!(pred_rows.len(), gt.len());
    let (w_l1, w_giou) = weights;
    if pred_rows.is_empty() {
        return tape.leaf(1, 1, vec![0.0]);
    }
    let mut acc: Option<BufId> = None;
    for (&row, g) in pred_rows.iter().zip(gt) {
        let ccwh = split4(tape, row);
        let gt_vals = [g.cx, g.cy, g.w, g.h];
        let mut l1: Option<BufId> = None;
        for (coord, gv) in ccwh.iter().zip(gt_vals) {
            let c = tape.leaf(1, 1, vec![gv]);
            let d = tape.sub(*coord, c);
            let a = tape.abs(d);
            l1 = Some(match l1 {
                None => a,
                Some(prev) => tape.add(prev, a),
            });
        }
        let l1 = l1.unwrap();
        let xyxy = ccwh_to_xyxy_tape(tape, ccwh);
        let gi = giou_tape(tape, xyxy, &g.to_xyxy());
        let one_minus_gi = tape.affine(gi, -1.0, 1.0);
        let weighted_l1 = tape.scale(l1, w_l1);
        let weighted_gi = tape.scale(one_minus_gi, w_giou);
        let term = tape.add(weighted_l1, weighted_gi);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let total = acc.unwrap();
    tape.scale(total, 1.0 / pred_rows.len() as f64)
}

/// Matching-cost weights (classification, L1, GIoU).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchWeights {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        MatchWeights { cls: 2.0, l1: 5.0, giou: 2.0 }
    }
}

/// Assignment cost matrix (P, G): the classification term uses the
/// positive-minus-negative focal convention so that confident predictions
/// bid lower for GT slots.
pub fn matching_cost(
    pred_boxes: &[BoxCCWH],
    pred_logits: &[f64],
    gt: &[BoxXYXY],
    weights: &MatchWeights,
    focal: &FocalParams,
) -> Vec<Vec<f64>> {
    assert_eq!(pred_boxes.len(), pred_logits.len());
    pred_boxes
        .iter()
        .zip(pred_logits)
        .map(|(pb, &logit)| {
            let cls_cost =
                focal_element(logit, true, focal) - focal_element(logit, false, focal);
            let pb_xyxy = pb.to_xyxy();
            gt.iter()
                .map(|g| {
                    let gc = g.to_ccwh();
                    let l1 = (pb.cx - gc.cx).abs()
                        + (pb.cy - gc.cy).abs()
                        + (pb.w - gc.w).abs()
                        + (pb.h - gc.h).abs();
                    let gi = giou(&pb_xyxy, g);
                    weights.cls * cls_cost + weights.l1 * l1 + weights.giou * (1.0 - gi)
                })
                .collect()
        })
        .collect()
}

/// The assembled objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reg: f64,
    pub cls: f64,
    pub rt: f64,
    pub ctr: f64,
    pub lambda: f64,
    pub total: f64,
}

/// total = reg + cls + rt + λ·ctr; any non-finite part aborts, naming the
/// part and the scene that produced it.
pub fn total_loss(reg: f64, cls: f64, rt: f64, ctr: f64, lambda: f64, scene: usize) -> Result<LossBreakdown> {
    for (value, part) in [(reg, "reg"), (cls, "cls"), (rt, "rt"), (ctr, "ctr")] {
        if !value.is_finite() {
            return Err(Error::NonFinite { scene, part });
        }
    }
    let total = reg + cls + rt + lambda * ctr;
    if !total.is_finite() {
        return Err(Error::NonFinite { scene, part: "total" });
    }
    Ok(LossBreakdown { reg, cls, rt, ctr, lambda, total })
}

//! Centerness-Guided Query Selection: every memory token gets a
//! classification score (sigmoid of its dot product with the refined
//! embedding) and a predicted center score from a small MLP head; the product
//! ranks the tokens and the top N become decoder queries.
//!
//! The center head is supervised only at positive tokens — cells whose center
//! falls strictly inside a ground-truth box — against the analytic centerness
//! of the smallest enclosing box.

use crate::geometry::{centerness_target, edge_distances, BoxXYXY};
use crate::numerics::{BufId, Tape, Tensor};

/// One flattened pyramid cell offered as a query candidate.
#[derive(Debug, Clone)]
pub struct MemoryToken {
    pub feature: Vec<f64>,
    /// Normalized (x, y) of the cell center on the canvas.
    pub position: (f64, f64),
    /// 1-based source pyramid level.
    pub level: usize,
}

/// A scored candidate; `combined` drives selection and proposal ranking.
#[derive(Debug, Clone)]
pub struct QueryToken {
    /// Index into the memory token list.
    pub index: usize,
    pub feature: Vec<f64>,
    pub position: (f64, f64),
    pub level: usize,
    pub cls_score: f64,
    pub center_score: f64,
    pub combined: f64,
}

/// Center-scoring MLP: C → C (ReLU) → 1, sigmoid output.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterNetParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl CenterNetParams {
    pub fn channels(&self) -> usize {
        self.w1.dims2().0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CenterNetIds {
    pub w1: BufId,
    pub b1: BufId,
    pub w2: BufId,
    pub b2: BufId,
}

impl CenterNetParams {
    pub fn leaf(&self, tape: &mut Tape) -> CenterNetIds {
        CenterNetIds {
            w1: tape.leaf_tensor(&self.w1),
            b1: tape.leaf_tensor(&self.b1),
            w2: tape.leaf_tensor(&self.w2),
            b2: tape.leaf_tensor(&self.b2),
        }
    }
}

/// Sigmoid objectness of every memory row against the embedding: (M, 1).
pub fn cls_scores_tape(tape: &mut Tape, memory: BufId, embedding: BufId) -> BufId {
    let logits = tape.matmul_tb(memory, embedding);
    tape.sigmoid(logits)
}

/// Sigmoid center score of every memory row: (M, 1).
pub fn center_scores_tape(tape: &mut Tape, params: &CenterNetIds, memory: BufId) -> BufId {
    let h = tape.matmul(memory, params.w1);
    let h = tape.add_row(h, params.b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, params.w2);
    let out = tape.add_row(out, params.b2);
    tape.sigmoid(out)
}

/// Score all tokens. Pure wrapper over the tape path.
pub fn score_queries(
    tokens: &[MemoryToken],
    embedding: &Tensor,
    params: &CenterNetParams,
) -> Vec<QueryToken> {
    if tokens.is_empty() {
        return Vec::new();
    }
    let c = params.channels();
    let mut tape = Tape::new();
    let data: Vec<f64> = tokens.iter().flat_map(|t| t.feature.iter().copied()).collect();
    let memory = tape.leaf(tokens.len(), c, data);
    let emb = tape.leaf_tensor(embedding);
    let ids = params.leaf(&mut tape);
    let cls = cls_scores_tape(&mut tape, memory, emb);
    let center = center_scores_tape(&mut tape, &ids, memory);
    let combined = tape.mul(cls, center);
    let cls_v = tape.value(cls).to_vec();
    let center_v = tape.value(center).to_vec();
    let combined_v = tape.value(combined).to_vec();
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| QueryToken {
            index: i,
            feature: t.feature.clone(),
            position: t.position,
            level: t.level,
            cls_score: cls_v[i],
            center_score: center_v[i],
            combined: combined_v[i],
        })
        .collect()
}

/// Indices of the top-n scores, descending, ties to the smaller index.
/// Returns all indices (sorted) when n exceeds the population.
pub fn select_indices(combined: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..combined.len()).collect();
    order.sort_by(|&a, &b| combined[b].total_cmp(&combined[a]).then(a.cmp(&b)));
    order.truncate(n);
    order
}

/// The top-N scored tokens, combined score descending.
pub fn select_queries(scored: &[QueryToken], n: usize) -> Vec<QueryToken> {
    assert!(n >= 1, "query budget must be ≥ 1");
    let combined: Vec<f64> = scored.iter().map(|q| q.combined).collect();
    select_indices(&combined, n).into_iter().map(|i| scored[i].clone()).collect()
}

/// Supervision sites for the center head: tokens strictly inside ≥ 1 GT box,
/// each with the analytic centerness of its smallest-area enclosing box.
pub fn centerness_positives(
    positions: &[(f64, f64)],
    gt: &[BoxXYXY],
) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (i, &pos) in positions.iter().enumerate() {
        let mut best: Option<(f64, f64)> = None; // (area, target)
        for bx in gt {
            let d = edge_distances(pos, bx);
            if d.l > 0.0 && d.r > 0.0 && d.t > 0.0 && d.b > 0.0 {
                let area = bx.area();
                if best.map_or(true, |(a, _)| area < a) {
                    best = Some((area, centerness_target(pos, bx)));
                }
            }
        }
        if let Some((_, target)) = best {
            out.push((i, target));
        }
    }
    out
}

/// Mean absolute error over the positive set; 0 when the set is empty.
pub fn centerness_loss(predicted: &[f64], targets: &[f64], positives: &[usize]) -> f64 {
    assert_eq!(predicted.len(), targets.len());
    if positives.is_empty() {
        return 0.0;
    }
    let sum: f64 = positives.iter().map(|&i| (predicted[i] - targets[i]).abs()).sum();
    sum / positives.len() as f64
}

/// Tape centerness loss: `center_scores` is the (M, 1) head output;
/// `positives` pairs token indices with their targets. Returns a scalar buf.
pub fn centerness_loss_tape(
    tape: &mut Tape,
    center_scores: BufId,
    positives: &[(usize, f64)],
) -> BufId {
    if positives.is_empty() {
        return tape.leaf(1, 1, vec![0.0]);
    }
    let indices: Vec<usize> = positives.iter().map(|&(i, _)| i).collect();
    let targets: Vec<f64> = positives.iter().map(|&(_, t)| t).collect();
    let picked = tape.gather_rows(center_scores, &indices);
    let target_col = tape.leaf(positives.len(), 1, targets);
    let diff = tape.sub(picked, target_col);
    let absdiff = tape.abs(diff);
    let total = tape.sum_all(absdiff);
    tape.scale(total, 1.0 / positives.len() as f64)
}

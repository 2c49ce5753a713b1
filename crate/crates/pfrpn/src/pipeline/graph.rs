//! The single differentiable graph from pixels to proposals and loss.

use super::backbone::backbone_tape;
use super::{inverse_sigmoid, sinusoidal_pe, ModelParams, NetConfig, ParamIds, TrainConfig};
use crate::cgqs::{
    center_scores_tape, centerness_loss_tape, centerness_positives, cls_scores_tape,
    select_indices, CenterNetIds,
};
use crate::csp::{csp_refine_tape, CspConfig, MaskRecord, TapeLevel};
use crate::geometry::BoxXYXY;
use crate::matching::{
    classification_loss_tape, hungarian_match, matching_cost, regression_loss_tape, total_loss,
    LossBreakdown,
};
use crate::numerics::{BufId, Tape, Tensor};
use crate::sia::{
    route_and_select_tape, router_balance_loss_tape, sia_update_tape, RouterOutput, SiaParamIds,
};
use crate::synthdata::Scene;
use crate::Result;
use serde::{Deserialize, Serialize};

/// One ranked region proposal in normalized xyxy coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box")]
    pub box_xyxy: [f64; 4],
    pub score: f64,
}

impl Proposal {
    pub fn bbox(&self) -> BoxXYXY {
        let [x1, y1, x2, y2] = self.box_xyxy;
        BoxXYXY::new(x1, y1, x2, y2)
    }
}

/// Where a selected query came from and how it scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectedQuery {
    /// Index into the flattened memory.
    pub token_index: usize,
    /// Normalized (x, y) of the source cell center.
    pub position: (f64, f64),
    /// 1-based source pyramid level.
    pub level: usize,
    pub cls: f64,
    pub center: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
}

/// Everything inspectable about one forward pass.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub levels: Vec<LevelSummary>,
    /// Projected level grids (before position encoding), one per level.
    pub level_grids: Vec<Tensor>,
    /// Present when the adapter ran.
    pub router: Option<RouterOutput>,
    pub masks: MaskRecord,
    pub embedding_after_sia: Vec<f64>,
    pub embedding_final: Vec<f64>,
    pub selected: Vec<SelectedQuery>,
}

/// On-tape handles for the loss heads, plus the diagnostics gathered while
/// building the graph.
pub struct GraphOutput {
    /// (N, 4) predicted boxes, center-size, unclamped.
    pub boxes: BufId,
    /// (N, 1) decoder classification logits.
    pub logits: BufId,
    /// (N, 1) center scores of the selected queries.
    pub center_selected: BufId,
    /// Raw router weights when the adapter ran (for the balance loss).
    pub raw_ids: Option<Vec<BufId>>,
    pub diagnostics: Diagnostics,
}

fn sia_ids(ids: &ParamIds) -> SiaParamIds {
    SiaParamIds {
        router_w1: ids.get("sia.router.w1"),
        router_b1: ids.get("sia.router.b1"),
        router_w2: ids.get("sia.router.w2"),
        router_b2: ids.get("sia.router.b2"),
        wq: ids.get("sia.attn.wq"),
        wk: ids.get("sia.attn.wk"),
        wv: ids.get("sia.attn.wv"),
        wo: ids.get("sia.attn.wo"),
    }
}

fn center_ids(ids: &ParamIds) -> CenterNetIds {
    CenterNetIds {
        w1: ids.get("center.w1"),
        b1: ids.get("center.b1"),
        w2: ids.get("center.w2"),
        b2: ids.get("center.b2"),
    }
}

pub fn build_graph(
    tape: &mut Tape,
    scene: &Scene,
    params: &ModelParams,
    ids: &ParamIds,
    net: &NetConfig,
) -> Result<GraphOutput> {
    net.validate()?;
    let c = params.config.channels;
    let canvas = scene.canvas;

    // Feature pyramid.
    let levels = backbone_tape(tape, scene, params, ids)?;
    let grids: Vec<BufId> = levels.iter().map(|l| l.grid).collect();
    let level_ids: Vec<usize> = levels.iter().map(|l| l.level).collect();
    let summaries: Vec<LevelSummary> = levels
        .iter()
        .map(|l| LevelSummary { level: l.level, h: l.h, w: l.w, stride: l.stride })
        .collect();
    let level_grids: Vec<Tensor> = grids
        .iter()
        .map(|&g| {
            let (r, cc) = tape.dims(g);
            Tensor::new(vec![r, cc], tape.value(g).to_vec())
        })
        .collect();

    // Adapter: route the pooled level descriptors and update the embedding.
    let embedding = ids.get("embedding");
    let pooled: Vec<BufId> = grids
        .iter()
        .map(|&g| {
            let (rows, _) = tape.dims(g);
            tape.weighted_row_sum(g, vec![1.0 / rows as f64; rows])
        })
        .collect();
    let (f_sia, raw_ids, router) = if net.use_sia {
        let sp = sia_ids(ids);
        let routed = route_and_select_tape(tape, &sp, &pooled, &level_ids, net.k)?;
        let updated = sia_update_tape(tape, &sp, embedding, &grids, &pooled, &routed);
        (updated, Some(routed.raw_ids.clone()), Some(routed.output.clone()))
    } else {
        (embedding, None, None)
    };
    let embedding_after_sia = tape.value(f_sia).to_vec();

    // Cascade refinement; disabling the cascade means zero sweeps.
    let csp_cfg = if net.use_csp {
        net.csp.clone()
    } else {
        CspConfig { iterations: 0, ..net.csp.clone() }
    };
    let tape_levels: Vec<TapeLevel> =
        levels.iter().map(|l| TapeLevel { level: l.level, h: l.h, w: l.w, grid: l.grid }).collect();
    let (f_final, masks) = csp_refine_tape(tape, f_sia, &tape_levels, &csp_cfg)?;
    let embedding_final = tape.value(f_final).to_vec();

    // Flatten into memory with sinusoidal positions.
    let mut mem_parts = Vec::with_capacity(levels.len());
    let mut positions: Vec<(f64, f64)> = Vec::new();
    let mut token_levels: Vec<usize> = Vec::new();
    let mut token_strides: Vec<usize> = Vec::new();
    for l in &levels {
        let pe = sinusoidal_pe(l.h, l.w, l.stride, canvas, c);
        let pe_id = tape.leaf_tensor(&pe);
        mem_parts.push(tape.add(l.grid, pe_id));
        for y in 0..l.h {
            for x in 0..l.w {
                positions.push((
                    ((x as f64 + 0.5) * l.stride as f64) / canvas as f64,
                    ((y as f64 + 0.5) * l.stride as f64) / canvas as f64,
                ));
                token_levels.push(l.level);
                token_strides.push(l.stride);
            }
        }
    }
    let memory = tape.concat_rows(&mem_parts);
    let m_tokens = tape.dims(memory).0;

    // Score every memory token and keep the best N.
    let cls = cls_scores_tape(tape, memory, f_final);
    let center = center_scores_tape(tape, &center_ids(ids), memory);
    let cls_v = tape.value(cls).to_vec();
    let center_v = tape.value(center).to_vec();
    let combined_v: Vec<f64> = if net.use_cgqs {
        cls_v.iter().zip(&center_v).map(|(a, b)| a * b).collect()
    } else {
        cls_v.clone()
    };
    let n = net.n_queries.min(m_tokens);
    let sel = select_indices(&combined_v, n);
    let selected: Vec<SelectedQuery> = sel
        .iter()
        .map(|&i| SelectedQuery {
            token_index: i,
            position: positions[i],
            level: token_levels[i],
            cls: cls_v[i],
            center: center_v[i],
            combined: combined_v[i],
        })
        .collect();
    let mut queries = tape.gather_rows(memory, &sel);
    let center_selected = tape.gather_rows(center, &sel);

    // Decoder: self-attention, cross-attention to memory, FFN; residuals.
    let scale = 1.0 / (c as f64).sqrt();
    for d in 0..params.config.decoder_layers {
        let p = |name: &str| ids.get(&format!("decoder.{d}.{name}"));
        // self-attention over the query set
        let q = tape.matmul(queries, p("self.wq"));
        let k = tape.matmul(queries, p("self.wk"));
        let v = tape.matmul(queries, p("self.wv"));
        let scores = tape.matmul_tb(q, k);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        let ctx = tape.matmul(probs, v);
        let out = tape.matmul(ctx, p("self.wo"));
        queries = tape.add(queries, out);
        // cross-attention to the full memory
        let q = tape.matmul(queries, p("cross.wq"));
        let k = tape.matmul(memory, p("cross.wk"));
        let v = tape.matmul(memory, p("cross.wv"));
        let scores = tape.matmul_tb(q, k);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        let ctx = tape.matmul(probs, v);
        let out = tape.matmul(ctx, p("cross.wo"));
        queries = tape.add(queries, out);
        // feed-forward
        let h = tape.matmul(queries, p("ffn.w1"));
        let h = tape.add_row(h, p("ffn.b1"));
        let h = tape.relu(h);
        let h = tape.matmul(h, p("ffn.w2"));
        let h = tape.add_row(h, p("ffn.b2"));
        queries = tape.add(queries, h);
    }

    // Heads: classification against the final embedding, boxes as offsets
    // from each query's reference point.
    let logits = tape.matmul_tb(queries, f_final);
    let deltas = tape.matmul(queries, ids.get("box_head.w"));
    let deltas = tape.add_row(deltas, ids.get("box_head.b"));
    let mut ref_logits = Vec::with_capacity(sel.len() * 4);
    for &i in &sel {
        let (px, py) = positions[i];
        let s = (4.0 * token_strides[i] as f64 / canvas as f64).min(0.5);
        for v in [px, py, s, s] {
            ref_logits.push(inverse_sigmoid(v));
        }
    }
    let refs = tape.leaf(sel.len(), 4, ref_logits);
    let pre = tape.add(deltas, refs);
    let boxes = tape.sigmoid(pre);

    Ok(GraphOutput {
        boxes,
        logits,
        center_selected,
        raw_ids,
        diagnostics: Diagnostics {
            levels: summaries,
            level_grids,
            router,
            masks,
            embedding_after_sia,
            embedding_final,
            selected,
        },
    })
}

/// Run the model on one scene: ranked, clamped proposals plus diagnostics.
pub fn forward(
    scene: &Scene,
    params: &ModelParams,
    net: &NetConfig,
) -> Result<(Vec<Proposal>, Diagnostics)> {
    let mut tape = Tape::new();
    let ids = params.leaf(&mut tape);
    let graph = build_graph(&mut tape, scene, params, &ids, net)?;
    let boxes = tape.value(graph.boxes);
    let proposals = graph
        .diagnostics
        .selected
        .iter()
        .enumerate()
        .map(|(row, q)| {
            let cx = boxes[row * 4];
            let cy = boxes[row * 4 + 1];
            let w = boxes[row * 4 + 2];
            let h = boxes[row * 4 + 3];
            let clamp = |v: f64| v.clamp(0.0, 1.0);
            Proposal {
                box_xyxy: [
                    clamp(cx - w / 2.0),
                    clamp(cy - h / 2.0),
                    clamp(cx + w / 2.0),
                    clamp(cy + h / 2.0),
                ],
                score: q.combined,
            }
        })
        .collect();
    Ok((proposals, graph.diagnostics))
}

/// Build the full training objective for one scene on `tape`. Returns the
/// scalar loss buffer, its finite value breakdown, and the graph handles.
pub fn scene_loss(
    tape: &mut Tape,
    scene: &Scene,
    params: &ModelParams,
    ids: &ParamIds,
    net: &NetConfig,
    train: &TrainConfig,
) -> Result<(BufId, LossBreakdown, GraphOutput)> {
    let graph = build_graph(tape, scene, params, ids, net)?;
    let n = graph.diagnostics.selected.len();

    let boxes_v = tape.value(graph.boxes).to_vec();
    let pred_ccwh: Vec<crate::geometry::BoxCCWH> = (0..n)
        .map(|r| {
            crate::geometry::BoxCCWH::new(
                boxes_v[r * 4],
                boxes_v[r * 4 + 1],
                boxes_v[r * 4 + 2],
                boxes_v[r * 4 + 3],
            )
        })
        .collect();
    let logits_v: Vec<f64> = tape.value(graph.logits).to_vec();
    let gt = &scene.annotation.boxes;

    let assignment = if gt.is_empty() {
        crate::matching::MatchResult { pairs: Vec::new(), unmatched_predictions: (0..n).collect() }
    } else {
        let cost = matching_cost(&pred_ccwh, &logits_v, gt, &train.match_weights, &train.focal);
        hungarian_match(&cost)?
    };

    let mut matched = vec![false; n];
    let mut pred_rows = Vec::with_capacity(assignment.pairs.len());
    let mut gt_ccwh = Vec::with_capacity(assignment.pairs.len());
    for &(pred, gti) in &assignment.pairs {
        matched[pred] = true;
        pred_rows.push(tape.gather_rows(graph.boxes, &[pred]));
        gt_ccwh.push(gt[gti].to_ccwh());
    }

    let reg = regression_loss_tape(tape, &pred_rows, &gt_ccwh, (train.w_l1, train.w_giou));
    let cls = classification_loss_tape(tape, graph.logits, &matched, &train.focal);
    let rt = match &graph.raw_ids {
        Some(raw) => router_balance_loss_tape(tape, raw),
        None => tape.leaf(1, 1, vec![0.0]),
    };
    let sel_positions: Vec<(f64, f64)> =
        graph.diagnostics.selected.iter().map(|q| q.position).collect();
    let positives = centerness_positives(&sel_positions, gt);
    let ctr = centerness_loss_tape(tape, graph.center_selected, &positives);

    let breakdown = total_loss(
        tape.scalar_value(reg),
        tape.scalar_value(cls),
        tape.scalar_value(rt),
        tape.scalar_value(ctr),
        train.lambda,
        scene.id,
    )?;

    let ctr_scaled = tape.scale(ctr, train.lambda);
    let s1 = tape.add(reg, cls);
    let s2 = tape.add(s1, rt);
    let total = tape.add(s2, ctr_scaled);
    debug_assert!((tape.scalar_value(total) - breakdown.total).abs() <= 1e-9);

    Ok((total, breakdown, graph))
}

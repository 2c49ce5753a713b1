//! Cascade Self-Prompt: the embedding walks the pyramid deep-to-shallow,
//! thresholding cosine similarity into a mask at each level and adding the
//! masked average pool back onto itself. Mask indicators are stop-gradient
//! constants; gradients flow through the pooling weights and the additive
//! updates only.

use crate::numerics::{cosine_similarity, BufId, Tape, Tensor};
use crate::sia::LevelFeatures;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CspConfig {
    /// Similarity threshold δ; a cell activates when cosine exceeds it strictly.
    pub delta: f64,
    /// Number of full deep-to-shallow sweeps.
    pub iterations: usize,
    /// Level visit order within one sweep, deepest first.
    pub level_order: Vec<usize>,
}

impl Default for CspConfig {
    fn default() -> Self {
        CspConfig { delta: 0.3, iterations: 3, level_order: vec![4, 3, 2, 1] }
    }
}

impl CspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config {
                field: "csp.delta".into(),
                message: "must satisfy 0 ≤ δ < 1".into(),
            });
        }
        if self.level_order.is_empty() {
            return Err(Error::Config {
                field: "csp.level_order".into(),
                message: "must name at least one level".into(),
            });
        }
        if self.level_order.iter().any(|&l| l == 0) {
            return Err(Error::Config {
                field: "csp.level_order".into(),
                message: "levels are 1-based".into(),
            });
        }
        Ok(())
    }
}

/// One level visit: which mask fired and the embedding state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVisit {
    /// 0-based sweep number.
    pub iteration: usize,
    /// 1-based level id.
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub mask: Vec<bool>,
    pub activated: usize,
    /// Embedding state immediately before this visit (replaying it must
    /// reproduce `mask` exactly).
    pub state_before: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaskRecord {
    pub visits: Vec<MaskVisit>,
}

impl MaskRecord {
    /// Total activated cells per sweep.
    pub fn activated_per_iteration(&self) -> Vec<usize> {
        let sweeps = self.visits.iter().map(|v| v.iteration + 1).max().unwrap_or(0);
        let mut totals = vec![0usize; sweeps];
        for v in &self.visits {
            totals[v.iteration] += v.activated;
        }
        totals
    }
}

/// Boolean activation grid: cell true iff cosine(state, cell) > delta, strict.
pub fn similarity_mask(state: &[f64], level: &LevelFeatures, delta: f64) -> Vec<bool> {
    let c = level.channels();
    level
        .grid
        .data
        .chunks_exact(c)
        .map(|cell| cosine_similarity(state, cell) > delta)
        .collect()
}

/// Mean of the features at activated cells; the zero vector when none are.
pub fn masked_average_pool(mask: &[bool], level: &LevelFeatures) -> Tensor {
    let c = level.channels();
    let rows = level.grid.dims2().0;
    assert_eq!(mask.len(), rows, "mask shape must match the grid");
    let count = mask.iter().filter(|&&m| m).count();
    let mut out = vec![0.0; c];
    if count == 0 {
        return Tensor::new(vec![1, c], out);
    }
    for (row, &m) in level.grid.data.chunks_exact(c).zip(mask) {
        if m {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    for o in out.iter_mut() {
        *o /= count as f64;
    }
    Tensor::new(vec![1, c], out)
}

/// A pyramid level already registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeLevel {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub grid: BufId,
}

/// Run the cascade on a tape. Masks are computed from forward values and
/// re-enter as constant pooling weights, so the returned state stays
/// differentiable w.r.t. the initial state and the grids.
pub fn csp_refine_tape(
    tape: &mut Tape,
    state0: BufId,
    levels: &[TapeLevel],
    config: &CspConfig,
) -> Result<(BufId, MaskRecord)> {
    config.validate()?;
    for &want in &config.level_order {
        if !levels.iter().any(|lv| lv.level == want) {
            return Err(Error::InvalidArgument(format!(
                "cascade order names level {want}, which was not provided"
            )));
        }
    }

    let mut state = state0;
    let mut record = MaskRecord::default();
    for iteration in 0..config.iterations {
        for &level_id in &config.level_order {
            let lv = levels.iter().find(|lv| lv.level == level_id).unwrap();
            let (rows, c) = tape.dims(lv.grid);
            let state_before = tape.value(state).to_vec();
            let grid_vals = tape.value(lv.grid).to_vec();
            let mask: Vec<bool> = grid_vals
                .chunks_exact(c)
                .map(|cell| cosine_similarity(&state_before, cell) > config.delta)
                .collect();
            let activated = mask.iter().filter(|&&m| m).count();
            record.visits.push(MaskVisit {
                iteration,
                level: level_id,
                h: lv.h,
                w: lv.w,
                mask: mask.clone(),
                activated,
                state_before,
            });
            if activated > 0 {
                let weights: Vec<f64> = mask
                    .iter()
                    .map(|&m| if m { 1.0 / activated as f64 } else { 0.0 })
                    .collect();
                debug_assert_eq!(weights.len(), rows);
                let pooled = tape.weighted_row_sum(lv.grid, weights);
                state = tape.add(state, pooled);
            }
        }
    }
    Ok((state, record))
}

/// Pure cascade on plain tensors.
pub fn csp_refine(
    embedding: &Tensor,
    levels: &[LevelFeatures],
    config: &CspConfig,
) -> Result<(Tensor, MaskRecord)> {
    let mut tape = Tape::new();
    let state0 = tape.leaf_tensor(embedding);
    let tape_levels: Vec<TapeLevel> = levels
        .iter()
        .map(|lv| TapeLevel {
            level: lv.level,
            h: lv.h,
            w: lv.w,
            grid: tape.leaf_tensor(&lv.grid),
        })
        .collect();
    let (state, record) = csp_refine_tape(&mut tape, state0, &tape_levels, config)?;
    let c = embedding.dims2().1;
    Ok((Tensor::new(vec![1, c], tape.value(state).to_vec()), record))
}

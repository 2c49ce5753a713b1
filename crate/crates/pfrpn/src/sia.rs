//! Sparse Image-Aware Adapter: a router scores each pyramid level from its
//! pooled descriptor, the top-k levels are fused into the learnable embedding
//! by single-head cross-attention, and a balance loss keeps the router honest.
//!
//! Level selection is a hard gate — gradients flow through the softmax over
//! the selected raw weights and through the attention path, never through the
//! top-k itself. Every forward here is expressed in tape ops; the pure
//! functions wrap a throwaway tape so both routes share one semantics.

use crate::numerics::{topk_indices, BufId, Tape, Tensor};
use crate::Result;

/// One pyramid level: `grid` is row-major (H·W, C), one row per cell.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    /// 1-based pyramid index (1 = shallowest).
    pub level: usize,
    pub h: usize,
    pub w: usize,
    /// Pixels per cell on the input canvas.
    pub stride: usize,
    pub grid: Tensor,
}

impl LevelFeatures {
    pub fn new(level: usize, h: usize, w: usize, stride: usize, grid: Tensor) -> Self {
        let (rows, _) = grid.dims2();
        assert_eq!(rows, h * w, "grid rows must equal H·W");
        assert!(level >= 1, "levels are 1-based");
        LevelFeatures { level, h, w, stride, grid }
    }

    pub fn channels(&self) -> usize {
        self.grid.dims2().1
    }
}

/// The shared query embedding: `vector` holds the trained parameters,
/// `refined` the working state, equal to `vector` until an update runs.
#[derive(Debug, Clone)]
pub struct LearnableEmbedding {
    pub vector: Tensor,
    pub refined: Tensor,
}

impl LearnableEmbedding {
    pub fn new(vector: Tensor) -> Self {
        let refined = vector.clone();
        LearnableEmbedding { vector, refined }
    }
}

/// Router MLP (C → 2C → 1, ReLU) and attention projections (each C×C).
#[derive(Debug, Clone, PartialEq)]
pub struct SiaParams {
    pub router_w1: Tensor,
    pub router_b1: Tensor,
    pub router_w2: Tensor,
    pub router_b2: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl SiaParams {
    pub fn channels(&self) -> usize {
        self.wq.dims2().0
    }
}

/// Parameter leaves registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SiaParamIds {
    pub router_w1: BufId,
    pub router_b1: BufId,
    pub router_w2: BufId,
    pub router_b2: BufId,
    pub wq: BufId,
    pub wk: BufId,
    pub wv: BufId,
    pub wo: BufId,
}

impl SiaParams {
    pub fn leaf(&self, tape: &mut Tape) -> SiaParamIds {
        SiaParamIds {
            router_w1: tape.leaf_tensor(&self.router_w1),
            router_b1: tape.leaf_tensor(&self.router_b1),
            router_w2: tape.leaf_tensor(&self.router_w2),
            router_b2: tape.leaf_tensor(&self.router_b2),
            wq: tape.leaf_tensor(&self.wq),
            wk: tape.leaf_tensor(&self.wk),
            wv: tape.leaf_tensor(&self.wv),
            wo: tape.leaf_tensor(&self.wo),
        }
    }
}

/// Router verdict over the presented levels.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    /// One raw weight per presented level, in presentation order.
    pub raw: Vec<f64>,
    /// 1-based level ids of the k winners, by raw weight descending.
    pub selected: Vec<usize>,
    /// Softmax over the winners' raw weights, aligned with `selected`.
    pub normalized: Vec<f64>,
}

/// Routing state living on a tape: raw logits and normalized weights stay
/// connected for gradients; the winning positions are constants.
#[derive(Debug, Clone)]
pub struct RoutedOnTape {
    pub raw_ids: Vec<BufId>,
    /// 0-based positions into the presented level slice, weight-descending.
    pub positions: Vec<usize>,
    /// (1, k) softmax over the selected raw weights.
    pub normalized_id: BufId,
    pub output: RouterOutput,
}

/// Global average pooling of one on-tape grid: (H·W, C) → (1, C).
pub fn pool_level_tape(tape: &mut Tape, grid: BufId) -> BufId {
    let (rows, _) = tape.dims(grid);
    tape.weighted_row_sum(grid, vec![1.0 / rows as f64; rows])
}

pub fn pool_levels_tape(tape: &mut Tape, grids: &[BufId]) -> Vec<BufId> {
    grids.iter().map(|&g| pool_level_tape(tape, g)).collect()
}

/// Pure pooled descriptors, one (1, C) tensor per level.
pub fn pool_levels(levels: &[LevelFeatures]) -> Vec<Tensor> {
    let mut tape = Tape::new();
    levels
        .iter()
        .map(|lv| {
            let g = tape.leaf_tensor(&lv.grid);
            let p = pool_level_tape(&mut tape, g);
            Tensor::new(vec![1, lv.channels()], tape.value(p).to_vec())
        })
        .collect()
}

/// Router MLP on one pooled descriptor: (1, C) → scalar logit.
pub fn router_logit_tape(tape: &mut Tape, params: &SiaParamIds, pooled: BufId) -> BufId {
    let h = tape.matmul(pooled, params.router_w1);
    let h = tape.add_row(h, params.router_b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, params.router_w2);
    tape.add_row(out, params.router_b2)
}

/// Selection + normalization given raw weights, in value space.
/// `level_ids` are the 1-based ids of the presented levels, aligned with `raw`.
pub fn select_from_raw(raw: &[f64], level_ids: &[usize], k: usize) -> Result<RouterOutput> {
    assert_eq!(raw.len(), level_ids.len());
    let positions = topk_indices(raw, k)?;
    let chosen: Vec<f64> = positions.iter().map(|&p| raw[p]).collect();
    let normalized = crate::numerics::softmax(&chosen)?;
    Ok(RouterOutput {
        raw: raw.to_vec(),
        selected: positions.iter().map(|&p| level_ids[p]).collect(),
        normalized,
    })
}

/// Score every pooled level on the tape, pick the top k, and put the softmax
/// over the winners' raw weights back on the tape.
pub fn route_and_select_tape(
    tape: &mut Tape,
    params: &SiaParamIds,
    pooled: &[BufId],
    level_ids: &[usize],
    k: usize,
) -> Result<RoutedOnTape> {
    let raw_ids: Vec<BufId> =
        pooled.iter().map(|&p| router_logit_tape(tape, params, p)).collect();
    let raw: Vec<f64> = raw_ids.iter().map(|&id| tape.scalar_value(id)).collect();
    let positions = topk_indices(&raw, k)?;
    let chosen: Vec<BufId> = positions.iter().map(|&p| raw_ids[p]).collect();
    let stacked = tape.concat_rows(&chosen); // (k, 1)
    let row = tape.reshape(stacked, 1, k);
    let normalized_id = tape.softmax_rows(row);
    let output = RouterOutput {
        raw,
        selected: positions.iter().map(|&p| level_ids[p]).collect(),
        normalized: tape.value(normalized_id).to_vec(),
    };
    Ok(RoutedOnTape { raw_ids, positions, normalized_id, output })
}

/// Pure routing on level features.
pub fn route_and_select(
    levels: &[LevelFeatures],
    params: &SiaParams,
    k: usize,
) -> Result<RouterOutput> {
    let mut tape = Tape::new();
    let ids = params.leaf(&mut tape);
    let grids: Vec<BufId> = levels.iter().map(|lv| tape.leaf_tensor(&lv.grid)).collect();
    let pooled = pool_levels_tape(&mut tape, &grids);
    let level_ids: Vec<usize> = levels.iter().map(|lv| lv.level).collect();
    Ok(route_and_select_tape(&mut tape, &ids, &pooled, &level_ids, k)?.output)
}

/// Single-head cross-attention of the (1, C) query against a token sequence,
/// all four projections applied. `kv` is (M, C).
pub fn attend_tape(tape: &mut Tape, params: &SiaParamIds, query: BufId, kv: BufId) -> BufId {
    let (_, c) = tape.dims(query);
    let q = tape.matmul(query, params.wq);
    let k = tape.matmul(kv, params.wk);
    let v = tape.matmul(kv, params.wv);
    let scores = tape.matmul_tb(q, k); // (1, M)
    let scaled = tape.scale(scores, 1.0 / (c as f64).sqrt());
    let attn = tape.softmax_rows(scaled);
    let ctx = tape.matmul(attn, v);
    tape.matmul(ctx, params.wo)
}

/// The fused update: weighted sum over selected levels of attention against
/// [pooled ; flattened grid], the pooled vector prepended as token 0.
pub fn sia_update_tape(
    tape: &mut Tape,
    params: &SiaParamIds,
    embedding: BufId,
    grids: &[BufId],
    pooled: &[BufId],
    routed: &RoutedOnTape,
) -> BufId {
    let k = routed.positions.len();
    let col = tape.reshape(routed.normalized_id, k, 1); // weights as rows for gathering
    let mut acc: Option<BufId> = None;
    for (j, &pos) in routed.positions.iter().enumerate() {
        let kv = tape.concat_rows(&[pooled[pos], grids[pos]]);
        let attended = attend_tape(tape, params, embedding, kv);
        let w_j = tape.gather_rows(col, &[j]); // (1, 1)
        let weighted = tape.mul_scalar(attended, w_j);
        acc = Some(match acc {
            None => weighted,
            Some(prev) => tape.add(prev, weighted),
        });
    }
    acc.expect("at least one selected level")
}

/// Pure fused update following a routing decision already made.
pub fn sia_update(
    embedding: &LearnableEmbedding,
    levels: &[LevelFeatures],
    router_out: &RouterOutput,
    params: &SiaParams,
) -> Tensor {
    let mut tape = Tape::new();
    let ids = params.leaf(&mut tape);
    let emb = tape.leaf_tensor(&embedding.refined);
    let mut grids = Vec::with_capacity(router_out.selected.len());
    let mut pooled = Vec::with_capacity(router_out.selected.len());
    for &level_id in &router_out.selected {
        let lv = levels
            .iter()
            .find(|lv| lv.level == level_id)
            .expect("router selected a level that was not presented");
        let g = tape.leaf_tensor(&lv.grid);
        grids.push(g);
        pooled.push(pool_level_tape(&mut tape, g));
    }
    let k = router_out.selected.len();
    let weights = tape.leaf(1, k, router_out.normalized.clone());
    let routed = RoutedOnTape {
        raw_ids: Vec::new(),
        positions: (0..k).collect(),
        normalized_id: weights,
        output: router_out.clone(),
    };
    let out = sia_update_tape(&mut tape, &ids, emb, &grids, &pooled, &routed);
    let c = embedding.refined.dims2().1;
    Tensor::new(vec![1, c], tape.value(out).to_vec())
}

/// Population standard deviation of the four raw router weights.
pub fn router_balance_loss(raw: &[f64]) -> f64 {
    assert_eq!(raw.len(), 4, "balance loss is defined over exactly 4 levels");
    let mean = raw.iter().sum::<f64>() / 4.0;
    (raw.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / 4.0).sqrt()
}

/// Tape version over the raw logit buffers.
pub fn router_balance_loss_tape(tape: &mut Tape, raw_ids: &[BufId]) -> BufId {
    assert_eq!(raw_ids.len(), 4, "balance loss is defined over exactly 4 levels");
    let col = tape.concat_rows(raw_ids); // (4, 1)
    let mean = tape.weighted_row_sum(col, vec![0.25; 4]); // (1, 1)
    let neg_mean = tape.neg(mean);
    let centered = tape.add_row(col, neg_mean);
    let sq = tape.mul(centered, centered);
    let var = tape.weighted_row_sum(sq, vec![0.25; 4]);
    tape.sqrt(var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_difference_check_coords;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * scale).collect(),
        )
    }

    fn random_params(rng: &mut ChaCha8Rng, c: usize) -> SiaParams {
        SiaParams {
            router_w1: random_tensor(rng, c, 2 * c, 0.8),
            router_b1: random_tensor(rng, 1, 2 * c, 0.2),
            router_w2: random_tensor(rng, 2 * c, 1, 0.8),
            router_b2: random_tensor(rng, 1, 1, 0.2),
            wq: random_tensor(rng, c, c, 0.8),
            wk: random_tensor(rng, c, c, 0.8),
            wv: random_tensor(rng, c, c, 0.8),
            wo: random_tensor(rng, c, c, 0.8),
        }
    }

    fn level_from_rows(level: usize, h: usize, w: usize, rows: Vec<Vec<f64>>) -> LevelFeatures {
        let c = rows[0].len();
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        LevelFeatures::new(level, h, w, 1 << level, Tensor::new(vec![h * w, c], data))
    }

    fn random_levels(rng: &mut ChaCha8Rng, c: usize, dims: &[(usize, usize)]) -> Vec<LevelFeatures> {
        dims.iter()
            .enumerate()
            .map(|(i, &(h, w))| {
                LevelFeatures::new(i + 1, h, w, 1 << (i + 2), random_tensor(rng, h * w, c, 1.0))
            })
            .collect()
    }

    #[test]
    fn pooling_hand_values() {
        let constant = level_from_rows(1, 2, 2, vec![vec![3.0, -1.0]; 4]);
        let single = level_from_rows(2, 1, 1, vec![vec![7.0, 2.0]]);
        let pair = level_from_rows(3, 2, 1, vec![vec![1.0, 0.0], vec![3.0, 2.0]]);
        let pooled = pool_levels(&[constant, single, pair]);
        assert_eq!(pooled[0].data, vec![3.0, -1.0]);
        assert_eq!(pooled[1].data, vec![7.0, 2.0]);
        assert_eq!(pooled[2].data, vec![2.0, 1.0]);
    }

    #[test]
    fn selection_and_normalization_hand_values() {
        let out = select_from_raw(&[0.1, 0.4, 0.3, 0.2], &[1, 2, 3, 4], 2).unwrap();
        assert_eq!(out.selected, vec![2, 3]);
        assert!((out.normalized[0] - 0.52498).abs() < 1e-5);
        assert!((out.normalized[1] - 0.47502).abs() < 1e-5);

        let all = select_from_raw(&[0.1, 0.4, 0.3, 0.2], &[1, 2, 3, 4], 4).unwrap();
        let full = crate::numerics::softmax(&[0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(all.selected, vec![2, 3, 4, 1]);
        for (a, b) in all.normalized.iter().zip(&full) {
            assert!((a - b).abs() < 1e-12);
        }

        let one = select_from_raw(&[0.1, 0.4, 0.3, 0.2], &[1, 2, 3, 4], 1).unwrap();
        assert_eq!(one.selected, vec![2]);
        assert_eq!(one.normalized, vec![1.0]);
    }

    #[test]
    fn routing_normalized_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..30 {
            let c = 4;
            let params = random_params(&mut rng, c);
            let levels = random_levels(&mut rng, c, &[(2, 2), (2, 1), (1, 2), (1, 1)]);
            for k in 1..=4 {
                let out = route_and_select(&levels, &params, k).unwrap();
                assert_eq!(out.selected.len(), k);
                let sum: f64 = out.normalized.iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
                // selected are exactly the k largest raws (ties to smaller index)
                let expect = topk_indices(&out.raw, k).unwrap();
                let got: Vec<usize> = out.selected.iter().map(|&l| l - 1).collect();
                assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn constant_tokens_pass_through_value_projection() {
        // every token identical → attention output is t·Wv·Wo no matter the scores
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let params = random_params(&mut rng, c);
        let token = vec![0.3, -0.7, 1.1, 0.25];
        let levels = vec![
            level_from_rows(1, 2, 2, vec![token.clone(); 4]),
            level_from_rows(2, 1, 2, vec![token.clone(); 2]),
        ];
        let router = route_and_select(&levels, &params, 2).unwrap();
        let emb = LearnableEmbedding::new(random_tensor(&mut rng, 1, c, 1.0));
        let out = sia_update(&emb, &levels, &router, &params);

        let mut tape = Tape::new();
        let t = tape.leaf(1, c, token);
        let wv = tape.leaf_tensor(&params.wv);
        let wo = tape.leaf_tensor(&params.wo);
        let tv = tape.matmul(t, wv);
        let expect = tape.matmul(tv, wo);
        for (a, b) in out.data.iter().zip(tape.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn k1_update_equals_single_level_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = 4;
        let params = random_params(&mut rng, c);
        let levels = random_levels(&mut rng, c, &[(2, 2), (2, 2), (1, 2), (1, 1)]);
        let router = route_and_select(&levels, &params, 1).unwrap();
        let emb = LearnableEmbedding::new(random_tensor(&mut rng, 1, c, 1.0));
        let out = sia_update(&emb, &levels, &router, &params);

        let lv = levels.iter().find(|l| l.level == router.selected[0]).unwrap();
        let mut tape = Tape::new();
        let ids = params.leaf(&mut tape);
        let e = tape.leaf_tensor(&emb.refined);
        let g = tape.leaf_tensor(&lv.grid);
        let p = pool_level_tape(&mut tape, g);
        let kv = tape.concat_rows(&[p, g]);
        let expect = attend_tape(&mut tape, &ids, e, kv);
        for (a, b) in out.data.iter().zip(tape.value(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Straight-line re-implementation of the fused update: plain loops, no
    // tape, textbook softmax. Serves as the independent oracle.
    fn oracle_update(
        emb: &[f64],
        levels: &[&LevelFeatures],
        weights: &[f64],
        p: &SiaParams,
    ) -> Vec<f64> {
        let c = emb.len();
        let matvec = |m: &Tensor, x: &[f64]| -> Vec<f64> {
            // x (1×r) · m (r×c)
            let (r, cc) = m.dims2();
            let mut out = vec![0.0; cc];
            for i in 0..r {
                for j in 0..cc {
                    out[j] += x[i] * m.data[i * cc + j];
                }
            }
            out
        };
        let mut result = vec![0.0; c];
        for (lv, &w) in levels.iter().zip(weights) {
            let rows = lv.grid.dims2().0;
            let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(rows + 1);
            let mut pooled = vec![0.0; c];
            for r in 0..rows {
                for j in 0..c {
                    pooled[j] += lv.grid.data[r * c + j] / rows as f64;
                }
            }
            tokens.push(pooled);
            for r in 0..rows {
                tokens.push(lv.grid.data[r * c..(r + 1) * c].to_vec());
            }
            let q = matvec(&p.wq, emb);
            let mut scores = Vec::with_capacity(tokens.len());
            for t in &tokens {
                let key = matvec(&p.wk, t);
                let dot: f64 = q.iter().zip(&key).map(|(a, b)| a * b).sum();
                scores.push(dot / (c as f64).sqrt());
            }
            let exps: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; c];
            for (t, e) in tokens.iter().zip(&exps) {
                let val = matvec(&p.wv, t);
                for j in 0..c {
                    ctx[j] += e / z * val[j];
                }
            }
            let out = matvec(&p.wo, &ctx);
            for j in 0..c {
                result[j] += w * out[j];
            }
        }
        result
    }

    #[test]
    fn update_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let c = 4;
        let params = random_params(&mut rng, c);
        let levels = random_levels(&mut rng, c, &[(2, 2), (2, 2)]);
        let router = route_and_select(&levels, &params, 2).unwrap();
        let emb = LearnableEmbedding::new(random_tensor(&mut rng, 1, c, 1.0));
        let out = sia_update(&emb, &levels, &router, &params);

        let ordered: Vec<&LevelFeatures> = router
            .selected
            .iter()
            .map(|&id| levels.iter().find(|l| l.level == id).unwrap())
            .collect();
        let expect = oracle_update(&emb.refined.data, &ordered, &router.normalized, &params);
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn update_ignores_order_of_unselected_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = 4;
        let params = random_params(&mut rng, c);
        let levels = random_levels(&mut rng, c, &[(2, 2), (2, 1), (1, 2), (1, 1)]);
        let emb = LearnableEmbedding::new(random_tensor(&mut rng, 1, c, 1.0));

        let router = route_and_select(&levels, &params, 2).unwrap();
        let baseline = sia_update(&emb, &levels, &router, &params);

        let mut shuffled = levels.clone();
        // swap the two levels the router did not pick
        let losers: Vec<usize> = (0..4)
            .filter(|i| !router.selected.contains(&levels[*i].level))
            .collect();
        shuffled.swap(losers[0], losers[1]);
        let router2 = route_and_select(&shuffled, &params, 2).unwrap();
        assert_eq!(router.selected, router2.selected);
        let permuted = sia_update(&emb, &shuffled, &router2, &params);
        for (a, b) in baseline.data.iter().zip(&permuted.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn balance_loss_hand_values() {
        assert_eq!(router_balance_loss(&[0.25; 4]), 0.0);
        assert!((router_balance_loss(&[1.0, 0.0, 0.0, 0.0]) - 0.43301).abs() < 1e-5);
        assert_eq!(router_balance_loss(&[-3.7; 4]), 0.0);
    }

    #[test]
    fn balance_loss_shift_and_scale_behavior() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let w: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let base = router_balance_loss(&w);
            let shift = rng.gen::<f64>() * 10.0 - 5.0;
            let shifted: Vec<f64> = w.iter().map(|x| x + shift).collect();
            assert!((router_balance_loss(&shifted) - base).abs() < 1e-9);

            let mean = w.iter().sum::<f64>() / 4.0;
            let alpha = rng.gen::<f64>() * 3.0 + 0.1;
            let scaled: Vec<f64> = w.iter().map(|x| mean + alpha * (x - mean)).collect();
            assert!((router_balance_loss(&scaled) - alpha * base).abs() < 1e-9);

            assert!(base > 0.0 || w.iter().all(|&x| x == w[0]));
        }
    }

    #[test]
    fn balance_loss_tape_matches_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for _ in 0..20 {
            let w: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let mut tape = Tape::new();
            let ids: Vec<BufId> = w.iter().map(|&x| tape.leaf(1, 1, vec![x])).collect();
            let loss = router_balance_loss_tape(&mut tape, &ids);
            assert!((tape.scalar_value(loss) - router_balance_loss(&w)).abs() < 1e-12);
        }
    }

    // Full differentiable path: pooled → router → softmax over winners,
    // attention fusion, plus the balance loss. Checked against central
    // differences for the embedding and every parameter tensor.
    #[test]
    fn gradients_pass_finite_difference_check() {
        let c = 4;
        let dims = [(2usize, 2usize), (2, 1), (1, 2), (1, 1)];
        for seed in [3u64, 19, 57] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(&mut rng, c);
            let levels = random_levels(&mut rng, c, &dims);
            let emb = random_tensor(&mut rng, 1, c, 1.0);
            let probe = random_tensor(&mut rng, 1, c, 1.0);

            // the hard top-k must not flip under ±h perturbations
            let router = route_and_select(&levels, &params, 2).unwrap();
            let mut sorted = router.raw.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(
                sorted[1] - sorted[2] > 1e-3,
                "seed {seed}: routing margin too thin for finite differences"
            );

            let run = |params: &SiaParams, emb: &Tensor| -> (Tape, BufId, SiaParamIds, BufId) {
                let mut tape = Tape::new();
                let ids = params.leaf(&mut tape);
                let e = tape.leaf_tensor(emb);
                let grids: Vec<BufId> =
                    levels.iter().map(|lv| tape.leaf_tensor(&lv.grid)).collect();
                let pooled = pool_levels_tape(&mut tape, &grids);
                let level_ids: Vec<usize> = levels.iter().map(|lv| lv.level).collect();
                let routed =
                    route_and_select_tape(&mut tape, &ids, &pooled, &level_ids, 2).unwrap();
                let refined = sia_update_tape(&mut tape, &ids, e, &grids, &pooled, &routed);
                let pr = tape.leaf_tensor(&probe);
                let proj = tape.mul(refined, pr);
                let main = tape.sum_all(proj);
                let balance = router_balance_loss_tape(&mut tape, &routed.raw_ids);
                let loss = tape.add(main, balance);
                (tape, loss, ids, e)
            };

            let (tape, loss, ids, emb_id) = run(&params, &emb);
            let grads = tape.backward(loss);

            // embedding gradient
            let emb_grad = Tensor::new(vec![1, c], grads.dense(emb_id, c));
            let err = finite_difference_check_coords(
                |x| {
                    let (t, l, _, _) = run(&params, x);
                    t.scalar_value(l)
                },
                &emb_grad,
                &emb,
                1e-5,
                &(0..c).collect::<Vec<_>>(),
            )
            .unwrap();
            assert!(err <= 1e-3, "seed {seed}: embedding grad error {err}");

            // every parameter tensor
            let fields: Vec<(usize, BufId, &Tensor)> = vec![
                (0, ids.router_w1, &params.router_w1),
                (1, ids.router_b1, &params.router_b1),
                (2, ids.router_w2, &params.router_w2),
                (3, ids.router_b2, &params.router_b2),
                (4, ids.wq, &params.wq),
                (5, ids.wk, &params.wk),
                (6, ids.wv, &params.wv),
                (7, ids.wo, &params.wo),
            ];
            for (slot, buf, tensor) in fields {
                let analytic = Tensor::new(tensor.shape.clone(), grads.dense(buf, tensor.numel()));
                let err = finite_difference_check_coords(
                    |x| {
                        let mut p = params.clone();
                        match slot {
                            0 => p.router_w1 = x.clone(),
                            1 => p.router_b1 = x.clone(),
                            2 => p.router_w2 = x.clone(),
                            3 => p.router_b2 = x.clone(),
                            4 => p.wq = x.clone(),
                            5 => p.wk = x.clone(),
                            6 => p.wv = x.clone(),
                            7 => p.wo = x.clone(),
                            _ => unreachable!(),
                        }
                        let (t, l, _, _) = run(&p, &emb);
                        t.scalar_value(l)
                    },
                    &analytic,
                    tensor,
                    1e-5,
                    &(0..tensor.numel()).collect::<Vec<_>>(),
                )
                .unwrap();
                assert!(err <= 1e-3, "seed {seed}: param slot {slot} grad error {err}");
            }
        }
    }
}

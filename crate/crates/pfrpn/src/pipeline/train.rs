//! Momentum-SGD training over synthetic scenes and the recall evaluator.

use super::checkpoint::save_checkpoint;
use super::graph::{forward, scene_loss};
use super::{ModelConfig, ModelParams, NetConfig, TrainConfig};
use crate::geometry::{average_recall, ArScores, BoxXYXY};
use crate::matching::LossBreakdown;
use crate::numerics::Tape;
use crate::synthdata::Scene;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything `train` needs besides the data.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub model: ModelConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    /// When set, a checkpoint is written here after every epoch
    /// (`epoch-<e>.ckpt`) plus a final `model.ckpt`.
    pub checkpoint_dir: Option<&'a Path>,
}

/// Mean loss over one pass through the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub scenes: usize,
    pub mean: LossBreakdown,
}

/// Train from scratch; scenes are visited in the given order every epoch,
/// so results are a pure function of data and configuration.
pub fn train(scenes: &[Scene], opts: &TrainOptions) -> Result<(ModelParams, Vec<EpochLog>)> {
    opts.model.validate()?;
    opts.net.validate()?;
    opts.train.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let max_gt = scenes.iter().map(|s| s.annotation.boxes.len()).max().unwrap_or(0);
    if max_gt > opts.net.n_queries {
        return Err(Error::Config {
            field: "train.n_queries".into(),
            message: format!(
                "budget {} is smaller than the densest scene ({max_gt} objects)",
                opts.net.n_queries
            ),
        });
    }

    let mut params = ModelParams::init(opts.model, opts.train.seed)?;
    let shapes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
    let mut velocity: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();

    let mut logs = Vec::with_capacity(opts.train.epochs);
    for epoch in 1..=opts.train.epochs {
        let mut sums = [0.0f64; 5]; // reg, cls, rt, ctr, total
        for batch in scenes.chunks(opts.train.batch_size) {
            let inv = 1.0 / batch.len() as f64;
            let mut accum: Vec<Vec<f64>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            for scene in batch {
                let mut tape = Tape::new();
                let ids = params.leaf(&mut tape);
                let (total, breakdown, _) =
                    scene_loss(&mut tape, scene, &params, &ids, &opts.net, &opts.train)?;
                let grads = tape.backward(total);
                // `ids.names` is built from `named_tensors`, so slots align.
                for slot in 0..ids.names.len() {
                    let g = grads.dense(ids.names[slot].1, shapes[slot]);
                    let acc = &mut accum[slot];
                    for (a, gv) in acc.iter_mut().zip(&g) {
                        *a += gv * inv;
                    }
                }
                sums[0] += breakdown.reg;
                sums[1] += breakdown.cls;
                sums[2] += breakdown.rt;
                sums[3] += breakdown.ctr;
                sums[4] += breakdown.total;
            }
            let norm: f64 =
                accum.iter().flat_map(|g| g.iter().map(|v| v * v)).sum::<f64>().sqrt();
            if norm > opts.train.clip_norm {
                let shrink = opts.train.clip_norm / norm;
                for g in &mut accum {
                    for v in g.iter_mut() {
                        *v *= shrink;
                    }
                }
            }
            let lr = opts.train.learning_rate;
            let mu = opts.train.momentum;
            for (slot, (_, tensor)) in params.named_tensors_mut().into_iter().enumerate() {
                let v = &mut velocity[slot];
                let g = &accum[slot];
                for i in 0..v.len() {
                    v[i] = mu * v[i] + g[i];
                    tensor.data[i] -= lr * v[i];
                }
            }
        }
        let n = scenes.len() as f64;
        let mean = LossBreakdown {
            reg: sums[0] / n,
            cls: sums[1] / n,
            rt: sums[2] / n,
            ctr: sums[3] / n,
            lambda: opts.train.lambda,
            total: sums[4] / n,
        };
        if !mean.total.is_finite() {
            return Err(Error::NonFinite { scene: 0, part: "total" });
        }
        logs.push(EpochLog { epoch, scenes: scenes.len(), mean });
        if let Some(dir) = opts.checkpoint_dir {
            save_checkpoint(&dir.join(format!("epoch-{epoch}.ckpt")), &params)?;
        }
    }
    if let Some(dir) = opts.checkpoint_dir {
        save_checkpoint(&dir.join("model.ckpt"), &params)?;
    }
    Ok((params, logs))
}

/// Recall table for one proposal budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArRow {
    pub budget: usize,
    pub scores: ArScores,
}

/// Dataset-level evaluation result; serializes deterministically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArReport {
    pub scenes: usize,
    pub budgets: Vec<ArRow>,
}

impl ArReport {
    /// The overall AR at a given budget, when present.
    pub fn ar_at(&self, budget: usize) -> Option<f64> {
        self.budgets.iter().find(|r| r.budget == budget).and_then(|r| r.scores.ar)
    }
}

/// Run the model over a dataset and score average recall at each budget.
pub fn evaluate(
    scenes: &[Scene],
    params: &ModelParams,
    net: &NetConfig,
    budgets: &[usize],
) -> Result<ArReport> {
    if scenes.is_empty() {
        return Err(Error::InvalidArgument("evaluation set is empty".into()));
    }
    let mut proposals: Vec<Vec<BoxXYXY>> = Vec::with_capacity(scenes.len());
    let mut gts: Vec<Vec<BoxXYXY>> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let (props, _) = forward(scene, params, net)?;
        proposals.push(props.iter().map(|p| p.bbox()).collect());
        gts.push(scene.annotation.boxes.clone());
    }
    let budgets = budgets
        .iter()
        .map(|&budget| {
            if budget == 0 {
                return Err(Error::InvalidArgument("proposal budget must be ≥ 1".into()));
            }
            Ok(ArRow { budget, scores: average_recall(&proposals, &gts, budget) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ArReport { scenes: scenes.len(), budgets })
}

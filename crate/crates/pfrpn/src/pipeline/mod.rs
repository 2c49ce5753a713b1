//! End-to-end assembly: toy conv backbone → level projection → SIA fusion →
//! CSP cascade → flattened memory with sinusoidal positions → query selection
//! → small decoder → box head; plus the training loop, the evaluator, and
//! binary checkpoints.

mod backbone;
mod checkpoint;
mod graph;
mod train;

pub use backbone::{backbone_forward, backbone_tape, ConvIds, ConvParams};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{
    build_graph, forward, scene_loss, Diagnostics, GraphOutput, LevelSummary, Proposal,
    SelectedQuery,
};
pub use train::{evaluate, train, ArReport, ArRow, EpochLog, TrainOptions};

use crate::cgqs::CenterNetParams;
use crate::csp::CspConfig;
use crate::matching::{FocalParams, MatchWeights};
use crate::numerics::{BufId, Tape, Tensor};
use crate::sia::SiaParams;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Structural hyperparameters baked into a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Common channel width C after level projection.
    pub channels: usize,
    pub decoder_layers: usize,
    /// Stride of the stem conv; 2 gives the standard 4/8/16/32 pyramid,
    /// 1 halves every stride (used by tiny-canvas configurations).
    pub stem_stride: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { channels: 64, decoder_layers: 2, stem_stride: 2 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 4 != 0 {
            return Err(Error::Config {
                field: "model.channels".into(),
                message: "must be a positive multiple of 4".into(),
            });
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config {
                field: "model.decoder_layers".into(),
                message: "must be ≥ 1".into(),
            });
        }
        if !(self.stem_stride == 1 || self.stem_stride == 2) {
            return Err(Error::Config {
                field: "model.stem_stride".into(),
                message: "must be 1 or 2".into(),
            });
        }
        Ok(())
    }

    /// The canvas must shrink to an integer grid through all five stride-2
    /// stages (stem at its own stride), i.e. divide 16·stem_stride.
    pub fn canvas_divisor(&self) -> usize {
        16 * self.stem_stride
    }

    /// Pixels per cell for 1-based pyramid level i.
    pub fn level_stride(&self, level: usize) -> usize {
        self.stem_stride << level
    }
}

/// Behavioral knobs of one forward pass.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// SIA fuses this many levels.
    pub k: usize,
    pub n_queries: usize,
    pub csp: CspConfig,
    pub use_sia: bool,
    pub use_csp: bool,
    pub use_cgqs: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            k: 2,
            n_queries: 32,
            csp: CspConfig::default(),
            use_sia: true,
            use_csp: true,
            use_cgqs: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.k) {
            return Err(Error::Config { field: "train.k".into(), message: "must be in 1..=4".into() });
        }
        if self.n_queries == 0 {
            return Err(Error::Config {
                field: "train.n_queries".into(),
                message: "must be ≥ 1".into(),
            });
        }
        self.csp.validate()
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global-norm bound applied to each batch gradient before the momentum
    /// update; the loss surface is spiky because nothing in the network
    /// normalizes activations, so unclipped batches can blow past any usable
    /// learning rate.
    pub clip_norm: f64,
    /// Centerness weight λ in the total objective.
    pub lambda: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub focal: FocalParams,
    pub match_weights: MatchWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 100,
            batch_size: 1,
            learning_rate: 0.01,
            momentum: 0.9,
            clip_norm: 1.0,
            lambda: 5.0,
            w_l1: 5.0,
            w_giou: 2.0,
            focal: FocalParams::default(),
            match_weights: MatchWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config {
                field: "train.learning_rate".into(),
                message: "learning rate must be positive".into(),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config {
                field: "train.momentum".into(),
                message: "must be in [0, 1)".into(),
            });
        }
        if self.epochs == 0 {
            return Err(Error::Config { field: "train.epochs".into(), message: "must be ≥ 1".into() });
        }
        if self.batch_size == 0 {
            return Err(Error::Config {
                field: "train.batch_size".into(),
                message: "must be ≥ 1".into(),
            });
        }
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return Err(Error::Config {
                field: "train.clip_norm".into(),
                message: "must be finite and > 0".into(),
            });
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config {
                field: "train.lambda".into(),
                message: "must be finite and ≥ 0".into(),
            });
        }
        if !(self.w_l1 >= 0.0 && self.w_giou >= 0.0) {
            return Err(Error::Config {
                field: "train.w_l1".into(),
                message: "loss weights must be ≥ 0".into(),
            });
        }
        self.focal.validate()
    }
}

/// One affine map plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// One decoder block: query self-attention, cross-attention to memory, FFN.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_wq: Tensor,
    pub self_wk: Tensor,
    pub self_wv: Tensor,
    pub self_wo: Tensor,
    pub cross_wq: Tensor,
    pub cross_wk: Tensor,
    pub cross_wv: Tensor,
    pub cross_wo: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// Every trainable tensor in the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub stem: ConvParams,
    pub stages: Vec<ConvParams>,
    pub projections: Vec<LinearParams>,
    pub embedding: Tensor,
    pub sia: SiaParams,
    pub center: CenterNetParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub box_head: LinearParams,
}

/// Backbone stage widths: stem output then the four stage outputs.
pub const STAGE_CHANNELS: [usize; 5] = [16, 16, 32, 64, 64];

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound).collect(),
    )
}

fn he_linear(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, fan_in, fan_out, (6.0 / fan_in as f64).sqrt())
}

/// He bound shrunk by `gain`. Used where a layer feeds an unnormalized
/// residual/additive pathway (level projections, the box head): keeping those
/// outputs small at initialization keeps early logits near zero, which this
/// architecture needs because it has no normalization layers anywhere.
fn he_scaled(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Tensor {
    uniform(rng, fan_in, fan_out, gain * (6.0 / fan_in as f64).sqrt())
}

impl ModelParams {
    /// Deterministic initialization from a seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.channels;

        let conv = |rng: &mut ChaCha8Rng, cin: usize, cout: usize, stride: usize| ConvParams {
            weight: he_linear(rng, 9 * cin, cout),
            bias: Tensor::zeros(vec![1, cout]),
            cin,
            cout,
            kernel: 3,
            stride,
            pad: 1,
        };

        let stem = conv(&mut rng, 3, STAGE_CHANNELS[0], config.stem_stride);
        let stages: Vec<ConvParams> = (0..4)
            .map(|s| conv(&mut rng, STAGE_CHANNELS[s], STAGE_CHANNELS[s + 1], 2))
            .collect();
        let projections: Vec<LinearParams> = (0..4)
            .map(|s| LinearParams {
                weight: he_linear(&mut rng, STAGE_CHANNELS[s + 1], c),
                bias: Tensor::zeros(vec![1, c]),
            })
            .collect();

        let embedding = uniform(&mut rng, 1, c, (3.0 / c as f64).sqrt());

        let sia = SiaParams {
            router_w1: he_linear(&mut rng, c, 2 * c),
            router_b1: Tensor::zeros(vec![1, 2 * c]),
            router_w2: he_linear(&mut rng, 2 * c, 1),
            router_b2: Tensor::zeros(vec![1, 1]),
            wq: he_linear(&mut rng, c, c),
            wk: he_linear(&mut rng, c, c),
            wv: he_linear(&mut rng, c, c),
            wo: he_linear(&mut rng, c, c),
        };
        let center = CenterNetParams {
            w1: he_linear(&mut rng, c, c),
            b1: Tensor::zeros(vec![1, c]),
            w2: he_linear(&mut rng, c, 1),
            b2: Tensor::zeros(vec![1, 1]),
        };
        let decoder: Vec<DecoderLayerParams> = (0..config.decoder_layers)
            .map(|_| DecoderLayerParams {
                self_wq: he_linear(&mut rng, c, c),
                self_wk: he_linear(&mut rng, c, c),
                self_wv: he_linear(&mut rng, c, c),
                self_wo: he_scaled(&mut rng, c, c, 0.5),
                cross_wq: he_linear(&mut rng, c, c),
                cross_wk: he_linear(&mut rng, c, c),
                cross_wv: he_linear(&mut rng, c, c),
                cross_wo: he_scaled(&mut rng, c, c, 0.5),
                ffn_w1: he_linear(&mut rng, c, 2 * c),
                ffn_b1: Tensor::zeros(vec![1, 2 * c]),
                ffn_w2: he_scaled(&mut rng, 2 * c, c, 0.5),
                ffn_b2: Tensor::zeros(vec![1, c]),
            })
            .collect();
        let box_head = LinearParams {
            weight: he_scaled(&mut rng, c, 4, 0.1),
            bias: Tensor::zeros(vec![1, 4]),
        };

        Ok(ModelParams {
            config,
            stem,
            stages,
            projections,
            embedding,
            sia,
            center,
            decoder,
            box_head,
        })
    }

    /// Every tensor with its stable name, sorted by name. This order defines
    /// the checkpoint layout and the optimizer's update sequence.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("backbone.stem.w".into(), &self.stem.weight));
        out.push(("backbone.stem.b".into(), &self.stem.bias));
        for (s, st) in self.stages.iter().enumerate() {
            out.push((format!("backbone.stage{}.w", s + 1), &st.weight));
            out.push((format!("backbone.stage{}.b", s + 1), &st.bias));
        }
        for (s, pr) in self.projections.iter().enumerate() {
            out.push((format!("proj.l{}.w", s + 1), &pr.weight));
            out.push((format!("proj.l{}.b", s + 1), &pr.bias));
        }
        out.push(("embedding".into(), &self.embedding));
        out.push(("sia.router.w1".into(), &self.sia.router_w1));
        out.push(("sia.router.b1".into(), &self.sia.router_b1));
        out.push(("sia.router.w2".into(), &self.sia.router_w2));
        out.push(("sia.router.b2".into(), &self.sia.router_b2));
        out.push(("sia.attn.wq".into(), &self.sia.wq));
        out.push(("sia.attn.wk".into(), &self.sia.wk));
        out.push(("sia.attn.wv".into(), &self.sia.wv));
        out.push(("sia.attn.wo".into(), &self.sia.wo));
        out.push(("center.w1".into(), &self.center.w1));
        out.push(("center.b1".into(), &self.center.b1));
        out.push(("center.w2".into(), &self.center.w2));
        out.push(("center.b2".into(), &self.center.b2));
        for (d, layer) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.{d}.self.wq"), &layer.self_wq));
            out.push((format!("decoder.{d}.self.wk"), &layer.self_wk));
            out.push((format!("decoder.{d}.self.wv"), &layer.self_wv));
            out.push((format!("decoder.{d}.self.wo"), &layer.self_wo));
            out.push((format!("decoder.{d}.cross.wq"), &layer.cross_wq));
            out.push((format!("decoder.{d}.cross.wk"), &layer.cross_wk));
            out.push((format!("decoder.{d}.cross.wv"), &layer.cross_wv));
            out.push((format!("decoder.{d}.cross.wo"), &layer.cross_wo));
            out.push((format!("decoder.{d}.ffn.w1"), &layer.ffn_w1));
            out.push((format!("decoder.{d}.ffn.b1"), &layer.ffn_b1));
            out.push((format!("decoder.{d}.ffn.w2"), &layer.ffn_w2));
            out.push((format!("decoder.{d}.ffn.b2"), &layer.ffn_b2));
        }
        out.push(("box_head.w".into(), &self.box_head.weight));
        out.push(("box_head.b".into(), &self.box_head.bias));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Mutable view in the same order as `named_tensors`.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("backbone.stem.w".into(), &mut self.stem.weight));
        out.push(("backbone.stem.b".into(), &mut self.stem.bias));
        for (s, st) in self.stages.iter_mut().enumerate() {
            out.push((format!("backbone.stage{}.w", s + 1), &mut st.weight));
            out.push((format!("backbone.stage{}.b", s + 1), &mut st.bias));
        }
        for (s, pr) in self.projections.iter_mut().enumerate() {
            out.push((format!("proj.l{}.w", s + 1), &mut pr.weight));
            out.push((format!("proj.l{}.b", s + 1), &mut pr.bias));
        }
        out.push(("embedding".into(), &mut self.embedding));
        out.push(("sia.router.w1".into(), &mut self.sia.router_w1));
        out.push(("sia.router.b1".into(), &mut self.sia.router_b1));
        out.push(("sia.router.w2".into(), &mut self.sia.router_w2));
        out.push(("sia.router.b2".into(), &mut self.sia.router_b2));
        out.push(("sia.attn.wq".into(), &mut self.sia.wq));
        out.push(("sia.attn.wk".into(), &mut self.sia.wk));
        out.push(("sia.attn.wv".into(), &mut self.sia.wv));
        out.push(("sia.attn.wo".into(), &mut self.sia.wo));
        out.push(("center.w1".into(), &mut self.center.w1));
        out.push(("center.b1".into(), &mut self.center.b1));
        out.push(("center.w2".into(), &mut self.center.w2));
        out.push(("center.b2".into(), &mut self.center.b2));
        for (d, layer) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.{d}.self.wq"), &mut layer.self_wq));
            out.push((format!("decoder.{d}.self.wk"), &mut layer.self_wk));
            out.push((format!("decoder.{d}.self.wv"), &mut layer.self_wv));
            out.push((format!("decoder.{d}.self.wo"), &mut layer.self_wo));
            out.push((format!("decoder.{d}.cross.wq"), &mut layer.cross_wq));
            out.push((format!("decoder.{d}.cross.wk"), &mut layer.cross_wk));
            out.push((format!("decoder.{d}.cross.wv"), &mut layer.cross_wv));
            out.push((format!("decoder.{d}.cross.wo"), &mut layer.cross_wo));
            out.push((format!("decoder.{d}.ffn.w1"), &mut layer.ffn_w1));
            out.push((format!("decoder.{d}.ffn.b1"), &mut layer.ffn_b1));
            out.push((format!("decoder.{d}.ffn.w2"), &mut layer.ffn_w2));
            out.push((format!("decoder.{d}.ffn.b2"), &mut layer.ffn_b2));
        }
        out.push(("box_head.w".into(), &mut self.box_head.weight));
        out.push(("box_head.b".into(), &mut self.box_head.bias));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    /// Register every tensor on a tape, returning names aligned with
    /// `named_tensors` plus a typed view for graph construction.
    pub fn leaf(&self, tape: &mut Tape) -> ParamIds {
        let named = self.named_tensors();
        let mut ids = Vec::with_capacity(named.len());
        for (name, tensor) in &named {
            ids.push((name.clone(), tape.leaf_tensor(tensor)));
        }
        ParamIds { names: ids }
    }
}

/// On-tape parameter registry; lookup by the stable tensor names.
#[derive(Debug, Clone)]
pub struct ParamIds {
    /// (name, buffer), sorted by name.
    pub names: Vec<(String, BufId)>,
}

impl ParamIds {
    pub fn get(&self, name: &str) -> BufId {
        match self.names.binary_search_by(|(n, _)| n.as_str().cmp(name)) {
            Ok(i) => self.names[i].1,
            Err(_) => panic!("unknown parameter {name}"),
        }
    }
}

/// 2-D sinusoidal position encoding for an (h, w) grid at `stride` on a
/// `canvas`-pixel side: first half of the channels encodes x, second half y.
pub fn sinusoidal_pe(h: usize, w: usize, stride: usize, canvas: usize, c: usize) -> Tensor {
    assert_eq!(c % 4, 0, "position encoding needs channels divisible by 4");
    let half = c / 2;
    let pairs = half / 2;
    let tau = std::f64::consts::TAU;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let px = ((x as f64 + 0.5) * stride as f64) / canvas as f64 * tau;
            let py = ((y as f64 + 0.5) * stride as f64) / canvas as f64 * tau;
            let row = (y * w + x) * c;
            for i in 0..pairs {
                let freq = 10_000f64.powf(2.0 * i as f64 / half as f64);
                data[row + 2 * i] = (px / freq).sin();
                data[row + 2 * i + 1] = (px / freq).cos();
                data[row + half + 2 * i] = (py / freq).sin();
                data[row + half + 2 * i + 1] = (py / freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, c], data)
}

pub(crate) fn inverse_sigmoid(x: f64) -> f64 {
    let x = x.clamp(1e-6, 1.0 - 1e-6);
    (x / (1.0 - x)).ln()
}

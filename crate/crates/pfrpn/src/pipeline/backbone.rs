//! Tiny convolutional feature pyramid: a stem conv followed by four
//! stride-2 stages, each stage output projected 1×1 to a common width.

use super::{ModelConfig, ParamIds, STAGE_CHANNELS};
use crate::numerics::{BufId, Im2ColMeta, Tape, Tensor};
use crate::sia::LevelFeatures;
use crate::synthdata::Scene;
use crate::{Error, Result};

/// A 3×3 convolution's weights plus its geometry. The weight matrix is laid
/// out `[kernel²·cin, cout]` with patch rows ordered (ky, kx, channel) to
/// match the im2col lowering.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvParams {
    pub fn out_dim(&self, dim: usize) -> usize {
        (dim + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// On-tape handles for one convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvIds {
    pub weight: BufId,
    pub bias: BufId,
}

fn conv_ids(ids: &ParamIds, prefix: &str) -> ConvIds {
    ConvIds { weight: ids.get(&format!("{prefix}.w")), bias: ids.get(&format!("{prefix}.b")) }
}

/// Run one conv + ReLU over a `[h·w, cin]` grid, returning the output grid
/// and its spatial size.
fn conv_relu(
    tape: &mut Tape,
    input: BufId,
    h: usize,
    w: usize,
    conv: &ConvParams,
    ids: ConvIds,
) -> (BufId, usize, usize) {
    let out_h = conv.out_dim(h);
    let out_w = conv.out_dim(w);
    let meta = Im2ColMeta {
        height: h,
        width: w,
        channels: conv.cin,
        kernel: conv.kernel,
        stride: conv.stride,
        pad: conv.pad,
        out_h,
        out_w,
    };
    let patches = tape.im2col(input, meta);
    let pre = tape.matmul(patches, ids.weight);
    let pre = tape.add_row(pre, ids.bias);
    (tape.relu(pre), out_h, out_w)
}

/// On-tape level description produced by the backbone.
pub struct TapeLevelFeatures {
    pub level: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub grid: BufId,
}

/// Check the canvas against the total downsampling factor.
pub fn check_canvas(canvas: usize, config: &ModelConfig) -> Result<()> {
    let divisor = config.canvas_divisor();
    if canvas == 0 || canvas % divisor != 0 {
        return Err(Error::InvalidArgument(format!(
            "canvas {canvas} not divisible by {divisor}"
        )));
    }
    Ok(())
}

/// Build the feature pyramid on the tape: stem, four stages, then the 1×1
/// projections to the common width. Returns levels 1..=4 shallow-to-deep.
pub fn backbone_tape(
    tape: &mut Tape,
    scene: &Scene,
    params: &super::ModelParams,
    ids: &ParamIds,
) -> Result<Vec<TapeLevelFeatures>> {
    let canvas = scene.canvas;
    check_canvas(canvas, &params.config)?;

    let image = tape.leaf(canvas * canvas, 3, scene.normalized_pixels());

    let (mut cur, mut h, mut w) =
        conv_relu(tape, image, canvas, canvas, &params.stem, conv_ids(ids, "backbone.stem"));

    let mut levels = Vec::with_capacity(4);
    for s in 0..4 {
        let stage_ids = conv_ids(ids, &format!("backbone.stage{}", s + 1));
        let (out, oh, ow) = conv_relu(tape, cur, h, w, &params.stages[s], stage_ids);
        cur = out;
        h = oh;
        w = ow;

        let pw = ids.get(&format!("proj.l{}.w", s + 1));
        let pb = ids.get(&format!("proj.l{}.b", s + 1));
        let proj = tape.matmul(cur, pw);
        let proj = tape.add_row(proj, pb);
        levels.push(TapeLevelFeatures {
            level: s + 1,
            h,
            w,
            stride: params.config.level_stride(s + 1),
            grid: proj,
        });
    }
    debug_assert_eq!(STAGE_CHANNELS[4], params.stages[3].cout);
    Ok(levels)
}

/// Value-level backbone pass (no gradients), for inspection and tests.
pub fn backbone_forward(scene: &Scene, params: &super::ModelParams) -> Result<Vec<LevelFeatures>> {
    let mut tape = Tape::new();
    let ids = params.leaf(&mut tape);
    let levels = backbone_tape(&mut tape, scene, params, &ids)?;
    Ok(levels
        .into_iter()
        .map(|lv| {
            let (rows, cols) = tape.dims(lv.grid);
            let grid = Tensor::new(vec![rows, cols], tape.value(lv.grid).to_vec());
            LevelFeatures::new(lv.level, lv.h, lv.w, lv.stride, grid)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{ModelConfig, ModelParams};
    use super::*;
    use crate::synthdata::{generate_scene, SceneConfig};

    fn scene(canvas: usize, seed: u64) -> Scene {
        generate_scene(&SceneConfig { canvas, seed, ..SceneConfig::default() }, 0).unwrap()
    }

    #[test]
    fn default_config_gives_strides_4_to_32_on_128() {
        let params = ModelParams::init(ModelConfig::default(), 0).unwrap();
        let levels = backbone_forward(&scene(128, 1), &params).unwrap();
        let dims: Vec<(usize, usize, usize, usize)> =
            levels.iter().map(|l| (l.level, l.h, l.w, l.stride)).collect();
        assert_eq!(dims, vec![(1, 32, 32, 4), (2, 16, 16, 8), (3, 8, 8, 16), (4, 4, 4, 32)]);
        for l in &levels {
            assert_eq!(l.grid.shape, vec![l.h * l.w, 64]);
        }
    }

    #[test]
    fn stem_stride_one_gives_a_16_canvas_pyramid() {
        let config = ModelConfig { channels: 8, decoder_layers: 1, stem_stride: 1 };
        let params = ModelParams::init(config, 0).unwrap();
        let levels = backbone_forward(&scene(16, 2), &params).unwrap();
        let dims: Vec<(usize, usize)> = levels.iter().map(|l| (l.h, l.stride)).collect();
        assert_eq!(dims, vec![(8, 2), (4, 4), (2, 8), (1, 16)]);
    }

    #[test]
    fn indivisible_canvas_is_rejected_with_the_divisor_named() {
        let params = ModelParams::init(ModelConfig::default(), 0).unwrap();
        let err = backbone_forward(&scene(96 + 4, 3), &params).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("canvas 100 not divisible by 32"), "got: {msg}");
    }

    #[test]
    fn zero_image_produces_finite_features() {
        let params = ModelParams::init(ModelConfig::default(), 5).unwrap();
        let mut sc = scene(64, 4);
        sc.pixels.iter_mut().for_each(|p| *p = 0);
        let levels = backbone_forward(&sc, &params).unwrap();
        for l in &levels {
            assert!(l.grid.data.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn backbone_is_deterministic() {
        let params = ModelParams::init(ModelConfig::default(), 6).unwrap();
        let sc = scene(64, 9);
        let a = backbone_forward(&sc, &params).unwrap();
        let b = backbone_forward(&sc, &params).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.grid, y.grid);
        }
    }

    #[test]
    fn features_respond_to_image_content() {
        let params = ModelParams::init(ModelConfig::default(), 7).unwrap();
        let a = backbone_forward(&scene(64, 10), &params).unwrap();
        let b = backbone_forward(&scene(64, 11), &params).unwrap();
        assert_ne!(a[0].grid, b[0].grid);
    }
}

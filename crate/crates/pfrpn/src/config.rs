//! Run configuration: one JSON file with `scene` / `model` / `train` / `csp`
//! / `paths` sections, plus dotted-key command-line overrides. Unknown keys
//! are rejected, and validation errors name the offending field.

use crate::csp::CspConfig;
use crate::matching::{FocalParams, MatchWeights};
use crate::pipeline::{ModelConfig, NetConfig, TrainConfig};
use crate::synthdata::SceneConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// File locations used by the subcommands.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Training dataset directory.
    pub data_dir: Option<PathBuf>,
    /// Held-out evaluation dataset directory.
    pub eval_dir: Option<PathBuf>,
    /// Checkpoint to load (eval/propose/heatmap) or the final one written by
    /// training.
    pub checkpoint: Option<PathBuf>,
    /// Directory for reports, checkpoints, and figure exports.
    pub out_dir: Option<PathBuf>,
}

/// The `train` section: optimization plus the forward-pass knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Global-norm gradient clip applied per batch.
    pub clip_norm: f64,
    /// Number of pyramid levels the adapter fuses.
    pub k: usize,
    /// Centerness weight λ.
    pub lambda: f64,
    pub n_queries: usize,
    pub w_l1: f64,
    pub w_giou: f64,
    pub focal: FocalParams,
    pub match_weights: MatchWeights,
    pub use_sia: bool,
    pub use_csp: bool,
    pub use_cgqs: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let n = NetConfig::default();
        TrainSection {
            seed: t.seed,
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            clip_norm: t.clip_norm,
            k: n.k,
            lambda: t.lambda,
            n_queries: n.n_queries,
            w_l1: t.w_l1,
            w_giou: t.w_giou,
            focal: t.focal,
            match_weights: t.match_weights,
            use_sia: n.use_sia,
            use_csp: n.use_csp,
            use_cgqs: n.use_cgqs,
        }
    }
}

/// Everything a run needs, straight from one JSON document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub csp: CspConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    /// Optimization view of the `train` section.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            momentum: self.train.momentum,
            clip_norm: self.train.clip_norm,
            lambda: self.train.lambda,
            w_l1: self.train.w_l1,
            w_giou: self.train.w_giou,
            focal: self.train.focal.clone(),
            match_weights: self.train.match_weights.clone(),
        }
    }

    /// Forward-pass view of the `train` + `csp` sections.
    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            k: self.train.k,
            n_queries: self.train.n_queries,
            csp: self.csp.clone(),
            use_sia: self.train.use_sia,
            use_csp: self.train.use_csp,
            use_cgqs: self.train.use_cgqs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train_config().validate()?;
        self.net_config().validate()?;
        self.csp.validate()
    }
}

/// Insert `value` at a dotted path inside a JSON object tree, creating
/// intermediate objects as needed.
fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config {
            field: path.to_string(),
            message: "override key must be a dotted path of non-empty segments".into(),
        });
    }
    let mut cursor = root;
    for key in &keys[..keys.len() - 1] {
        if !cursor.is_object() {
            return Err(Error::Config {
                field: path.to_string(),
                message: format!("'{key}' is not an object"),
            });
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    match cursor.as_object_mut() {
        Some(map) => {
            map.insert(keys[keys.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::Config {
            field: path.to_string(),
            message: "path runs through a non-object value".into(),
        }),
    }
}

/// Parse one `--set key=value` override. The value is read as JSON when it
/// parses as JSON, otherwise taken as a bare string.
pub fn parse_override(spec: &str) -> Result<(String, serde_json::Value)> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(Error::Config {
            field: "--set".into(),
            message: format!("expected key=value, got '{spec}'"),
        });
    };
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Load a config: start from the optional JSON file, apply `--set`
/// overrides in order, then deserialize strictly and validate.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut tree: serde_json::Value = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config {
                field: "--config".into(),
                message: format!("cannot read {}: {e}", p.display()),
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config {
                field: "--config".into(),
                message: format!("invalid JSON in {}: {e}", p.display()),
            })?
        }
        None => serde_json::Value::Object(serde_json::Map::new()),
    };
    if !tree.is_object() {
        return Err(Error::Config {
            field: "--config".into(),
            message: "top level must be a JSON object".into(),
        });
    }
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        set_path(&mut tree, &key, value)?;
    }
    let config: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config {
        field: "config".into(),
        message: e.to_string(),
    })?;
    config.validate()?;
    Ok(config)
}

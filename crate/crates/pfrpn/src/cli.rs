//! Command-line surface: dataset generation, training, evaluation, single-
//! scene proposals, ablation sweeps, and figure exports.
//!
//! Exit codes: 0 success, 2 configuration error (the message names the
//! offending field), 3 runtime error.

use crate::config::{load_config, RunConfig};
use crate::pipeline::{
    evaluate, forward, load_checkpoint, train, ArReport, Proposal, TrainOptions,
};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, Scene};
use crate::viz;
use crate::{Error, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "pfrpn",
    about = "Prompt-free region proposals on synthetic scenes",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file; omitted means all defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-key override applied on top of the file, e.g.
    /// `--set train.epochs=3`. May be repeated; later wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_config(self.config.as_deref(), &self.set)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    K,
    Lambda,
    Iterations,
    Modules,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Destination directory (defaults to paths.data_dir).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Number of scenes.
        #[arg(long, default_value_t = 500)]
        count: usize,
    },
    /// Train a model on paths.data_dir, writing checkpoints and a loss log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on paths.eval_dir and write the recall report.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the model on one scene and write its ranked proposals as JSON.
    Propose {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scene id within the dataset.
        #[arg(long)]
        scene: usize,
    },
    /// Sweep one axis, retraining per value, and write a comparison table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Export similarity heatmaps, cascade masks, and query overlays for one
    /// scene.
    Heatmap {
        #[command(flatten)]
        config: ConfigArgs,
        /// Scene id within the dataset.
        #[arg(long)]
        scene: usize,
    },
}

/// Parse `argv` and execute. Never panics on user input; returns the exit
/// code for `main` to pass on.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here; clap knows the right stream/code.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData { config, out, count } => {
            config.load().and_then(|c| cmd_gen_data(&c, out.as_deref(), count))
        }
        Command::Train { config } => config.load().and_then(|c| cmd_train(&c)),
        Command::Eval { config } => config.load().and_then(|c| cmd_eval(&c)),
        Command::Propose { config, scene } => config.load().and_then(|c| cmd_propose(&c, scene)),
        Command::Ablate { config, axis } => config.load().and_then(|c| cmd_ablate(&c, axis)),
        Command::Heatmap { config, scene } => config.load().and_then(|c| cmd_heatmap(&c, scene)),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn out_dir(config: &RunConfig) -> PathBuf {
    config.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn require_dir(path: &Option<PathBuf>, field: &str) -> Result<PathBuf> {
    path.clone().ok_or_else(|| Error::Config {
        field: field.into(),
        message: "required by this subcommand; set it in the config or via --set".into(),
    })
}

fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    let scenes = read_dataset(dir)?;
    if scenes.is_empty() {
        return Err(Error::Dataset {
            scene: None,
            message: format!("no scenes found in {}", dir.display()),
        });
    }
    Ok(scenes)
}

fn checkpoint_path(config: &RunConfig) -> PathBuf {
    config
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| out_dir(config).join("model.ckpt"))
}

fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidArgument(format!("serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen_data(config: &RunConfig, out: Option<&Path>, count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::Config {
            field: "--count".into(),
            message: "must be ≥ 1".into(),
        });
    }
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => require_dir(&config.paths.data_dir, "paths.data_dir")?,
    };
    let scenes = generate_dataset(&config.scene, count)?;
    write_dataset(&scenes, &dir)?;
    println!(
        "wrote {count} scenes (canvas {}) to {}",
        config.scene.canvas,
        dir.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let data_dir = require_dir(&config.paths.data_dir, "paths.data_dir")?;
    let scenes = load_scenes(&data_dir)?;
    let out = out_dir(config);
    let opts = TrainOptions {
        model: config.model,
        net: config.net_config(),
        train: config.train_config(),
        checkpoint_dir: Some(&out),
    };
    let (_, logs) = train(&scenes, &opts)?;
    write_json_file(&out.join("loss_log.json"), &logs)?;
    for log in &logs {
        let m = &log.mean;
        println!(
            "epoch {}: total {:.6} (reg {:.6} cls {:.6} rt {:.6} ctr {:.6})",
            log.epoch, m.total, m.reg, m.cls, m.rt, m.ctr
        );
    }
    println!("checkpoint: {}", out.join("model.ckpt").display());
    Ok(())
}

fn format_bucket(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.4}"),
        None => "n/a".into(),
    }
}

fn print_report(report: &ArReport) {
    for row in &report.budgets {
        println!(
            "AR@{:<3} {}  (small {}, medium {}, large {})",
            row.budget,
            format_bucket(row.scores.ar),
            format_bucket(row.scores.small),
            format_bucket(row.scores.medium),
            format_bucket(row.scores.large),
        );
    }
}

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let eval_dir = require_dir(&config.paths.eval_dir, "paths.eval_dir")?;
    let scenes = load_scenes(&eval_dir)?;
    let params = load_checkpoint(&checkpoint_path(config))?;
    let report = evaluate(&scenes, &params, &config.net_config(), &[1, 10, 32])?;
    write_json_file(&out_dir(config).join("metrics.json"), &report)?;
    print_report(&report);
    Ok(())
}

/// Schema of the `propose` output document.
#[derive(Debug, Serialize, Deserialize)]
pub struct ProposalDoc {
    pub scene: usize,
    pub proposals: Vec<Proposal>,
}

fn find_scene(config: &RunConfig, id: usize) -> Result<Scene> {
    let dir = match (&config.paths.eval_dir, &config.paths.data_dir) {
        (Some(d), _) => d.clone(),
        (None, Some(d)) => d.clone(),
        (None, None) => {
            return Err(Error::Config {
                field: "paths.eval_dir".into(),
                message: "need a dataset (paths.eval_dir or paths.data_dir)".into(),
            })
        }
    };
    let scenes = load_scenes(&dir)?;
    scenes.into_iter().find(|s| s.id == id).ok_or_else(|| Error::Dataset {
        scene: Some(id),
        message: format!("not present in {}", dir.display()),
    })
}

fn cmd_propose(config: &RunConfig, scene_id: usize) -> Result<()> {
    let scene = find_scene(config, scene_id)?;
    let params = load_checkpoint(&checkpoint_path(config))?;
    let (proposals, _) = forward(&scene, &params, &config.net_config())?;
    let doc = ProposalDoc { scene: scene_id, proposals };
    let path = out_dir(config).join(format!("proposals-{scene_id}.json"));
    write_json_file(&path, &doc)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&doc)
            .map_err(|e| Error::InvalidArgument(format!("serialization: {e}")))?
    );
    Ok(())
}

fn cmd_heatmap(config: &RunConfig, scene_id: usize) -> Result<()> {
    let scene = find_scene(config, scene_id)?;
    let params = load_checkpoint(&checkpoint_path(config))?;
    let (_, diag) = forward(&scene, &params, &config.net_config())?;
    let dir = out_dir(config).join(format!("heatmaps-{scene_id}"));
    let written = viz::export_scene(&dir, &scene, &diag)?;
    println!("wrote {} files to {}", written.len(), dir.display());
    Ok(())
}

/// One sweep entry: the swept value, the fully resolved configuration it ran
/// with, and the resulting recall report.
#[derive(Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: serde_json::Value,
    pub config: RunConfig,
    pub report: ArReport,
}

fn axis_variants(axis: Axis, base: &RunConfig) -> Vec<(serde_json::Value, RunConfig)> {
    match axis {
        Axis::K => (1..=4)
            .map(|k| {
                let mut c = base.clone();
                c.train.k = k;
                (serde_json::json!(k), c)
            })
            .collect(),
        Axis::Lambda => [1.0, 3.0, 5.0, 7.0, 9.0]
            .iter()
            .map(|&l| {
                let mut c = base.clone();
                c.train.lambda = l;
                (serde_json::json!(l), c)
            })
            .collect(),
        Axis::Iterations => (0..=3)
            .map(|it| {
                let mut c = base.clone();
                c.csp.iterations = it;
                (serde_json::json!(it), c)
            })
            .collect(),
        Axis::Modules => ["full", "no_sia", "no_csp", "no_cgqs"]
            .iter()
            .map(|&m| {
                let mut c = base.clone();
                match m {
                    "no_sia" => c.train.use_sia = false,
                    "no_csp" => c.train.use_csp = false,
                    "no_cgqs" => c.train.use_cgqs = false,
                    _ => {}
                }
                (serde_json::json!(m), c)
            })
            .collect(),
    }
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::K => "k",
        Axis::Lambda => "lambda",
        Axis::Iterations => "iterations",
        Axis::Modules => "modules",
    }
}

fn cmd_ablate(config: &RunConfig, axis: Axis) -> Result<()> {
    let data_dir = require_dir(&config.paths.data_dir, "paths.data_dir")?;
    let eval_dir = require_dir(&config.paths.eval_dir, "paths.eval_dir")?;
    let train_scenes = load_scenes(&data_dir)?;
    let eval_scenes = load_scenes(&eval_dir)?;

    let name = axis_name(axis);
    let mut rows = Vec::new();
    for (value, variant) in axis_variants(axis, config) {
        variant.validate()?;
        let opts = TrainOptions {
            model: variant.model,
            net: variant.net_config(),
            train: variant.train_config(),
            checkpoint_dir: None,
        };
        let (params, _) = train(&train_scenes, &opts)?;
        let report = evaluate(&eval_scenes, &params, &variant.net_config(), &[1, 10, 32])?;
        println!(
            "{name}={value}  AR@1 {}  AR@10 {}  AR@32 {}",
            format_bucket(report.ar_at(1)),
            format_bucket(report.ar_at(10)),
            format_bucket(report.ar_at(32)),
        );
        rows.push(AblationRow { axis: name.into(), value, config: variant, report });
    }
    let path = out_dir(config).join(format!("ablate-{name}.json"));
    write_json_file(&path, &rows)?;
    println!("table: {}", path.display());
    Ok(())
}

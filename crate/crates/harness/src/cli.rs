//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use sdtr_core::labels::Task;
use sdtr_model::ModelState;

use crate::ablate::ablate;
use crate::config::{EvalConfig, RunConfig};
use crate::data::{generate_splits, read_split, write_splits, VAL_DIR};
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{bev_names, evaluate, ModelPredictor, Predictor, TestPerturbation};
use crate::plot::{plot_reports, read_reports, sample_overlay};
use crate::train::{train, write_json, write_outputs};

#[derive(Debug, Parser)]
#[command(
    name = "sdtr",
    version,
    about = "Synthetic multi-camera 3D perception: data, training, evaluation, ablation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the desk-scale default config for a task.
    InitConfig {
        #[arg(long, value_parser = parse_task, default_value = "detection")]
        task: Task,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render and label the train and validation splits.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, history, config and final report.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint, optionally under a test-time perturbation.
    Evaluate(EvaluateArgs),
    /// Run the ablation lattice, loss-weight sweeps and robustness sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render figures from a directory of report JSON files.
    Plot {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A split directory, or a dataset directory whose `val/` split is used.
    #[arg(long)]
    pub data: PathBuf,
    /// Rotation noise in radians.
    #[arg(long, requires = "noise_trans", conflicts_with = "drop_cams")]
    pub noise_rot: Option<f64>,
    /// Translation noise in meters.
    #[arg(long, requires = "noise_rot", conflicts_with = "drop_cams")]
    pub noise_trans: Option<f64>,
    /// Comma-separated camera indices to zero.
    #[arg(long, value_delimiter = ',')]
    pub drop_cams: Option<Vec<usize>>,
    /// Report path; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for BEV overlays of the first few samples.
    #[arg(long)]
    pub overlays: Option<PathBuf>,
}

fn parse_task(s: &str) -> std::result::Result<Task, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown task {s:?}; expected detection, bev or joint"))
}

/// Samples rendered by `evaluate --overlays`.
const OVERLAY_SAMPLES: usize = 4;

impl EvaluateArgs {
    pub fn perturbation(&self) -> TestPerturbation {
        match (&self.drop_cams, self.noise_rot, self.noise_trans) {
            (Some(v), _, _) => TestPerturbation::DropCameras(v.clone()),
            (None, Some(sigma_rot), Some(sigma_trans)) => TestPerturbation::ExtrinsicNoise { sigma_rot, sigma_trans },
            _ => TestPerturbation::None,
        }
    }
}

/// Evaluation settings stored with the checkpoint, defaults otherwise.
fn eval_config(meta: &sdtr_model::CheckpointMeta) -> EvalConfig {
    meta.extra
        .get("run_config")
        .and_then(|v| serde_json::from_value::<RunConfig>(v.clone()).ok())
        .map(|c| c.eval)
        .unwrap_or_default()
}

fn split_dir(data: &Path) -> PathBuf {
    let val = data.join(VAL_DIR);
    if val.is_dir() {
        val
    } else {
        data.to_path_buf()
    }
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<serde_json::Value> {
    let (state, meta) = ModelState::load(&args.ckpt)?;
    let split = read_split(&split_dir(&args.data))?;
    if split.meta.labels.task != state.config.task {
        return Err(HarnessError::Config(format!(
            "checkpoint is a {:?} model but the data is labeled for {:?}",
            state.config.task, split.meta.labels.task
        )));
    }
    let cfg = eval_config(&meta);
    let p = args.perturbation();
    let mut predictor = ModelPredictor {
        state: &state,
        max_detections: cfg.max_detections,
    };
    let report = evaluate(&mut predictor, &split.samples, &split.meta, &p, &cfg)?;
    if let Some(dir) = &args.overlays {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let names = if split.meta.labels.task.has_bev() {
            bev_names(&split.meta.scene)
        } else {
            vec![]
        };
        let labels = &split.meta.labels;
        let range = labels.bev_size as f64 * labels.bev_cell / 2.0;
        for s in split.samples.iter().take(OVERLAY_SAMPLES) {
            let mut s = s.clone();
            crate::eval::perturb_sample(&mut s, &p, &split.meta.scene, cfg.noise_seed)?;
            let pred = predictor.predict(&s)?;
            sample_overlay(&s, &pred, &names, range, 0.3, 4).write_png(&dir.join(format!("overlay_{}.png", s.seed)))?;
        }
    }
    Ok(report.to_json())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { task, out } => RunConfig::desk(task).save(&out),
        Command::GenerateData { config, out } => {
            let cfg = RunConfig::load(&config)?;
            write_splits(&out, &generate_splits(&cfg)?)
        }
        Command::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg, &mut |r| {
                let score = r
                    .val
                    .get("nds")
                    .or_else(|| r.val.get("iou.drivable"))
                    .copied()
                    .unwrap_or(f64::NAN);
                eprintln!(
                    "epoch {:3}  step {:6}  lr {:.2e}  loss {:.4}  val {:.4}",
                    r.epoch, r.step, r.lr, r.train_loss, score
                );
            })?;
            write_outputs(&out, &cfg, &outcome)
        }
        Command::Evaluate(args) => {
            let report = run_evaluate(&args)?;
            match &args.out {
                Some(path) => write_json(path, &report),
                None => {
                    println!("{}", serde_json::to_string_pretty(&report).expect("json serializes"));
                    Ok(())
                }
            }
        }
        Command::Ablate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let table = ablate(&cfg, &out)?;
            for s in &table.summary {
                let score = s
                    .mean
                    .get("nds")
                    .or_else(|| s.mean.get("iou.drivable"))
                    .copied()
                    .unwrap_or(f64::NAN);
                eprintln!(
                    "{:12} {:24} {:.4} ({} ok, {} failed)",
                    s.group.as_str(),
                    s.name,
                    score,
                    s.completed,
                    s.failed
                );
            }
            Ok(())
        }
        Command::Plot { reports, out } => {
            let files = plot_reports(&read_reports(&reports)?, &out)?;
            for f in files {
                eprintln!("wrote {}", f.display());
            }
            Ok(())
        }
    }
}

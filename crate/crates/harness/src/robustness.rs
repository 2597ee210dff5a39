//! Test-time robustness sweeps: extrinsic noise levels and random camera
//! drops, evaluated on one or more trained models.

use std::fs;
use std::path::Path;

use sdtr_core::metrics::EvalReport;
use sdtr_model::ModelState;
use serde::{Deserialize, Serialize};

use crate::ablate::mean_std;
use crate::config::RunConfig;
use crate::data::Split;
use crate::error::{io_err, HarnessError, Result};
use crate::eval::{evaluate, ModelPredictor, TestPerturbation};
use crate::train::write_json;

pub const ROBUSTNESS_JSON: &str = "robustness.json";
pub const ROBUSTNESS_CSV: &str = "robustness.csv";
pub const REPORTS_DIR: &str = "reports";

/// Noise sweep in configured order, one perturbation per paired level.
pub fn noise_perturbations(cfg: &RunConfig) -> Vec<TestPerturbation> {
    let r = &cfg.robustness;
    r.sigma_rot
        .iter()
        .zip(&r.sigma_trans)
        .map(|(&sigma_rot, &sigma_trans)| TestPerturbation::ExtrinsicNoise { sigma_rot, sigma_trans })
        .collect()
}

pub fn drop_perturbations(cfg: &RunConfig) -> Vec<TestPerturbation> {
    cfg.robustness
        .drop_counts
        .iter()
        .map(|&count| TestPerturbation::DropRandom { count })
        .collect()
}

/// One perturbation evaluated on every model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub label: String,
    pub sigma_rot: f64,
    pub sigma_trans: f64,
    pub dropped: usize,
    /// Headline score per model: NDS for detection, mean BEV IoU otherwise.
    pub scores: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub noise: Vec<SweepPoint>,
    pub drops: Vec<SweepPoint>,
}

/// NDS when the report has detection metrics, mean BEV IoU otherwise.
pub fn headline(r: &EvalReport) -> f64 {
    match r.nds() {
        Some(n) => n,
        None if r.bev_iou.is_empty() => f64::NAN,
        None => r.bev_iou.iter().sum::<f64>() / r.bev_iou.len() as f64,
    }
}

pub fn label(p: &TestPerturbation) -> String {
    match p {
        TestPerturbation::None => "none".into(),
        TestPerturbation::ExtrinsicNoise { sigma_rot, sigma_trans } => {
            format!("noise_rot{sigma_rot}_trans{sigma_trans}")
        }
        TestPerturbation::DropCameras(v) => {
            let ids: Vec<String> = v.iter().map(usize::to_string).collect();
            format!("drop_cams{}", ids.join("-"))
        }
        TestPerturbation::DropRandom { count } => format!("drop_random{count}"),
    }
}

fn point(p: &TestPerturbation, reports: &[EvalReport]) -> SweepPoint {
    let scores: Vec<f64> = reports.iter().map(headline).collect();
    let (mean, std) = mean_std(&scores);
    let (sigma_rot, sigma_trans, dropped) = match p {
        TestPerturbation::ExtrinsicNoise { sigma_rot, sigma_trans } => (*sigma_rot, *sigma_trans, 0),
        TestPerturbation::DropCameras(v) => (0.0, 0.0, v.len()),
        TestPerturbation::DropRandom { count } => (0.0, 0.0, *count),
        TestPerturbation::None => (0.0, 0.0, 0),
    };
    SweepPoint {
        label: label(p),
        sigma_rot,
        sigma_trans,
        dropped,
        scores,
        mean,
        std,
    }
}

/// Evaluates every model under every configured perturbation. Returns the
/// table and each report tagged `<label>_model<i>`.
pub fn sweep(
    models: &[&ModelState],
    val: &Split,
    cfg: &RunConfig,
) -> Result<(RobustnessTable, Vec<(String, EvalReport)>)> {
    if models.is_empty() {
        return Err(HarnessError::Config("robustness sweep needs at least one model".into()));
    }
    let mut tagged = Vec::new();
    let mut run = |perturbations: Vec<TestPerturbation>| -> Result<Vec<SweepPoint>> {
        let mut points = Vec::new();
        for p in perturbations {
            let mut reports = Vec::with_capacity(models.len());
            for (i, state) in models.iter().enumerate() {
                let mut predictor = ModelPredictor {
                    state,
                    max_detections: cfg.eval.max_detections,
                };
                let r = evaluate(&mut predictor, &val.samples, &val.meta, &p, &cfg.eval)?;
                tagged.push((format!("{}_model{i}", label(&p)), r.clone()));
                reports.push(r);
            }
            points.push(point(&p, &reports));
        }
        Ok(points)
    };
    let noise = run(noise_perturbations(cfg))?;
    let drops = run(drop_perturbations(cfg))?;
    Ok((RobustnessTable { noise, drops }, tagged))
}

/// True when the mean score never rises by more than one standard
/// deviation (the larger of the two points') from one noise level to the next.
pub fn non_increasing_within_std(points: &[SweepPoint]) -> bool {
    points
        .windows(2)
        .all(|w| w[1].mean <= w[0].mean + w[0].std.max(w[1].std))
}

/// Writes the table as JSON and CSV and every report under `reports/`.
pub fn write_sweep(out: &Path, table: &RobustnessTable, reports: &[(String, EvalReport)]) -> Result<()> {
    let dir = out.join(REPORTS_DIR);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for (name, r) in reports {
        write_json(&dir.join(format!("{name}.json")), &r.to_json())?;
    }
    write_json(
        &out.join(ROBUSTNESS_JSON),
        &serde_json::to_value(table).expect("table serializes"),
    )?;
    let path = out.join(ROBUSTNESS_CSV);
    let csv_err = |e: csv::Error| HarnessError::Parse {
        what: format!("csv output {}", path.display()),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record([
        "sweep",
        "label",
        "sigma_rot",
        "sigma_trans",
        "dropped",
        "mean",
        "std",
        "models",
    ])
    .map_err(csv_err)?;
    for (sweep, points) in [("noise", &table.noise), ("drop", &table.drops)] {
        for p in points {
            w.write_record([
                sweep.to_string(),
                p.label.clone(),
                p.sigma_rot.to_string(),
                p.sigma_trans.to_string(),
                p.dropped.to_string(),
                p.mean.to_string(),
                p.std.to_string(),
                p.scores.len().to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush().map_err(io_err(&path))
}

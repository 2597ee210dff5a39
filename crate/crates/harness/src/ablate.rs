//! Ablation runner: the module lattice, the segmentation-loss weight sweep
//! and the joint-task loss-weight grid, each row trained from scratch.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use sdtr_core::labels::Task;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Toggles};
use crate::data::{check_compatible, generate_splits, load_splits, Splits};
use crate::error::{io_err, HarnessError, Result};
use crate::robustness;
use crate::train::{deterministic_metrics, train_on, write_json, write_outputs, TrainOutcome};

pub const TABLE_JSON: &str = "ablation.json";
pub const TABLE_CSV: &str = "ablation.csv";
pub const SUMMARY_CSV: &str = "ablation_summary.csv";
pub const ROWS_DIR: &str = "rows";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Lattice,
    GammaSweep,
    JointGrid,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lattice => "lattice",
            Self::GammaSweep => "gamma_sweep",
            Self::JointGrid => "joint_grid",
        }
    }
}

/// One ablation setting, before seeds are applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub group: Group,
    pub name: String,
    pub task: Task,
    pub toggles: Toggles,
    pub gamma_seg: f64,
    pub gamma_dep: f64,
    pub w_det: f64,
    pub w_bev: f64,
}

impl RowSpec {
    /// `base` with this row's task, toggles, loss weights and `seed`.
    pub fn apply(&self, base: &RunConfig, seed: u64) -> RunConfig {
        let mut cfg = base.with_task(self.task);
        cfg.toggles = self.toggles;
        cfg.losses.gamma_seg = self.gamma_seg;
        cfg.losses.gamma_dep = self.gamma_dep;
        cfg.losses.w_det = self.w_det;
        cfg.losses.w_bev = self.w_bev;
        cfg.seed = seed;
        cfg
    }

    fn dir_name(&self, seed: u64) -> String {
        let name: String = self
            .name
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
            .collect();
        format!("{}-{}-seed{seed}", self.group.as_str(), name.trim_matches('_'))
    }
}

fn detection_row(group: Group, name: &str, toggles: Toggles, gamma_seg: f64) -> RowSpec {
    RowSpec {
        group,
        name: name.into(),
        task: Task::Detection,
        toggles,
        gamma_seg,
        gamma_dep: 1.0,
        w_det: 1.0,
        w_bev: 0.0,
    }
}

/// Module lattice in table order: baseline, +seg, +seg+pqb, +seg+dep and
/// the full model. Auxiliary weights stay at the base config's values.
pub fn lattice_rows(base: &RunConfig) -> Vec<RowSpec> {
    let t = |seg_branch, depth_branch, pqb| Toggles {
        seg_branch,
        depth_branch,
        pqb,
    };
    let g = base.losses.gamma_seg;
    let mut rows = vec![
        detection_row(Group::Lattice, "baseline", t(false, false, false), g),
        detection_row(Group::Lattice, "+seg", t(true, false, false), g),
        detection_row(Group::Lattice, "+seg+pqb", t(true, false, true), g),
        detection_row(Group::Lattice, "+seg+dep", t(true, true, false), g),
        detection_row(Group::Lattice, "+seg+dep+pqb", Toggles::FULL, g),
    ];
    for r in &mut rows {
        r.gamma_dep = base.losses.gamma_dep;
    }
    rows
}

/// Full detection model with `gamma_seg` in {1, 2, 3, 4} and `gamma_dep` 1.
pub fn gamma_rows() -> Vec<RowSpec> {
    [1.0, 2.0, 3.0, 4.0]
        .into_iter()
        .map(|g| detection_row(Group::GammaSweep, &format!("gamma_seg={g}"), Toggles::FULL, g))
        .collect()
}

/// Full joint model over the (w_det, w_bev) grid.
pub fn joint_rows(base: &RunConfig) -> Vec<RowSpec> {
    [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 2.0)]
        .into_iter()
        .map(|(w_det, w_bev)| RowSpec {
            group: Group::JointGrid,
            name: format!("w_det={w_det},w_bev={w_bev}"),
            task: Task::Joint,
            toggles: Toggles::FULL,
            gamma_seg: base.losses.gamma_seg,
            gamma_dep: base.losses.gamma_dep,
            w_det,
            w_bev,
        })
        .collect()
}

/// Rows enabled by `base.ablation`, lattice first.
pub fn planned_rows(base: &RunConfig) -> Vec<RowSpec> {
    let a = &base.ablation;
    let mut rows = Vec::new();
    if a.lattice {
        rows.extend(lattice_rows(base));
    }
    if a.gamma_sweep {
        rows.extend(gamma_rows());
    }
    if a.joint_grid {
        rows.extend(joint_rows(base));
    }
    rows
}

/// Seeds a group is repeated with: the lattice uses every ablation seed,
/// the sweeps use `sweep_seeds`.
pub fn seeds_for(base: &RunConfig, group: Group) -> &[u64] {
    match group {
        Group::Lattice => &base.ablation.seeds,
        Group::GammaSweep | Group::JointGrid => &base.ablation.sweep_seeds,
    }
}

/// Outcome of one (row, seed) training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub spec: RowSpec,
    pub seed: u64,
    pub wall_clock_s: f64,
    /// Final validation metrics, timing excluded; empty when the row failed.
    pub metrics: BTreeMap<String, f64>,
    pub samples_per_s: Option<f64>,
    pub error: Option<String>,
}

/// Mean and sample standard deviation of every metric over a row's seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSummary {
    pub group: Group,
    pub name: String,
    pub completed: usize,
    pub failed: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub mean_wall_clock_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub results: Vec<RowResult>,
    pub summary: Vec<RowSummary>,
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-row aggregates in first-seen row order.
pub fn summarize(results: &[RowResult]) -> Vec<RowSummary> {
    let mut order: Vec<(Group, String)> = Vec::new();
    for r in results {
        let key = (r.spec.group, r.spec.name.clone());
        if !order.contains(&key) {
            order.push(key);
        }
    }
    order
        .into_iter()
        .map(|(group, name)| {
            let rows: Vec<&RowResult> = results
                .iter()
                .filter(|r| r.spec.group == group && r.spec.name == name)
                .collect();
            let ok: Vec<&&RowResult> = rows.iter().filter(|r| r.error.is_none()).collect();
            let mut mean = BTreeMap::new();
            let mut std = BTreeMap::new();
            if let Some(first) = ok.first() {
                for key in first.metrics.keys() {
                    let xs: Vec<f64> = ok.iter().filter_map(|r| r.metrics.get(key).copied()).collect();
                    let (m, s) = mean_std(&xs);
                    mean.insert(key.clone(), m);
                    std.insert(key.clone(), s);
                }
            }
            let walls: Vec<f64> = rows.iter().map(|r| r.wall_clock_s).collect();
            RowSummary {
                group,
                name,
                completed: ok.len(),
                failed: rows.len() - ok.len(),
                mean,
                std,
                mean_wall_clock_s: mean_std(&walls).0,
            }
        })
        .collect()
}

/// Training data per task, loaded from `base.dataset` when it holds
/// compatible splits and generated in memory otherwise.
#[derive(Debug, Default)]
pub struct DataCache {
    splits: BTreeMap<String, Splits>,
}

impl DataCache {
    pub fn insert(&mut self, task: Task, splits: Splits) {
        self.splits.insert(format!("{task:?}"), splits);
    }

    pub fn get(&mut self, cfg: &RunConfig) -> Result<&Splits> {
        let key = format!("{:?}", cfg.task);
        if !self.splits.contains_key(&key) {
            let from_disk = if cfg.dataset.join(crate::data::TRAIN_DIR).exists() {
                load_splits(&cfg.dataset).ok().filter(|s| {
                    check_compatible(cfg, &s.train.meta).is_ok() && check_compatible(cfg, &s.val.meta).is_ok()
                })
            } else {
                None
            };
            let splits = match from_disk {
                Some(s) => s,
                None => generate_splits(cfg)?,
            };
            self.splits.insert(key.clone(), splits);
        }
        Ok(&self.splits[&key])
    }
}

/// Trains one row with one seed. Errors are recorded in the result rather
/// than returned, so a sweep can continue past a failing row.
pub fn run_row(base: &RunConfig, spec: &RowSpec, seed: u64, data: &mut DataCache) -> (RowResult, Option<TrainOutcome>) {
    let cfg = spec.apply(base, seed);
    let start = Instant::now();
    let outcome = data
        .get(&cfg)
        .and_then(|s| train_on(&cfg, &s.train.samples, &s.val, &mut |_| {}));
    let wall_clock_s = start.elapsed().as_secs_f64();
    match outcome {
        Ok(o) => (
            RowResult {
                spec: spec.clone(),
                seed,
                wall_clock_s,
                metrics: deterministic_metrics(&o.report),
                samples_per_s: Some(o.report.samples_per_s),
                error: None,
            },
            Some(o),
        ),
        Err(e) => (
            RowResult {
                spec: spec.clone(),
                seed,
                wall_clock_s,
                metrics: BTreeMap::new(),
                samples_per_s: None,
                error: Some(e.to_string()),
            },
            None,
        ),
    }
}

/// Runs every (row, seed) pair in order. `on_row` sees each result and,
/// for successful rows, the trained model.
pub fn run_rows(
    base: &RunConfig,
    specs: &[RowSpec],
    data: &mut DataCache,
    on_row: &mut dyn FnMut(&RowResult, Option<&TrainOutcome>) -> Result<()>,
) -> Result<AblationTable> {
    let mut results = Vec::new();
    for spec in specs {
        for &seed in seeds_for(base, spec.group) {
            let (result, outcome) = run_row(base, spec, seed, data);
            on_row(&result, outcome.as_ref())?;
            results.push(result);
        }
    }
    let summary = summarize(&results);
    Ok(AblationTable { results, summary })
}

/// Runs all enabled rows, writing each row's checkpoint and history under
/// `out/rows/` and the consolidated table as JSON and CSV. The full-model
/// lattice rows are then swept for robustness (see [`crate::robustness`]).
pub fn ablate(base: &RunConfig, out: &Path) -> Result<AblationTable> {
    base.validate()?;
    fs::create_dir_all(out.join(ROWS_DIR)).map_err(io_err(out))?;
    let mut data = DataCache::default();
    let specs = planned_rows(base);
    let mut full_states = Vec::new();
    let table = run_rows(base, &specs, &mut data, &mut |r, o| {
        if let Some(o) = o {
            let cfg = r.spec.apply(base, r.seed);
            write_outputs(&out.join(ROWS_DIR).join(r.spec.dir_name(r.seed)), &cfg, o)?;
            if r.spec.group == Group::Lattice && r.spec.toggles == Toggles::FULL {
                full_states.push(o.state.clone());
            }
        }
        Ok(())
    })?;
    write_table(out, &table)?;
    if let Some(full) = specs
        .iter()
        .find(|s| s.group == Group::Lattice && s.toggles == Toggles::FULL)
    {
        if !full_states.is_empty() {
            let cfg = full.apply(base, base.seed);
            let val = &data.get(&cfg)?.val;
            let models: Vec<&sdtr_model::ModelState> = full_states.iter().collect();
            let (sweep, reports) = robustness::sweep(&models, val, &cfg)?;
            robustness::write_sweep(out, &sweep, &reports)?;
        }
    }
    Ok(table)
}

/// Metric columns shared by the CSV tables.
const CSV_METRICS: [&str; 8] = [
    "nds",
    "map",
    "tp.ate",
    "tp.ase",
    "tp.aoe",
    "tp.ave",
    "tp.aae",
    "iou.drivable",
];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> HarnessError + '_ {
    move |e| HarnessError::Parse {
        what: format!("csv output {}", path.display()),
        reason: e.to_string(),
    }
}

pub fn write_table(out: &Path, table: &AblationTable) -> Result<()> {
    write_json(
        &out.join(TABLE_JSON),
        &serde_json::to_value(table).expect("table serializes"),
    )?;

    let path = out.join(TABLE_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec![
        "group",
        "row",
        "seed",
        "gamma_seg",
        "gamma_dep",
        "w_det",
        "w_bev",
        "wall_clock_s",
        "samples_per_s",
    ];
    header.extend(CSV_METRICS);
    header.push("error");
    w.write_record(&header).map_err(csv_err(&path))?;
    for r in &table.results {
        let s = &r.spec;
        let mut rec = vec![
            s.group.as_str().to_string(),
            s.name.clone(),
            r.seed.to_string(),
            s.gamma_seg.to_string(),
            s.gamma_dep.to_string(),
            s.w_det.to_string(),
            s.w_bev.to_string(),
            format!("{:.3}", r.wall_clock_s),
            fmt_opt(r.samples_per_s),
        ];
        rec.extend(CSV_METRICS.iter().map(|k| fmt_opt(r.metrics.get(*k).copied())));
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    let mut header = vec![
        "group".to_string(),
        "row".into(),
        "completed".into(),
        "failed".into(),
        "wall_clock_s".into(),
    ];
    for k in CSV_METRICS {
        header.push(format!("{k}.mean"));
        header.push(format!("{k}.std"));
    }
    w.write_record(&header).map_err(csv_err(&path))?;
    for s in &table.summary {
        let mut rec = vec![
            s.group.as_str().to_string(),
            s.name.clone(),
            s.completed.to_string(),
            s.failed.to_string(),
            format!("{:.3}", s.mean_wall_clock_s),
        ];
        for k in CSV_METRICS {
            rec.push(fmt_opt(s.mean.get(k).copied()));
            rec.push(fmt_opt(s.std.get(k).copied()));
        }
        w.write_record(&rec).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))
}

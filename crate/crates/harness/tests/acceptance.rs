//! Acceptance run: one pass/fail line per criterion, non-zero exit if any
//! fails. Positional arguments select criteria by number (`acceptance 1 9`).
//! Tables from the training criteria are left under the target tmp dir.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use common::tiny_run_config;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdtr::ablate::{
    gamma_rows, lattice_rows, run_rows, write_table, DataCache, Group, RowSummary, SUMMARY_CSV, TABLE_JSON,
};
use sdtr::config::{Toggles, SEED_ENV};
use sdtr::data::{generate_splits, images_tensor};
use sdtr::robustness::{non_increasing_within_std, sweep, write_sweep};
use sdtr::train::{sample_gradients, train_on, TrainOutcome};
use sdtr::RunConfig;
use sdtr_core::geometry::{backproject_ground, project_point, render_depth, Camera, Extrinsics, Intrinsics, Z_NEAR};
use sdtr_core::labels::{make_bev_gt, LabelConfig, Task};
use sdtr_core::metrics::{
    average_precision, bev_iou, compose_nds, evaluate_detections, match_for_eval, tp_errors, Detection, Frame,
    MatchRecord,
};
use sdtr_core::scene::{generate_scene, Box3D, SceneConfig};
use sdtr_model::boxcode::BoxRanges;
use sdtr_model::losses::{self, LossWeights, Targets};
use sdtr_model::network::pqb_values;
use sdtr_model::{ModelState, Tensor};
use sdtr_testkit::{
    ap_dense_grid, bev_brute_force, central_difference, depth_brute_force, exhaustive_assignment, greedy_oracle,
    relative_error,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn out_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).expect("acceptance output dir");
    dir
}

/// Published rows: (NDS, mAP, mATE, mASE, mAOE, mAVE, mAAE). The third is
/// the ResNet-50 SDTR row.
const PUBLISHED_ROWS: [[f64; 7]; 12] = [
    [0.359, 0.312, 0.718, 0.278, 0.638, 1.150, 0.334],
    [0.367, 0.317, 0.840, 0.280, 0.616, 0.954, 0.233],
    [0.384, 0.331, 0.799, 0.280, 0.616, 0.904, 0.212],
    [0.415, 0.343, 0.725, 0.263, 0.422, 1.292, 0.153],
    [0.425, 0.346, 0.773, 0.268, 0.383, 0.842, 0.216],
    [0.448, 0.375, 0.725, 0.272, 0.391, 0.802, 0.200],
    [0.482, 0.430, 0.643, 0.265, 0.406, 0.830, 0.192],
    [0.400, 0.338, 0.658, 0.255, 0.629, 1.629, 0.142],
    [0.474, 0.429, 0.583, 0.254, 0.376, 1.053, 0.190],
    [0.488, 0.424, 0.524, 0.242, 0.373, 0.950, 0.148],
    [0.504, 0.441, 0.593, 0.249, 0.383, 0.808, 0.132],
    [0.505, 0.449, 0.579, 0.250, 0.392, 0.833, 0.140],
];

fn nds_cross_check() -> Outcome {
    let start = Instant::now();
    let r50 = compose_nds(0.331, &[0.799, 0.280, 0.616, 0.904, 0.212]);
    ensure((r50 - 0.384).abs() <= 0.001, || format!("R50 row gives {r50:.4}"))?;
    let mut worst: f64 = 0.0;
    for row in PUBLISHED_ROWS {
        let nds = compose_nds(row[1], &[row[2], row[3], row[4], row[5], row[6]]);
        worst = worst.max((nds - row[0]).abs());
        ensure((nds - row[0]).abs() <= 0.001 + 1e-12, || {
            format!("{row:?} gives {nds:.4}")
        })?;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.2}s"))?;
    Ok(format!(
        "R50 {r50:.4}, {} rows, worst |diff| {worst:.5}",
        PUBLISHED_ROWS.len()
    ))
}

/// Finite differences on random entries of every parameter of the full
/// objective, for every task. This reaches the backbone, encoder, query
/// builder, decoder, both heads and all four losses.
fn gradient_suite() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for task in [Task::Detection, Task::Bev, Task::Joint] {
        let cfg = tiny_run_config(task);
        let (h, w) = cfg.model.feature_size();
        ensure(cfg.model.embed_dim <= 16 && h <= 4 && w <= 4, || {
            "instance too large".into()
        })?;
        let splits = generate_splits(&cfg).map_err(|e| e.to_string())?;
        let sample = splits
            .train
            .samples
            .iter()
            .find(|s| !s.boxes.is_empty())
            .ok_or("no sample with boxes")?;
        let state = ModelState::init(&cfg.model_config(), 5).map_err(|e| e.to_string())?;
        let (_, grads) = sample_gradients(&state, &cfg, sample).map_err(|e| e.to_string())?;
        let images = images_tensor(sample);
        let targets = Targets {
            semantic: &sample.semantic,
            depth: &sample.depth,
            depth_mask: &sample.depth_mask,
            bev: &sample.bev,
            boxes: &sample.boxes,
        };
        let loss = |st: &ModelState| {
            let (mut g, _, out) = sdtr_model::run(st, &images).expect("forward");
            losses::objective(&mut g, &out, &st.config, &targets, &cfg.losses)
                .1
                .total
        };
        let mut r = rng(task as u64);
        for (name, t) in &state.params {
            for _ in 0..4 {
                let j = r.random_range(0..t.len());
                let mut f = |x: &[f64]| {
                    let mut st = state.clone();
                    st.get_mut(name).data.copy_from_slice(x);
                    loss(&st)
                };
                let numeric = central_difference(&mut f, &t.data, j, 1e-6);
                let err = relative_error(grads[name][j], numeric);
                worst = worst.max(err);
                checked += 1;
                ensure(err < TOL, || {
                    format!(
                        "{task:?} {name}[{j}]: analytic {:e} numeric {numeric:e}",
                        grads[name][j]
                    )
                })?;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "{checked} entries, worst relative error {worst:.1e}, {secs:.1}s"
    ))
}

fn random_tensor(r: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect())
}

fn pqb_algebra() -> Outcome {
    let mut r = rng(3);
    let q0 = random_tensor(&mut r, vec![6, 5], -1.0, 1.0);
    let (q1, sp) = pqb_values(&Tensor::zeros(vec![2, 3, 2, 2]), &[0.7, -1.3, 2.0], &q0).map_err(|e| e.to_string())?;
    ensure(q1 == q0 && sp.iter().all(|&v| v == 0.0), || {
        "zero prior moved the queries".into()
    })?;
    let p = random_tensor(&mut r, vec![2, 3, 2, 2], 0.0, 1.0);
    let (q1, _) = pqb_values(&p, &[0.0; 3], &q0).map_err(|e| e.to_string())?;
    ensure(q1 == q0, || "zero class weights moved the queries".into())?;
    let p = Tensor::new(vec![1, 2, 1, 1], vec![0.4, 0.8]);
    let (q1, sp) = pqb_values(&p, &[1.0, 2.0], &Tensor::zeros(vec![4, 3])).map_err(|e| e.to_string())?;
    ensure(sp == vec![0.4, 0.4, 1.6, 1.6], || format!("one-pixel prior {sp:?}"))?;
    ensure((0..4).all(|q| q1.row(q).iter().all(|&v| v == sp[q])), || {
        "one-pixel queries".into()
    })?;

    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = r.random_range(1..4);
        let cs = r.random_range(1..5);
        let (h, w) = (r.random_range(1..5), r.random_range(1..5));
        let p = random_tensor(&mut r, vec![n, cs, h, w], 0.0, 1.0);
        let sw: Vec<f64> = (0..cs).map(|_| r.random_range(-2.0..2.0)).collect();
        let shape = vec![cs * r.random_range(1..9), r.random_range(1..9)];
        let q0 = random_tensor(&mut r, shape, -3.0, 3.0);
        let lambda = r.random_range(-3.0..3.0);
        let (q1, sp) = pqb_values(&p, &sw, &q0).map_err(|e| e.to_string())?;
        for (q, s) in sp.iter().enumerate() {
            for (a, b) in q1.row(q).iter().zip(q0.row(q)) {
                worst = worst.max((a - b - s).abs());
            }
        }
        let scaled = Tensor::new(p.shape.clone(), p.data.iter().map(|v| v * lambda).collect());
        let (_, sp2) = pqb_values(&scaled, &sw, &q0).map_err(|e| e.to_string())?;
        for (a, b) in sp.iter().zip(&sp2) {
            worst = worst.max((a * lambda - b).abs());
        }
        ensure(worst < 1e-9, || format!("case {case}: deviation {worst:e}"))?;
    }
    Ok(format!("3 examples exact, 100 instances, worst deviation {worst:.1e}"))
}

fn random_camera(r: &mut ChaCha8Rng, w: usize, h: usize) -> Camera {
    let f = r.random_range(0.5..1.2) * w as f64;
    Camera {
        intrinsics: Intrinsics::new(f, f, w as f64 / 2.0, h as f64 / 2.0, w, h).expect("valid intrinsics"),
        extrinsics: Extrinsics::looking(
            r.random_range(-3.1..3.1),
            r.random_range(0.05..0.6),
            Vector3::new(
                r.random_range(-1.0..1.0),
                r.random_range(-1.0..1.0),
                r.random_range(0.5..3.0),
            ),
        ),
    }
}

fn random_gt_box(r: &mut ChaCha8Rng, range: f64, z_range: f64, classes: usize) -> Box3D {
    Box3D {
        center: [
            r.random_range(-0.9 * range..0.9 * range),
            r.random_range(-0.9 * range..0.9 * range),
            r.random_range(-0.9 * z_range..0.9 * z_range),
        ],
        size: [
            r.random_range(0.5..3.0),
            r.random_range(0.5..5.0),
            r.random_range(0.5..2.0),
        ],
        yaw: r.random_range(-3.0..3.0),
        velocity: [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)],
        class_id: r.random_range(0..classes),
        attribute_id: r.random_range(0..2),
    }
}

fn geometry_and_label_oracles() -> Outcome {
    let mut r = rng(4);
    let mut round_trips = 0;
    let mut worst: f64 = 0.0;
    while round_trips < 200 {
        let cam = random_camera(&mut r, 176, 64);
        let (u, v) = (r.random_range(0.0..175.999), r.random_range(0.0..63.999));
        if let Some(g) = backproject_ground(u, v, &cam, 0.0) {
            let p = project_point(&g, &cam, Z_NEAR);
            worst = worst.max((p.u - u).abs()).max((p.v - v).abs());
            round_trips += 1;
        }
    }
    ensure(worst < 1e-6, || format!("round trip error {worst:e} px"))?;

    for case in 0..50 {
        let (w, h) = (r.random_range(4..=32), r.random_range(4..=32));
        let cam = random_camera(&mut r, w, h);
        let c = cam.extrinsics.center();
        let fwd = cam.extrinsics.rotation.row(2).transpose();
        let points: Vec<[f64; 3]> = (0..r.random_range(0..=100))
            .map(|_| {
                let p = c
                    + fwd * r.random_range(-1.0..15.0)
                    + Vector3::new(
                        r.random_range(-6.0..6.0),
                        r.random_range(-6.0..6.0),
                        r.random_range(-3.0..3.0),
                    );
                [p.x, p.y, p.z]
            })
            .collect();
        let vecs: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
        let img = render_depth(&vecs, &cam, Z_NEAR);
        let oracle = depth_brute_force(&points, &cam, Z_NEAR);
        for (px, want) in oracle.iter().enumerate() {
            let got = img.valid[px].then_some(img.depth[px]);
            ensure(got == *want, || format!("render_depth case {case} pixel {px}"))?;
        }
    }

    let scene_cfg = SceneConfig {
        num_points: 200,
        ..SceneConfig::default()
    };
    for seed in 0..50u64 {
        let scene = generate_scene(&scene_cfg, seed).map_err(|e| e.to_string())?;
        let size = r.random_range(16..=48usize);
        let labels = LabelConfig {
            task: Task::Joint,
            bev_size: size,
            bev_cell: 2.0 * scene_cfg.range / size as f64,
            ..LabelConfig::default()
        };
        let want = bev_brute_force(
            size,
            labels.bev_cell,
            &scene.drivable_polygons,
            &scene.lane_polygons,
            &scene.boxes,
            labels.num_object_classes,
        );
        ensure(make_bev_gt(&scene, &labels) == want, || {
            format!("make_bev_gt seed {seed}")
        })?;
    }

    let ranges = BoxRanges {
        range: 20.0,
        z_range: 3.0,
    };
    let w = LossWeights::default();
    for case in 0..50 {
        let n_gt = r.random_range(0..=5);
        let n_q = r.random_range(n_gt.max(1)..=8);
        let gts: Vec<Box3D> = (0..n_gt).map(|_| random_gt_box(&mut r, 20.0, 3.0, 2)).collect();
        let cls: Vec<f64> = (0..n_q * 2).map(|_| r.random_range(-3.0..3.0)).collect();
        let reg: Vec<f64> = (0..n_q * 10).map(|_| r.random_range(-2.0..2.0)).collect();
        let cost = losses::matching_cost(&cls, 2, &reg, &gts, ranges, &w);
        let got = losses::match_queries(&cls, 2, &reg, &gts, ranges, &w);
        ensure(got == exhaustive_assignment(&cost).1, || {
            format!("match_queries case {case}")
        })?;
    }
    Ok(format!(
        "round trip worst {worst:.1e} px; depth, BEV and matching oracles exact on 50 instances each"
    ))
}

fn eval_box(x: f64, y: f64, class_id: usize) -> Box3D {
    Box3D {
        center: [x, y, 0.5],
        size: [1.0, 2.0, 1.0],
        yaw: 0.0,
        velocity: [0.0; 2],
        class_id,
        attribute_id: 0,
    }
}

fn metric_oracles() -> Outcome {
    let mut r = rng(5);
    for case in 0..100 {
        let gts: Vec<Box3D> = (0..r.random_range(0..=10))
            .map(|_| {
                eval_box(
                    r.random_range(-5.0..5.0),
                    r.random_range(-5.0..5.0),
                    r.random_range(0..2),
                )
            })
            .collect();
        let preds: Vec<Detection> = (0..r.random_range(0..=10))
            .map(|_| {
                let b = if !gts.is_empty() && r.random_bool(0.5) {
                    let g = gts[r.random_range(0..gts.len())];
                    eval_box(
                        g.center[0] + r.random_range(-1.5..1.5),
                        g.center[1] + r.random_range(-1.5..1.5),
                        g.class_id,
                    )
                } else {
                    eval_box(
                        r.random_range(-5.0..5.0),
                        r.random_range(-5.0..5.0),
                        r.random_range(0..2),
                    )
                };
                Detection {
                    bbox: b,
                    score: r.random_range(0.0..1.0),
                }
            })
            .collect();
        let pairs: Vec<(Box3D, f64)> = preds.iter().map(|d| (d.bbox, d.score)).collect();
        for class in 0..2 {
            for thr in [0.5, 1.0, 2.0, 4.0] {
                let records = match_for_eval(&preds, &gts, class, thr);
                let want = greedy_oracle(&pairs, &gts, class, thr);
                let mut flags = vec![None; preds.len()];
                for rec in &records {
                    flags[rec.pred] = Some(rec.gt.is_some());
                }
                ensure(flags == want, || {
                    format!("matching case {case} class {class} thr {thr}")
                })?;
                let mut order: Vec<usize> = (0..preds.len()).filter(|&i| want[i].is_some()).collect();
                order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
                let tps: Vec<bool> = order.iter().map(|&i| want[i] == Some(true)).collect();
                let n_gt = gts.iter().filter(|g| g.class_id == class).count();
                let (got, oracle) = (average_precision(&records, n_gt), ap_dense_grid(&tps, n_gt));
                ensure((got - oracle).abs() < 1e-12, || {
                    format!("AP case {case}: {got} vs {oracle}")
                })?;
            }
        }
    }

    let g = eval_box(1.0, 1.0, 0);
    let rec = |pred, tp: bool| MatchRecord {
        pred,
        score: 0.9,
        gt: tp.then_some(pred),
    };
    ensure(average_precision(&[rec(0, true)], 1) == 1.0, || "single TP".into())?;
    ensure(average_precision(&[], 3) == 0.0, || "no predictions".into())?;
    ensure(average_precision(&[rec(0, false)], 0) == 0.0, || {
        "no ground truth".into()
    })?;
    ensure(tp_errors(&[(g, g)]) == [0.0; 5], || "identical pair".into())?;
    ensure(tp_errors(&[]) == [1.0; 5], || "no matches".into())?;
    ensure(compose_nds(1.0, &[0.0; 5]) == 1.0, || "perfect NDS".into())?;
    let m = evaluate_detections(
        &[Frame {
            preds: vec![Detection { bbox: g, score: 0.9 }],
            gts: vec![g],
        }],
        1,
    );
    ensure((m.map, m.nds) == (1.0, 1.0), || format!("perfect frame {m:?}"))?;
    ensure(
        bev_iou(&[1.0, 1.0, 0.0, 1.0], &[1, 1, 0, 1], 1, 0.5) == vec![1.0],
        || "identical masks".into(),
    )?;
    ensure(
        bev_iou(&[1.0, 1.0, 0.0, 0.0], &[0, 0, 1, 1], 1, 0.5) == vec![0.0],
        || "disjoint masks".into(),
    )?;
    ensure(bev_iou(&[0.0; 4], &[0; 4], 1, 0.5) == vec![1.0], || {
        "empty masks".into()
    })?;
    Ok("matching and AP equal oracles on 100 instances; trivial cases exact".into())
}

fn detection_base() -> RunConfig {
    RunConfig::desk(Task::Detection)
}

fn row<'a>(summary: &'a [RowSummary], name: &str) -> Result<&'a RowSummary, String> {
    summary
        .iter()
        .find(|s| s.group == Group::Lattice && s.name == name)
        .ok_or_else(|| format!("row {name} missing"))
}

fn nds_of(s: &RowSummary) -> Result<(f64, f64), String> {
    ensure(s.failed == 0, || format!("{} had {} failed seeds", s.name, s.failed))?;
    Ok((s.mean["nds"], s.std["nds"]))
}

/// Full-model states of the lattice, kept for the robustness criterion.
struct LatticeRun {
    summary: Vec<RowSummary>,
    full_states: Vec<ModelState>,
    data: DataCache,
}

fn run_lattice() -> Result<LatticeRun, String> {
    let base = detection_base();
    let specs: Vec<_> = lattice_rows(&base)
        .into_iter()
        .filter(|s| s.name != "+seg+pqb")
        .collect();
    let mut data = DataCache::default();
    let mut full_states = Vec::new();
    let table = run_rows(&base, &specs, &mut data, &mut |r, o: Option<&TrainOutcome>| {
        eprintln!(
            "  lattice {:14} seed {}  nds {:.4}  ({:.0}s)",
            r.spec.name,
            r.seed,
            r.metrics.get("nds").copied().unwrap_or(f64::NAN),
            r.wall_clock_s
        );
        if let Some(o) = o {
            if r.spec.toggles == Toggles::FULL {
                full_states.push(o.state.clone());
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    write_table(&out_dir("lattice"), &table).map_err(|e| e.to_string())?;
    Ok(LatticeRun {
        summary: table.summary,
        full_states,
        data,
    })
}

fn ablation_direction(lattice: &Result<LatticeRun, String>, secs: f64) -> Outcome {
    let run = lattice.as_ref().map_err(Clone::clone)?;
    let base = nds_of(row(&run.summary, "baseline")?)?;
    let seg = nds_of(row(&run.summary, "+seg")?)?;
    let seg_dep = nds_of(row(&run.summary, "+seg+dep")?)?;
    let full = nds_of(row(&run.summary, "+seg+dep+pqb")?)?;
    let table = format!(
        "baseline {:.4}±{:.4}, +seg {:.4}±{:.4}, +seg+dep {:.4}±{:.4}, full {:.4}±{:.4}, {:.0} min",
        base.0,
        base.1,
        seg.0,
        seg.1,
        seg_dep.0,
        seg_dep.1,
        full.0,
        full.1,
        secs / 60.0
    );
    // The gap must exceed the larger of the two rows' 3-seed sample stds.
    let beats = |hi: (f64, f64), lo: (f64, f64)| hi.0 - lo.0 > hi.1.max(lo.1);
    let mut failed = Vec::new();
    if !beats(seg, base) {
        failed.push("(a) +seg vs baseline");
    }
    if !beats(seg_dep, seg) {
        failed.push("(b) +seg+dep vs +seg");
    }
    if !beats(full, seg_dep) {
        failed.push("(c) full vs +seg+dep");
    }
    if secs > 7200.0 {
        failed.push("runtime over 2 h");
    }
    if failed.is_empty() {
        Ok(table)
    } else {
        Err(format!("{}: {table}", failed.join(", ")))
    }
}

fn gamma_sweep() -> Outcome {
    // Only the table's shape is checked here, so a short schedule suffices.
    let mut base = detection_base();
    base.epochs = 5;
    let mut data = DataCache::default();
    let table = run_rows(&base, &gamma_rows(), &mut data, &mut |_, _| Ok(())).map_err(|e| e.to_string())?;
    let dir = out_dir("gamma_sweep");
    write_table(&dir, &table).map_err(|e| e.to_string())?;

    let names: Vec<&str> = table.summary.iter().map(|s| s.name.as_str()).collect();
    ensure(
        names == ["gamma_seg=1", "gamma_seg=2", "gamma_seg=3", "gamma_seg=4"],
        || format!("rows {names:?}"),
    )?;
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join(TABLE_JSON)).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    ensure(json["results"].as_array().is_some_and(|a| a.len() == 4), || {
        "json results".into()
    })?;
    let mut reader = csv::Reader::from_path(dir.join(SUMMARY_CSV)).map_err(|e| e.to_string())?;
    let headers = reader.headers().map_err(|e| e.to_string())?.clone();
    let nds_col = headers
        .iter()
        .position(|h| h == "nds.mean")
        .ok_or("no nds.mean column")?;
    let mut cells = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| e.to_string())?;
        ensure(rec.len() == headers.len(), || "ragged csv row".into())?;
        let v: f64 = rec[nds_col]
            .parse()
            .map_err(|_| format!("nds cell {:?}", &rec[nds_col]))?;
        ensure(v.is_finite() && (0.0..=1.0).contains(&v), || format!("nds {v}"))?;
        cells.push(format!("{v:.4}"));
    }
    ensure(cells.len() == 4, || format!("{} summary rows", cells.len()))?;
    let gammas: Vec<f64> = table.results.iter().map(|r| r.spec.gamma_seg).collect();
    ensure(gammas == [1.0, 2.0, 3.0, 4.0], || format!("gamma_seg {gammas:?}"))?;
    ensure(table.results.iter().all(|r| r.spec.gamma_dep == 1.0), || {
        "gamma_dep".into()
    })?;
    Ok(format!("4 rows, nds [{}]", cells.join(", ")))
}

fn robustness(lattice: &mut Result<LatticeRun, String>) -> Outcome {
    let run = lattice.as_mut().map_err(|e| e.clone())?;
    ensure(run.full_states.len() == 3, || {
        format!("{} full-model seeds", run.full_states.len())
    })?;
    let base = detection_base();
    let val = &run.data.get(&base).map_err(|e| e.to_string())?.val;
    let models: Vec<&ModelState> = run.full_states.iter().collect();
    let (table, reports) = sweep(&models, val, &base).map_err(|e| e.to_string())?;
    write_sweep(&out_dir("robustness"), &table, &reports).map_err(|e| e.to_string())?;
    let noise: Vec<String> = table
        .noise
        .iter()
        .map(|p| format!("{:.4}±{:.4}", p.mean, p.std))
        .collect();
    let drop1 = table.drops.iter().find(|p| p.dropped == 1).ok_or("no 1-camera drop")?;
    let drop3 = table.drops.iter().find(|p| p.dropped == 3).ok_or("no 3-camera drop")?;
    let detail = format!(
        "noise [{}], drop 1 {:.4}, drop 3 {:.4}",
        noise.join(", "),
        drop1.mean,
        drop3.mean
    );
    ensure(non_increasing_within_std(&table.noise), || {
        format!("noise sweep rises: {detail}")
    })?;
    ensure(drop1.mean > drop3.mean, || format!("drop order: {detail}"))?;
    Ok(detail)
}

fn toggle_soundness() -> Outcome {
    let mut batches = 0;
    for task in [Task::Detection, Task::Bev, Task::Joint] {
        let mut cfg = tiny_run_config(task);
        cfg.toggles.pqb = false;
        let splits = generate_splits(&cfg).map_err(|e| e.to_string())?;
        let trained = train_on(&cfg, &splits.train.samples, &splits.val, &mut |_| {}).map_err(|e| e.to_string())?;
        let init = ModelState::init(&cfg.model_config(), cfg.seed).map_err(|e| e.to_string())?;
        for state in [&init, &trained.state] {
            for s in splits.train.samples.iter().chain(&splits.val.samples) {
                let (g, _, out) = sdtr_model::run(state, &images_tensor(s)).map_err(|e| e.to_string())?;
                let (q0, q1) = (g.value(out.q0), g.value(out.q1));
                let same =
                    q0.shape == q1.shape && q0.data.iter().zip(&q1.data).all(|(a, b)| a.to_bits() == b.to_bits());
                ensure(same, || format!("{task:?} sample {}: Q1 differs from Q0", s.seed))?;
                batches += 1;
            }
        }
    }

    let mut epochs = 0;
    for (seg_branch, depth_branch) in [(false, true), (true, false), (false, false)] {
        let mut cfg = tiny_run_config(Task::Joint);
        cfg.toggles.seg_branch = seg_branch;
        cfg.toggles.depth_branch = depth_branch;
        let splits = generate_splits(&cfg).map_err(|e| e.to_string())?;
        let out = train_on(&cfg, &splits.train.samples, &splits.val, &mut |_| {}).map_err(|e| e.to_string())?;
        for e in &out.history.epochs {
            let c = &e.train_components;
            ensure(seg_branch || c.seg == 0.0, || {
                format!("seg loss {} with the branch off", c.seg)
            })?;
            ensure(depth_branch || c.dep == 0.0, || {
                format!("depth loss {} with the branch off", c.dep)
            })?;
            ensure(!seg_branch || c.seg > 0.0, || {
                "seg loss vanished with the branch on".into()
            })?;
            ensure(!depth_branch || c.dep > 0.0, || {
                "depth loss vanished with the branch on".into()
            })?;
            epochs += 1;
        }
        for s in &splits.train.samples {
            let (report, _) = sample_gradients(&out.state, &cfg, s).map_err(|e| e.to_string())?;
            let c = report.components;
            ensure((seg_branch || c.seg == 0.0) && (depth_branch || c.dep == 0.0), || {
                format!("sample {}: disabled branch loss {c:?}", s.seed)
            })?;
        }
    }
    Ok(format!(
        "Q1 == Q0 on {batches} forward passes; disabled-branch losses 0 over {epochs} epochs"
    ))
}

fn reproducibility() -> Outcome {
    let dir = out_dir("reproducibility");
    let mut cfg = RunConfig::desk(Task::Joint);
    cfg.data.train_scenes = 24;
    cfg.data.val_scenes = 6;
    cfg.epochs = 2;
    cfg.save(&dir.join("cfg.json")).map_err(|e| e.to_string())?;
    let sdtr = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_sdtr"))
            .args(args)
            .current_dir(&dir)
            .env_remove(SEED_ENV)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            String::from_utf8_lossy(&out.stderr).into_owned()
        })
    };
    sdtr(&["generate-data", "--config", "cfg.json", "--out", "data"])?;
    sdtr(&["train", "--config", "cfg.json", "--out", "a"])?;
    sdtr(&["train", "--config", "cfg.json", "--out", "b"])?;
    let read = |run: &str| fs::read(dir.join(run).join("history.json")).map_err(|e| e.to_string());
    let (a, b) = (read("a")?, read("b")?);
    ensure(a == b, || "histories differ".into())?;
    let history: serde_json::Value = serde_json::from_slice(&a).map_err(|e| e.to_string())?;
    let n = history["epochs"].as_array().map_or(0, Vec::len);
    ensure(n == 2, || format!("{n} epochs recorded"))?;
    Ok(format!(
        "two joint runs, {n} epochs, {} identical history bytes",
        a.len()
    ))
}

fn report(id: usize, name: &str, outcome: std::thread::Result<Outcome>, failures: &mut usize) {
    let line = match outcome {
        Ok(Ok(detail)) => format!("PASS  {detail}"),
        Ok(Err(why)) => {
            *failures += 1;
            format!("FAIL  {why}")
        }
        Err(panic) => {
            *failures += 1;
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            format!("FAIL  panicked: {msg}")
        }
    };
    println!("criterion {id:2} {name:34} {line}");
}

fn main() -> ExitCode {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |id: usize| selected.is_empty() || selected.contains(&id);
    let mut failures = 0;
    let mut run = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(id) {
            report(id, name, catch_unwind(AssertUnwindSafe(f)), &mut failures);
        }
    };
    run(1, "NDS formula cross-check", &mut nds_cross_check);
    run(2, "gradient suite", &mut gradient_suite);
    run(3, "PQB algebra", &mut pqb_algebra);
    run(4, "geometry and label oracles", &mut geometry_and_label_oracles);
    run(5, "metric oracles", &mut metric_oracles);

    let mut lattice = Err("lattice not run".to_string());
    let mut lattice_secs = 0.0;
    if wanted(6) || wanted(8) {
        let start = Instant::now();
        lattice = catch_unwind(run_lattice).unwrap_or_else(|_| Err("lattice training panicked".into()));
        lattice_secs = start.elapsed().as_secs_f64();
    }
    run(6, "directional ablation", &mut || {
        ablation_direction(&lattice, lattice_secs)
    });
    run(7, "loss-weight sweep table", &mut gamma_sweep);
    run(8, "robustness monotonicity", &mut || robustness(&mut lattice));
    run(9, "toggle soundness", &mut toggle_soundness);
    run(10, "reproducibility", &mut reproducibility);

    if failures == 0 {
        println!("acceptance: all selected criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}

//! Figure output: noise-degradation curves and camera-drop radar charts as
//! SVG, BEV overlays as PNG. Every output is a pure function of its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use sdtr_core::dataset::TrainingSample;
use sdtr_core::labels::{BEV_DRIVABLE, BEV_LANE};
use sdtr_core::metrics::{EvalReport, MetricsError};
use sdtr_core::scene::Box3D;

use crate::error::{io_err, HarnessError, Result};
use crate::eval::Prediction;

pub const BACKGROUND_RGB: [u8; 3] = [40, 40, 40];
pub const DRIVABLE_RGB: [u8; 3] = [255, 140, 0];
pub const LANE_RGB: [u8; 3] = [0, 230, 230];
pub const VEHICLE_RGB: [u8; 3] = [30, 90, 255];
/// Non-vehicle object classes.
pub const OTHER_OBJECT_RGB: [u8; 3] = [220, 40, 140];
pub const GT_BOX_RGB: [u8; 3] = [255, 255, 255];
pub const PRED_BOX_RGB: [u8; 3] = [255, 230, 0];

const VEHICLE_CLASSES: [&str; 5] = ["car", "truck", "bus", "trailer", "construction_vehicle"];

/// Reads every `*.json` file of `dir` (sorted by name) as a report. A
/// missing key is reported with the file and the key name.
pub fn read_reports(dir: &Path) -> Result<Vec<(String, EvalReport)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
                what: format!("report {}", p.display()),
                reason: e.to_string(),
            })?;
            let r = EvalReport::from_json(&v).map_err(|e| match e {
                MetricsError::MissingField(key) => HarnessError::MissingField {
                    path: p.display().to_string(),
                    key,
                },
                other => HarnessError::Parse {
                    what: format!("report {}", p.display()),
                    reason: other.to_string(),
                },
            })?;
            let name = p
                .file_stem()
                .map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            Ok((name, r))
        })
        .collect()
}

/// Scalars a curve is drawn for: NDS and mAP for detection reports, per
/// channel IoU for BEV reports.
fn curve_metrics(r: &EvalReport) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    if let Some(d) = &r.detection {
        out.push(("nds".to_string(), d.nds));
        out.push(("map".to_string(), d.map));
    }
    for (name, iou) in r.bev_names.iter().zip(&r.bev_iou) {
        out.push((format!("iou.{name}"), *iou));
    }
    out
}

/// One metric along the noise sweep, points sorted by
/// `(sigma_rot, sigma_trans)`; reports at the same level are averaged.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub metric: String,
    /// `(sigma_rot, sigma_trans, value)`.
    pub points: Vec<(f64, f64, f64)>,
}

/// Noise curves of all reports that are unperturbed or carry extrinsic
/// noise. Empty unless at least one report is noisy.
pub fn noise_curves(reports: &[(String, EvalReport)]) -> Vec<Curve> {
    let relevant: Vec<&EvalReport> = reports
        .iter()
        .map(|(_, r)| r)
        .filter(|r| matches!(r.perturbation.kind.as_str(), "none" | "extrinsic_noise"))
        .collect();
    if !relevant.iter().any(|r| r.perturbation.kind == "extrinsic_noise") {
        return vec![];
    }
    // metric -> level -> values; levels keyed by bit patterns so equal sigmas group.
    let mut acc: BTreeMap<String, BTreeMap<(u64, u64), Vec<f64>>> = BTreeMap::new();
    for r in relevant {
        let level = (r.perturbation.sigma_rot.to_bits(), r.perturbation.sigma_trans.to_bits());
        for (metric, v) in curve_metrics(r) {
            acc.entry(metric).or_default().entry(level).or_default().push(v);
        }
    }
    acc.into_iter()
        .map(|(metric, levels)| {
            let mut points: Vec<(f64, f64, f64)> = levels
                .into_iter()
                .map(|((r, t), vs)| {
                    (
                        f64::from_bits(r),
                        f64::from_bits(t),
                        vs.iter().sum::<f64>() / vs.len() as f64,
                    )
                })
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
            Curve { metric, points }
        })
        .collect()
}

/// Camera-drop configurations (radar axes) with the averaged metrics of
/// each, in label order.
pub fn drop_axes(reports: &[(String, EvalReport)]) -> Vec<(String, BTreeMap<String, f64>)> {
    let mut acc: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    for (_, r) in reports {
        let p = &r.perturbation;
        let axis = if p.kind == "camera_drop" {
            let ids: Vec<String> = p.dropped_cameras.iter().map(usize::to_string).collect();
            format!("cams {}", ids.join(","))
        } else if let Some(n) = p.kind.strip_prefix("camera_drop_random:") {
            format!("random {n}")
        } else {
            continue;
        };
        for (metric, v) in curve_metrics(r) {
            acc.entry(axis.clone()).or_default().entry(metric).or_default().push(v);
        }
    }
    acc.into_iter()
        .map(|(axis, metrics)| {
            let means = metrics
                .into_iter()
                .map(|(m, vs)| (m, vs.iter().sum::<f64>() / vs.len() as f64))
                .collect();
            (axis, means)
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f5aff", "#ff8c00", "#00b3b3", "#c0187a", "#2a9d3a", "#7a4bd1"];

fn svg_header(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of one curve against the noise-level index; ticks name
/// both sigmas.
pub fn curve_svg(c: &Curve) -> String {
    let (w, h, m) = (480.0, 320.0, 50.0);
    let mut s = svg_header(w, h);
    let n = c.points.len();
    let ymax = c.points.iter().map(|p| p.2).fold(0.0f64, f64::max).max(1e-9) * 1.1;
    let x = |i: usize| {
        m + if n > 1 {
            i as f64 * (w - 2.0 * m) / (n - 1) as f64
        } else {
            (w - 2.0 * m) / 2.0
        }
    };
    let y = |v: f64| h - m - v / ymax * (h - 2.0 * m);
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"black\"/>",
        h - m,
        w - m,
        h - m,
        h - m
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" font-size=\"14\" text-anchor=\"middle\">{} vs extrinsic noise</text>",
        w / 2.0,
        escape(&c.metric)
    );
    let _ = writeln!(
        s,
        "<text x=\"12\" y=\"{m}\" font-size=\"11\">{ymax:.3}</text>\n<text x=\"12\" y=\"{}\" font-size=\"11\">0</text>",
        h - m
    );
    let pts: Vec<String> = c
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| format!("{:.2},{:.2}", x(i), y(p.2)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
        PALETTE[0],
        pts.join(" ")
    );
    for (i, p) in c.points.iter().enumerate() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\"/>\n<text x=\"{:.2}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}/{}</text>",
            x(i),
            y(p.2),
            PALETTE[0],
            x(i),
            h - m + 16.0,
            p.0,
            p.1
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">sigma_rot (rad) / sigma_trans (m)</text>",
        w / 2.0,
        h - 8.0
    );
    s.push_str("</svg>\n");
    s
}

/// Radar chart with one axis per drop configuration and one polygon per
/// metric, radius scaled to the largest value.
pub fn radar_svg(axes: &[(String, BTreeMap<String, f64>)]) -> String {
    let (w, h) = (420.0, 420.0);
    let (cx, cy, rad) = (w / 2.0, h / 2.0, 150.0);
    let mut s = svg_header(w, h);
    let n = axes.len().max(1);
    let angle = |i: usize| -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / n as f64;
    let rmax = axes
        .iter()
        .flat_map(|(_, m)| m.values().copied())
        .fold(0.0f64, f64::max)
        .max(1e-9);
    for (i, (name, _)) in axes.iter().enumerate() {
        let (ex, ey) = (cx + rad * angle(i).cos(), cy + rad * angle(i).sin());
        let _ = writeln!(
            s,
            "<line x1=\"{cx}\" y1=\"{cy}\" x2=\"{ex:.2}\" y2=\"{ey:.2}\" stroke=\"#999\"/>\n<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            cx + (rad + 18.0) * angle(i).cos(),
            cy + (rad + 18.0) * angle(i).sin(),
            escape(name)
        );
    }
    let mut metrics: Vec<&String> = axes.iter().flat_map(|(_, m)| m.keys()).collect();
    metrics.sort();
    metrics.dedup();
    for (k, metric) in metrics.iter().enumerate() {
        let pts: Vec<String> = axes
            .iter()
            .enumerate()
            .map(|(i, (_, m))| {
                let r = m.get(*metric).copied().unwrap_or(0.0) / rmax * rad;
                format!("{:.2},{:.2}", cx + r * angle(i).cos(), cy + r * angle(i).sin())
            })
            .collect();
        let color = PALETTE[k % PALETTE.len()];
        let _ = writeln!(
            s,
            "<polygon fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n<text x=\"10\" y=\"{}\" font-size=\"11\" fill=\"{color}\">{}</text>",
            pts.join(" "),
            20.0 + 14.0 * k as f64,
            escape(metric)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn write_file(path: &Path, contents: &str) -> Result<PathBuf> {
    fs::write(path, contents).map_err(io_err(path))?;
    Ok(path.to_path_buf())
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect()
}

/// Renders every figure the reports support into `out` and returns the
/// written paths. An empty report list writes nothing.
pub fn plot_reports(reports: &[(String, EvalReport)], out: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Ok(vec![]);
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut files = Vec::new();
    let curves = noise_curves(reports);
    if !curves.is_empty() {
        let mut table = String::from("metric,sigma_rot,sigma_trans,value\n");
        for c in &curves {
            files.push(write_file(
                &out.join(format!("noise_{}.svg", file_safe(&c.metric))),
                &curve_svg(c),
            )?);
            for p in &c.points {
                let _ = writeln!(table, "{},{},{},{}", c.metric, p.0, p.1, p.2);
            }
        }
        files.push(write_file(&out.join("noise_curves.csv"), &table)?);
    }
    let axes = drop_axes(reports);
    if !axes.is_empty() {
        files.push(write_file(&out.join("drop_radar.svg"), &radar_svg(&axes))?);
    }
    Ok(files)
}

/// RGB image, row-major, 3 bytes per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        Self {
            width,
            height,
            rgb: color.repeat(width * height),
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let i = 3 * (y as usize * self.width + x as usize);
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        loop {
            self.put(x, y, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(io_err(path))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let encode_err = |e: png::EncodingError| HarnessError::Parse {
            what: format!("png output {}", path.display()),
            reason: e.to_string(),
        };
        let mut w = enc.write_header().map_err(encode_err)?;
        w.write_image_data(&self.rgb).map_err(encode_err)
    }
}

/// Fixed overlay color of a BEV channel.
pub fn channel_color(name: &str, channel: usize) -> [u8; 3] {
    match channel {
        BEV_DRIVABLE => DRIVABLE_RGB,
        BEV_LANE => LANE_RGB,
        _ if VEHICLE_CLASSES.contains(&name) => VEHICLE_RGB,
        _ => OTHER_OBJECT_RGB,
    }
}

/// Paints `C x S x S` BEV values (labels or probabilities) at `scale`
/// pixels per cell. A cell takes the color of the last channel at or above
/// `threshold`, so objects are drawn over lanes over drivable area.
pub fn bev_overlay(values: &[f64], names: &[String], size: usize, threshold: f64, scale: usize) -> Image {
    let channels = names.len();
    assert_eq!(
        values.len(),
        channels * size * size,
        "BEV map does not match {channels} channels of {size}x{size}"
    );
    let mut img = Image::filled(size * scale, size * scale, BACKGROUND_RGB);
    for (ch, name) in names.iter().enumerate() {
        let color = channel_color(name, ch);
        for row in 0..size {
            for col in 0..size {
                if values[ch * size * size + row * size + col] >= threshold {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            img.put((col * scale + dx) as i64, (row * scale + dy) as i64, color);
                        }
                    }
                }
            }
        }
    }
    img
}

/// Draws box footprints on an image covering `[-range, range]^2`, up being
/// +x and left being +y.
pub fn draw_boxes(img: &mut Image, range: f64, boxes: &[Box3D], color: [u8; 3]) {
    let (w, h) = (img.width as f64, img.height as f64);
    let px = |x: f64, y: f64| -> (i64, i64) {
        let u = (range - y) / (2.0 * range) * w;
        let v = (range - x) / (2.0 * range) * h;
        (u.floor() as i64, v.floor() as i64)
    };
    for b in boxes {
        let (c, s) = (b.yaw.cos(), b.yaw.sin());
        let (hl, hw) = (b.size[1] / 2.0, b.size[0] / 2.0);
        let corners: Vec<(i64, i64)> = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
            .iter()
            .map(|&(a, bb)| px(b.center[0] + a * c - bb * s, b.center[1] + a * s + bb * c))
            .collect();
        for i in 0..4 {
            img.line(corners[i], corners[(i + 1) % 4], color);
        }
        // Heading tick from the center to the front edge.
        img.line(
            px(b.center[0], b.center[1]),
            px(b.center[0] + hl * c, b.center[1] + hl * s),
            color,
        );
    }
}

/// Ground truth (left) and prediction (right) in BEV for one sample: BEV
/// maps when the task has them, box footprints when it detects. Predicted
/// boxes below `min_score` are omitted.
pub fn sample_overlay(
    sample: &TrainingSample,
    pred: &Prediction,
    bev_names: &[String],
    range: f64,
    min_score: f64,
    scale: usize,
) -> Image {
    let size = sample.dims.bev_size;
    let side = size * scale;
    let panel = |maps: Option<Vec<f64>>| match maps {
        Some(v) if !bev_names.is_empty() => bev_overlay(&v, bev_names, size, 0.5, scale),
        _ => Image::filled(side, side, BACKGROUND_RGB),
    };
    let has_bev = sample.dims.bev_channels > 0 && !bev_names.is_empty();
    let mut gt = panel(has_bev.then(|| sample.bev.iter().map(|&b| f64::from(b)).collect()));
    let mut pr = panel(if has_bev { pred.bev.clone() } else { None });
    draw_boxes(&mut gt, range, &sample.boxes, GT_BOX_RGB);
    let kept: Vec<Box3D> = pred
        .detections
        .iter()
        .filter(|d| d.score >= min_score)
        .map(|d| d.bbox)
        .collect();
    draw_boxes(&mut pr, range, &kept, PRED_BOX_RGB);
    let gap = 4;
    let mut out = Image::filled(2 * side + gap, side, [255, 255, 255]);
    for y in 0..side {
        for x in 0..side {
            out.put(x as i64, y as i64, gt.pixel(x, y));
            out.put((side + gap + x) as i64, y as i64, pr.pixel(x, y));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_colors_are_fixed_and_distinct() {
        let names: Vec<String> = ["drivable", "lane", "car", "pedestrian"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut v = vec![0.0; 4 * 4];
        // Cells as (row, col): drivable (0, 0), lane (0, 1), car on the
        // whole bottom row with drivable area under (1, 1).
        v[0] = 1.0;
        v[4 + 1] = 1.0;
        v[8 + 2] = 1.0;
        v[8 + 3] = 1.0;
        v[3] = 1.0;
        let img = bev_overlay(&v, &names, 2, 0.5, 1);
        assert_eq!(img.pixel(0, 0), DRIVABLE_RGB);
        assert_eq!(img.pixel(1, 0), LANE_RGB);
        assert_eq!(img.pixel(0, 1), VEHICLE_RGB);
        assert_eq!(img.pixel(1, 1), VEHICLE_RGB);
        assert_ne!(DRIVABLE_RGB, LANE_RGB);
        assert_ne!(LANE_RGB, VEHICLE_RGB);
        assert_ne!(DRIVABLE_RGB, VEHICLE_RGB);
    }
}

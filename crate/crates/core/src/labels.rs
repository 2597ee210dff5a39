//! Supervision targets: image-plane semantic masks, binned depth, the BEV
//! occupancy grid, and detection boxes.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject_ground, render_depth, Camera, Z_NEAR};
use crate::plane::{convex_hull, point_in_convex, Point2};
use crate::scene::{Box3D, Scene};

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("invalid label config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Detection,
    Bev,
    Joint,
}

impl Task {
    pub fn has_detection(self) -> bool {
        matches!(self, Task::Detection | Task::Joint)
    }

    pub fn has_bev(self) -> bool {
        matches!(self, Task::Bev | Task::Joint)
    }
}

/// BEV channel order: drivable, lane, then one channel per object class.
pub const BEV_DRIVABLE: usize = 0;
pub const BEV_LANE: usize = 1;
pub const BEV_FIRST_OBJECT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub task: Task,
    pub num_object_classes: usize,
    pub num_depth_bins: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    /// Side of the square BEV grid in cells.
    pub bev_size: usize,
    pub bev_cell: f64,
    /// Feature stride of the backbone; labels live on this grid.
    pub stride: usize,
    /// Half-width of the perception range used to clip drivable labels.
    pub range: f64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            task: Task::Detection,
            num_object_classes: 3,
            num_depth_bins: 32,
            depth_min: 1.0,
            depth_max: 30.0,
            bev_size: 40,
            bev_cell: 1.0,
            stride: 16,
            range: 20.0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<(), LabelError> {
        let bad = |m: String| Err(LabelError::Config(m));
        if self.num_depth_bins < 2 {
            return bad(format!("need at least 2 depth bins, got {}", self.num_depth_bins));
        }
        if !(self.depth_min > 0.0 && self.depth_max > self.depth_min) {
            return bad(format!(
                "depth range ({}, {}) must satisfy 0 < min < max",
                self.depth_min, self.depth_max
            ));
        }
        if self.bev_size as f64 * self.bev_cell < 2.0 * self.range - 1e-9 {
            return bad(format!(
                "BEV grid {}x{} m does not cover the +-{} m range",
                self.bev_size, self.bev_cell, self.range
            ));
        }
        if self.stride == 0 || self.num_object_classes == 0 {
            return bad("stride and class count must be positive".into());
        }
        Ok(())
    }

    /// Semantic channels: object classes for detection; drivable area
    /// followed by object classes otherwise.
    pub fn semantic_channels(&self) -> usize {
        match self.task {
            Task::Detection => self.num_object_classes,
            Task::Bev | Task::Joint => self.num_object_classes + 1,
        }
    }

    fn object_channel_offset(&self) -> usize {
        self.semantic_channels() - self.num_object_classes
    }

    pub fn bev_channels(&self) -> usize {
        BEV_FIRST_OBJECT + self.num_object_classes
    }

    pub fn depth_bin_width(&self) -> f64 {
        (self.depth_max - self.depth_min) / self.num_depth_bins as f64
    }

    pub fn depth_bin(&self, depth: f64) -> usize {
        let raw = ((depth - self.depth_min) / self.depth_bin_width()).floor();
        raw.clamp(0.0, (self.num_depth_bins - 1) as f64) as usize
    }

    /// Center of depth bin `k` in meters.
    pub fn bin_center(&self, k: usize) -> f64 {
        self.depth_min + (k as f64 + 0.5) * self.depth_bin_width()
    }

    /// Metric `(x, y)` of the center of BEV cell `(row, col)`. Rows run from
    /// +x (ahead) to -x, columns from +y (left) to -y; the ego sits at the
    /// grid center.
    pub fn bev_cell_center(&self, row: usize, col: usize) -> Point2 {
        let half = self.bev_size as f64 * self.bev_cell / 2.0;
        [
            half - (row as f64 + 0.5) * self.bev_cell,
            half - (col as f64 + 0.5) * self.bev_cell,
        ]
    }
}

/// Label-grid size `(h, w)` for a camera of the given image size.
pub fn label_size(image_height: usize, image_width: usize, stride: usize) -> (usize, usize) {
    (image_height / stride, image_width / stride)
}

/// Image-plane polygon covered by a box: the convex hull of its edges clipped
/// to the near plane and projected. Empty when the box is entirely behind.
pub fn projected_hull(b: &Box3D, cam: &Camera, z_near: f64) -> Vec<Point2> {
    let corners = b.corners().map(|c| cam.extrinsics.to_camera(&c));
    let mut pts: Vec<Point2> = Vec::with_capacity(24);
    let k = &cam.intrinsics;
    let mut push = |p: Vector3<f64>| pts.push([k.cx + k.fx * p.x / p.z, k.cy + k.fy * p.y / p.z]);
    for (i, j) in Box3D::EDGES {
        let (a, b) = (corners[i], corners[j]);
        match (a.z >= z_near, b.z >= z_near) {
            (true, true) => {
                push(a);
                push(b);
            }
            (true, false) | (false, true) => {
                let (inside, outside) = if a.z >= z_near { (a, b) } else { (b, a) };
                let s = (z_near - inside.z) / (outside.z - inside.z);
                push(inside);
                push(inside + (outside - inside) * s);
            }
            (false, false) => {}
        }
    }
    convex_hull(&pts)
}

/// `N x C_s x H x W` binary masks at label resolution.
pub fn make_semantic_labels(scene: &Scene, cfg: &LabelConfig) -> Vec<u8> {
    let (img_h, img_w) = scene.rig.image_size();
    let (h, w) = label_size(img_h, img_w, cfg.stride);
    let c_s = cfg.semantic_channels();
    let obj_off = cfg.object_channel_offset();
    let plane = h * w;
    let mut out = vec![0u8; scene.rig.len() * c_s * plane];
    let s = cfg.stride as f64;
    for (view, cam) in scene.rig.cameras.iter().enumerate() {
        let base = view * c_s * plane;
        if cfg.task.has_bev() {
            for row in 0..h {
                for col in 0..w {
                    let (u, v) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
                    if let Some(g) = backproject_ground(u, v, cam, 0.0) {
                        if g.x.abs() <= cfg.range && g.y.abs() <= cfg.range && scene.is_drivable([g.x, g.y]) {
                            out[base + row * w + col] = 1;
                        }
                    }
                }
            }
        }
        for b in &scene.boxes {
            let hull = projected_hull(b, cam, Z_NEAR);
            if hull.len() < 3 {
                continue;
            }
            let ch = obj_off + b.class_id;
            let (lo_u, hi_u, lo_v, hi_v) = hull.iter().fold(
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), p| (a.min(p[0]), b.max(p[0]), c.min(p[1]), d.max(p[1])),
            );
            let col_range = cell_span(lo_u, hi_u, s, w);
            let row_range = cell_span(lo_v, hi_v, s, h);
            for row in row_range {
                for col in col_range.clone() {
                    let p = [(col as f64 + 0.5) * s, (row as f64 + 0.5) * s];
                    if point_in_convex(p, &hull) {
                        out[base + ch * plane + row * w + col] = 1;
                    }
                }
            }
        }
    }
    out
}

/// Cells whose centers may fall inside `[lo, hi]` on a grid of pitch `s`.
fn cell_span(lo: f64, hi: f64, s: f64, n: usize) -> std::ops::Range<usize> {
    if hi < 0.0 || lo > n as f64 * s {
        return 0..0;
    }
    let first = ((lo / s) - 0.5).floor().max(0.0) as usize;
    let last = (((hi / s) - 0.5).ceil().max(0.0) as usize + 1).min(n);
    first.min(n)..last
}

/// Binned depth targets and their validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLabels {
    /// `N x C_d x H x W` one-hot per valid pixel.
    pub one_hot: Vec<u8>,
    /// `N x H x W`.
    pub mask: Vec<u8>,
}

pub fn make_depth_labels(scene: &Scene, cfg: &LabelConfig) -> DepthLabels {
    let (img_h, img_w) = scene.rig.image_size();
    let (h, w) = label_size(img_h, img_w, cfg.stride);
    let c_d = cfg.num_depth_bins;
    let plane = h * w;
    let n = scene.rig.len();
    let mut one_hot = vec![0u8; n * c_d * plane];
    let mut mask = vec![0u8; n * plane];
    let points = scene.point_vectors();
    for (view, cam) in scene.rig.cameras.iter().enumerate() {
        let coarse = Camera {
            intrinsics: cam.intrinsics.downsampled(cfg.stride),
            extrinsics: cam.extrinsics,
        };
        let depth = render_depth(&points, &coarse, Z_NEAR);
        for px in 0..plane {
            if depth.valid[px] {
                mask[view * plane + px] = 1;
                let bin = cfg.depth_bin(depth.depth[px]);
                one_hot[(view * c_d + bin) * plane + px] = 1;
            }
        }
    }
    DepthLabels { one_hot, mask }
}

/// `C_b x H_b x W_b` occupancy grid with the ego at the center.
pub fn make_bev_gt(scene: &Scene, cfg: &LabelConfig) -> Vec<u8> {
    let n = cfg.bev_size;
    let plane = n * n;
    let mut out = vec![0u8; cfg.bev_channels() * plane];
    for poly in &scene.drivable_polygons {
        fill_polygon(&mut out[BEV_DRIVABLE * plane..(BEV_DRIVABLE + 1) * plane], poly, cfg);
    }
    for poly in &scene.lane_polygons {
        fill_polygon(&mut out[BEV_LANE * plane..(BEV_LANE + 1) * plane], poly, cfg);
    }
    for b in &scene.boxes {
        let ch = BEV_FIRST_OBJECT + b.class_id;
        fill_box(&mut out[ch * plane..(ch + 1) * plane], b, cfg);
    }
    out
}

/// Column indices whose cell-center `y` lies in `[y_lo, y_hi]`.
fn cols_in(y_lo: f64, y_hi: f64, cfg: &LabelConfig) -> std::ops::RangeInclusive<usize> {
    let n = cfg.bev_size;
    let half = n as f64 * cfg.bev_cell / 2.0;
    // y = half - (c + 0.5) * cell  =>  c = (half - y) / cell - 0.5
    let c_lo = ((half - y_hi) / cfg.bev_cell - 0.5).ceil().max(0.0);
    let c_hi = ((half - y_lo) / cfg.bev_cell - 0.5).floor().min(n as f64 - 1.0);
    if c_lo > c_hi {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    c_lo as usize..=c_hi as usize
}

/// Scanline fill of a rotated rectangle: for each row the inside set is the
/// intersection of two slabs, solved for `y` directly. Cells in
/// the padded span are confirmed with the exact inequalities.
fn fill_box(grid: &mut [u8], b: &Box3D, cfg: &LabelConfig) {
    let n = cfg.bev_size;
    let (s, c) = b.yaw.sin_cos();
    let (hl, hw) = (b.size[1] / 2.0, b.size[0] / 2.0);
    let (cx, cy) = (b.center[0], b.center[1]);
    let inside = |p: Point2| {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        (dx * c + dy * s).abs() <= hl && (-dx * s + dy * c).abs() <= hw
    };
    for row in 0..n {
        let x = cfg.bev_cell_center(row, 0)[0];
        let dx = x - cx;
        // along-heading: dx*c + dy*s, lateral: -dx*s + dy*c
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        let mut empty = false;
        for (a, k, half) in [(dx * c, s, hl), (-dx * s, c, hw)] {
            if k.abs() < 1e-12 {
                empty |= a.abs() > half + 1e-9;
                continue;
            }
            let (y0, y1) = ((-half - a) / k, (half - a) / k);
            lo = lo.max(y0.min(y1) + cy);
            hi = hi.min(y0.max(y1) + cy);
        }
        if empty || lo > hi + cfg.bev_cell {
            continue;
        }
        for col in cols_in(lo - cfg.bev_cell, hi + cfg.bev_cell, cfg) {
            if inside(cfg.bev_cell_center(row, col)) {
                grid[row * n + col] = 1;
            }
        }
    }
}

/// Even-odd scanline fill: the crossings of the row line with the polygon
/// edges are sorted and cells between consecutive pairs are filled.
fn fill_polygon(grid: &mut [u8], poly: &[Point2], cfg: &LabelConfig) {
    let n = cfg.bev_size;
    let m = poly.len();
    if m < 3 {
        return;
    }
    let mut crossings: Vec<f64> = Vec::with_capacity(m);
    for row in 0..n {
        let x = cfg.bev_cell_center(row, 0)[0];
        crossings.clear();
        let mut j = m - 1;
        for i in 0..m {
            let (a, b) = (poly[i], poly[j]);
            if (a[0] > x) != (b[0] > x) {
                crossings.push(a[1] + (x - a[0]) * (b[1] - a[1]) / (b[0] - a[0]));
            }
            j = i;
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            for col in cols_in(pair[0], pair[1], cfg) {
                // half-open on the upper end
                if cfg.bev_cell_center(row, col)[1] < pair[1] {
                    grid[row * n + col] = 1;
                }
            }
        }
    }
}

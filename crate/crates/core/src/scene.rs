//! Procedural driving scenes: boxes, road layout, a sparse point cloud and a
//! ring of surround cameras, plus a ray-cast renderer for the camera views.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{pixel_ray, Camera, CameraRig, Extrinsics, GeometryError, Intrinsics, Z_NEAR};
use crate::plane::{convex_overlap, point_in_polygon, rotated_rect, Point2};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("box placement failed after {attempts} attempts ({placed} of {wanted} boxes placed)")]
    Generation {
        attempts: usize,
        placed: usize,
        wanted: usize,
    },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// An oriented 3D box in the ego frame. `size` is `(w, l, h)` with the length
/// running along the heading `yaw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub attribute_id: usize,
}

impl Box3D {
    pub fn bev_corners(&self) -> [Point2; 4] {
        rotated_rect([self.center[0], self.center[1]], self.size[1], self.size[0], self.yaw)
    }

    /// The eight corners, bottom face first (counter-clockwise), then top.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let bev = self.bev_corners();
        let z0 = self.center[2] - self.size[2] / 2.0;
        let z1 = self.center[2] + self.size[2] / 2.0;
        let mut out = [Vector3::zeros(); 8];
        for (i, c) in bev.iter().enumerate() {
            out[i] = Vector3::new(c[0], c[1], z0);
            out[i + 4] = Vector3::new(c[0], c[1], z1);
        }
        out
    }

    /// Index pairs into [`Box3D::corners`] forming the twelve edges.
    pub const EDGES: [(usize, usize); 12] = [
        (0, 1),
        (1, 2),
        (2, 3),
        (3, 0),
        (4, 5),
        (5, 6),
        (6, 7),
        (7, 4),
        (0, 4),
        (1, 5),
        (2, 6),
        (3, 7),
    ];

    fn to_local(self, p: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.yaw.sin_cos();
        let d = p - Vector3::from(self.center);
        Vector3::new(c * d.x + s * d.y, -s * d.x + c * d.y, d.z)
    }

    fn half_extents(&self) -> Vector3<f64> {
        Vector3::new(self.size[1] / 2.0, self.size[0] / 2.0, self.size[2] / 2.0)
    }

    /// Distance from `p` to the box surface (zero on the surface).
    pub fn surface_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = self.to_local(p);
        let h = self.half_extents();
        let d = Vector3::new(q.x.abs() - h.x, q.y.abs() - h.y, q.z.abs() - h.z);
        let outside = Vector3::new(d.x.max(0.0), d.y.max(0.0), d.z.max(0.0)).norm();
        let inside = d.x.max(d.y).max(d.z).min(0.0);
        (outside + inside).abs()
    }

    /// Slab test. Returns the entry parameter and the local axis (0 = x,
    /// 1 = y, 2 = z) of the face that was hit.
    pub fn ray_hit(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, t_min: f64) -> Option<(f64, usize)> {
        let (s, c) = self.yaw.sin_cos();
        let o = self.to_local(origin);
        let d = Vector3::new(c * dir.x + s * dir.y, -s * dir.x + c * dir.y, dir.z);
        let h = self.half_extents();
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        let mut axis = 0;
        for k in 0..3 {
            if d[k].abs() < 1e-15 {
                if o[k].abs() > h[k] {
                    return None;
                }
                continue;
            }
            let a = (-h[k] - o[k]) / d[k];
            let b = (h[k] - o[k]) / d[k];
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo > t0 {
                t0 = lo;
                axis = k;
            }
            t1 = t1.min(hi);
        }
        (t0 <= t1 && t0 > t_min).then_some((t0, axis))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    /// Nominal `(w, l, h)`.
    pub size: [f64; 3],
    /// Fill color in linear RGB.
    pub color: [f64; 3],
    /// Speed range for the moving attribute, m/s.
    pub speed: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub num_cameras: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub camera_pitch_deg: f64,
    pub mount_radius: f64,
    /// Half-width of the square perception range in x and y, meters.
    pub range: f64,
    pub z_range: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Boxes are kept at least this far from the ego origin.
    pub min_box_distance: f64,
    pub classes: Vec<ClassSpec>,
    pub num_attributes: usize,
    pub num_roads: [usize; 2],
    pub road_width: [f64; 2],
    pub lane_width: f64,
    pub num_points: usize,
    pub box_point_fraction: f64,
    pub max_attempts: usize,
    /// Amplitude of the per-scene texture noise on foreground surfaces.
    pub texture_noise: f64,
    /// Distance over which surface colors fade toward the haze color.
    pub haze_distance: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_cameras: 6,
            image_height: 64,
            image_width: 176,
            hfov_deg: 75.0,
            camera_height: 1.6,
            camera_pitch_deg: 4.0,
            mount_radius: 0.8,
            range: 20.0,
            z_range: 10.0,
            min_boxes: 2,
            max_boxes: 6,
            min_box_distance: 4.0,
            classes: default_classes(),
            num_attributes: 2,
            num_roads: [1, 2],
            road_width: [7.0, 12.0],
            lane_width: 0.4,
            num_points: 2000,
            box_point_fraction: 0.7,
            max_attempts: 2000,
            texture_noise: 0.04,
            haze_distance: 60.0,
        }
    }
}

fn default_classes() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "car".into(),
            size: [1.9, 4.4, 1.6],
            color: [0.85, 0.15, 0.12],
            speed: [2.0, 8.0],
        },
        ClassSpec {
            name: "truck".into(),
            size: [2.5, 7.0, 3.0],
            color: [0.15, 0.35, 0.9],
            speed: [2.0, 6.0],
        },
        ClassSpec {
            name: "pedestrian".into(),
            size: [0.8, 0.8, 1.8],
            color: [0.95, 0.85, 0.1],
            speed: [0.5, 2.0],
        },
    ]
}

impl SceneConfig {
    /// Full-scale setting: 512x1408 views and a 61.2 m range.
    pub fn full_scale() -> Self {
        Self {
            image_height: 512,
            image_width: 1408,
            range: 61.2,
            max_boxes: 30,
            num_points: 30000,
            haze_distance: 180.0,
            ..Self::default()
        }
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::Config(m.to_string()));
        if self.num_cameras == 0 {
            return bad("num_cameras must be >= 1");
        }
        if !(self.range > 0.0 && self.z_range > 0.0) {
            return bad("range and z_range must be positive");
        }
        if self.min_boxes > self.max_boxes {
            return bad("min_boxes exceeds max_boxes");
        }
        if self.classes.is_empty() || self.num_attributes == 0 {
            return bad("need at least one class and one attribute");
        }
        if self.image_height == 0 || self.image_width == 0 {
            return bad("image size must be positive");
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return bad("hfov_deg must lie in (0, 180)");
        }
        if !(0.0..=1.0).contains(&self.box_point_fraction) {
            return bad("box_point_fraction must lie in [0, 1]");
        }
        if self.num_roads[0] > self.num_roads[1] || self.road_width[0] > self.road_width[1] {
            return bad("road ranges must be ordered");
        }
        Ok(())
    }

    /// Ring of cameras evenly spaced in yaw, all sharing one intrinsic model.
    pub fn build_rig(&self) -> Result<CameraRig, SceneError> {
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        let fx = (w / 2.0) / (self.hfov_deg.to_radians() / 2.0).tan();
        let k = Intrinsics::new(fx, fx, w / 2.0, h / 2.0, self.image_width, self.image_height)?;
        let pitch = self.camera_pitch_deg.to_radians();
        let cams = (0..self.num_cameras)
            .map(|i| {
                let yaw = 2.0 * PI * i as f64 / self.num_cameras as f64;
                let center = Vector3::new(
                    self.mount_radius * yaw.cos(),
                    self.mount_radius * yaw.sin(),
                    self.camera_height,
                );
                Camera {
                    intrinsics: k,
                    extrinsics: Extrinsics::looking(yaw, pitch, center),
                }
            })
            .collect();
        Ok(CameraRig::new(cams)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub boxes: Vec<Box3D>,
    pub drivable_polygons: Vec<Vec<Point2>>,
    pub lane_polygons: Vec<Vec<Point2>>,
    pub points: Vec<[f64; 3]>,
    pub rig: CameraRig,
    pub seed: u64,
}

impl Scene {
    pub fn point_vectors(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| Vector3::from(*p)).collect()
    }

    pub fn is_drivable(&self, p: Point2) -> bool {
        self.drivable_polygons.iter().any(|poly| point_in_polygon(p, poly))
    }

    pub fn is_lane(&self, p: Point2) -> bool {
        self.lane_polygons.iter().any(|poly| point_in_polygon(p, poly))
    }
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rig = cfg.build_rig()?;

    let n_roads = rng.random_range(cfg.num_roads[0]..=cfg.num_roads[1]);
    let mut drivable_polygons = Vec::with_capacity(n_roads);
    let mut lane_polygons = Vec::with_capacity(n_roads);
    for _ in 0..n_roads {
        let heading = rng.random_range(0.0..PI);
        let offset = rng.random_range(-5.0..5.0);
        let width = rng.random_range(cfg.road_width[0]..=cfg.road_width[1]);
        let center = [-heading.sin() * offset, heading.cos() * offset];
        let length = 3.0 * cfg.range;
        drivable_polygons.push(rotated_rect(center, length, width, heading).to_vec());
        lane_polygons.push(rotated_rect(center, length, cfg.lane_width, heading).to_vec());
    }

    let n_boxes = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(n_boxes);
    let ego = rotated_rect(
        [0.0, 0.0],
        2.0 * cfg.mount_radius + 1.0,
        2.0 * cfg.mount_radius + 1.0,
        0.0,
    );
    let mut attempts = 0;
    while boxes.len() < n_boxes {
        if attempts >= cfg.max_attempts {
            return Err(SceneError::Generation {
                attempts,
                placed: boxes.len(),
                wanted: n_boxes,
            });
        }
        attempts += 1;
        let class_id = rng.random_range(0..cfg.num_classes());
        let spec = &cfg.classes[class_id];
        let size = spec.size.map(|s| s * rng.random_range(0.9..1.1));
        let margin = 0.5 * size[0].max(size[1]);
        let lim = cfg.range - margin;
        let x = rng.random_range(-lim..lim);
        let y = rng.random_range(-lim..lim);
        let yaw = PI - 2.0 * PI * rng.random::<f64>();
        let attribute_id = rng.random_range(0..cfg.num_attributes);
        let speed = if attribute_id == 0 {
            rng.random_range(spec.speed[0]..=spec.speed[1])
        } else {
            0.0
        };
        if x.hypot(y) < cfg.min_box_distance {
            continue;
        }
        let candidate = Box3D {
            center: [x, y, size[2] / 2.0],
            size,
            yaw,
            velocity: [speed * yaw.cos(), speed * yaw.sin()],
            class_id,
            attribute_id,
        };
        let fp = candidate.bev_corners();
        if convex_overlap(&fp, &ego) || boxes.iter().any(|b| convex_overlap(&fp, &b.bev_corners())) {
            continue;
        }
        boxes.push(candidate);
    }

    let points = sample_points(cfg, &boxes, &mut rng);
    Ok(Scene {
        boxes,
        drivable_polygons,
        lane_polygons,
        points,
        rig,
        seed,
    })
}

fn sample_points(cfg: &SceneConfig, boxes: &[Box3D], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let n_box = if boxes.is_empty() {
        0
    } else {
        (cfg.num_points as f64 * cfg.box_point_fraction).round() as usize
    };
    // Sides and top, area weighted; the bottom face rests on the ground.
    let areas: Vec<[f64; 3]> = boxes
        .iter()
        .map(|b| {
            let [w, l, h] = b.size;
            [2.0 * l * h, 2.0 * w * h, w * l]
        })
        .collect();
    let total: f64 = areas.iter().map(|a| a.iter().sum::<f64>()).sum();
    let mut pts = Vec::with_capacity(cfg.num_points);
    for _ in 0..n_box {
        let mut pick = rng.random::<f64>() * total;
        let mut chosen = (boxes.len() - 1, 2);
        'outer: for (i, a) in areas.iter().enumerate() {
            for (k, area) in a.iter().enumerate() {
                if pick < *area {
                    chosen = (i, k);
                    break 'outer;
                }
                pick -= area;
            }
        }
        let b = &boxes[chosen.0];
        let [w, l, h] = b.size;
        let (lx, ly, lz) = match chosen.1 {
            0 => (
                rng.random_range(-l / 2.0..l / 2.0),
                if rng.random::<bool>() { w / 2.0 } else { -w / 2.0 },
                rng.random_range(-h / 2.0..h / 2.0),
            ),
            1 => (
                if rng.random::<bool>() { l / 2.0 } else { -l / 2.0 },
                rng.random_range(-w / 2.0..w / 2.0),
                rng.random_range(-h / 2.0..h / 2.0),
            ),
            _ => (
                rng.random_range(-l / 2.0..l / 2.0),
                rng.random_range(-w / 2.0..w / 2.0),
                h / 2.0,
            ),
        };
        let (s, c) = b.yaw.sin_cos();
        pts.push([
            b.center[0] + c * lx - s * ly,
            b.center[1] + s * lx + c * ly,
            b.center[2] + lz,
        ]);
    }
    while pts.len() < cfg.num_points {
        pts.push([
            rng.random_range(-cfg.range..cfg.range),
            rng.random_range(-cfg.range..cfg.range),
            0.0,
        ]);
    }
    pts
}

const SKY: [f64; 3] = [0.55, 0.7, 0.9];
const GROUND: [f64; 3] = [0.35, 0.45, 0.3];
const ROAD: [f64; 3] = [0.22, 0.22, 0.24];
const LANE: [f64; 3] = [0.92, 0.92, 0.88];
const HAZE: [f64; 3] = [0.6, 0.65, 0.7];

/// What a rendered pixel shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surface {
    Sky,
    Ground,
    Drivable,
    Lane,
    /// Index into `scene.boxes`.
    Box(usize),
}

impl Surface {
    pub fn is_background(self) -> bool {
        matches!(self, Surface::Sky | Surface::Ground)
    }
}

/// Rendered views plus the per-pixel hit record.
#[derive(Debug, Clone)]
pub struct Rendering {
    /// `N x 3 x H x W`, values in `[0, 1]`.
    pub images: Vec<f32>,
    /// `N x H x W` ray depth of the visible surface, `f64::INFINITY` for sky.
    pub depth: Vec<f64>,
    pub surfaces: Vec<Surface>,
    pub num_views: usize,
    pub height: usize,
    pub width: usize,
}

fn background_color(surface: Surface) -> [f64; 3] {
    match surface {
        Surface::Sky => SKY,
        _ => GROUND,
    }
}

/// Renders all views by casting one ray through each pixel center and keeping
/// the nearest surface, so nearer boxes always cover farther ones.
pub fn render_views(scene: &Scene, cfg: &SceneConfig) -> Rendering {
    let n = scene.rig.len();
    let (h, w) = scene.rig.image_size();
    let plane = h * w;
    let mut images = vec![0f32; n * 3 * plane];
    let mut depth = vec![f64::INFINITY; n * plane];
    let mut surfaces = vec![Surface::Sky; n * plane];
    for (view, cam) in scene.rig.cameras.iter().enumerate() {
        let mut noise_rng =
            ChaCha8Rng::seed_from_u64(scene.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(view as u64 + 1)));
        let noise: Vec<f64> = (0..3 * plane)
            .map(|_| cfg.texture_noise * (2.0 * noise_rng.random::<f64>() - 1.0))
            .collect();
        for row in 0..h {
            for col in 0..w {
                let (t, surface) = trace(scene, cam, col as f64 + 0.5, row as f64 + 0.5);
                let color = if surface.is_background() {
                    background_color(surface)
                } else {
                    let base = surface_color(scene, cfg, cam, col as f64 + 0.5, row as f64 + 0.5, surface);
                    let fade = (-t / cfg.haze_distance).exp();
                    let mut c = [0.0; 3];
                    for k in 0..3 {
                        c[k] = fade * base[k] + (1.0 - fade) * HAZE[k] + noise[k * plane + row * w + col];
                    }
                    c
                };
                let px = row * w + col;
                for k in 0..3 {
                    images[(view * 3 + k) * plane + px] = color[k].clamp(0.0, 1.0) as f32;
                }
                depth[view * plane + px] = t;
                surfaces[view * plane + px] = surface;
            }
        }
    }
    Rendering {
        images,
        depth,
        surfaces,
        num_views: n,
        height: h,
        width: w,
    }
}

fn trace(scene: &Scene, cam: &Camera, u: f64, v: f64) -> (f64, Surface) {
    let (origin, dir) = pixel_ray(u, v, cam);
    let mut best = (f64::INFINITY, Surface::Sky);
    if dir.z < -1e-12 {
        let t = -origin.z / dir.z;
        if t > Z_NEAR {
            let g = origin + dir * t;
            let p = [g.x, g.y];
            let s = if scene.is_lane(p) {
                Surface::Lane
            } else if scene.is_drivable(p) {
                Surface::Drivable
            } else {
                Surface::Ground
            };
            best = (t, s);
        }
    }
    for (i, b) in scene.boxes.iter().enumerate() {
        if let Some((t, _)) = b.ray_hit(&origin, &dir, Z_NEAR) {
            if t < best.0 {
                best = (t, Surface::Box(i));
            }
        }
    }
    best
}

fn surface_color(scene: &Scene, cfg: &SceneConfig, cam: &Camera, u: f64, v: f64, surface: Surface) -> [f64; 3] {
    match surface {
        Surface::Lane => LANE,
        Surface::Drivable => ROAD,
        Surface::Box(i) => {
            let b = &scene.boxes[i];
            let (origin, dir) = pixel_ray(u, v, cam);
            let axis = b.ray_hit(&origin, &dir, Z_NEAR).map(|(_, a)| a).unwrap_or(2);
            // Top faces brightest, ends darker than sides.
            let shade = [0.75, 0.9, 1.0][axis];
            let attr = if b.attribute_id == 0 { 1.0 } else { 0.6 };
            cfg.classes[b.class_id].color.map(|c| c * shade * attr)
        }
        Surface::Sky | Surface::Ground => background_color(surface),
    }
}

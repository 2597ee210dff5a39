//! Small 2D polygon toolkit shared by scene generation, label rasterization
//! and the metrics.

pub type Point2 = [f64; 2];

/// Even-odd point-in-polygon test. Points exactly on an edge may fall on
/// either side.
pub fn point_in_polygon(p: Point2, poly: &[Point2]) -> bool {
    let mut inside = false;
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) * (b[0] - a[0]) / (b[1] - a[1]);
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Signed area, positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Point2]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        acc += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * acc
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain. Returns the hull counter-clockwise without
/// repeating the first vertex; collinear points are dropped.
pub fn convex_hull(points: &[Point2]) -> Vec<Point2> {
    let mut pts: Vec<Point2> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Point2> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Point inside (or on the boundary of) a counter-clockwise convex polygon.
pub fn point_in_convex(p: Point2, hull: &[Point2]) -> bool {
    let n = hull.len();
    if n < 3 {
        return false;
    }
    (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0.0)
}

/// Corners of a rectangle of length `l` along heading `yaw` and width `w`,
/// counter-clockwise.
pub fn rotated_rect(center: Point2, l: f64, w: f64, yaw: f64) -> [Point2; 4] {
    let (s, c) = yaw.sin_cos();
    let hl = l / 2.0;
    let hw = w / 2.0;
    let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
    local.map(|[x, y]| [center[0] + c * x - s * y, center[1] + s * x + c * y])
}

/// Separating-axis overlap test for two convex polygons. Touching polygons
/// (zero-area contact) are reported as non-overlapping.
pub fn convex_overlap(a: &[Point2], b: &[Point2]) -> bool {
    for poly in [a, b] {
        let n = poly.len();
        for i in 0..n {
            let p = poly[i];
            let q = poly[(i + 1) % n];
            let axis = [q[1] - p[1], p[0] - q[0]];
            let proj = |v: &Point2| v[0] * axis[0] + v[1] * axis[1];
            let (amin, amax) = a
                .iter()
                .map(proj)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            let (bmin, bmax) = b
                .iter()
                .map(proj)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
            if amax <= bmin || bmax <= amin {
                return false;
            }
        }
    }
    true
}

/// Simple polygon check: no two non-adjacent edges intersect.
pub fn is_simple(poly: &[Point2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let seg_cross = |p1: Point2, p2: Point2, q1: Point2, q2: Point2| {
        let d1 = cross(q1, q2, p1);
        let d2 = cross(q1, q2, p2);
        let d3 = cross(p1, p2, q1);
        let d4 = cross(p1, p2, q2);
        (d1 > 0.0) != (d2 > 0.0) && (d3 > 0.0) != (d4 > 0.0)
    };
    for i in 0..n {
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if seg_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]) {
                return false;
            }
        }
    }
    true
}

//! Slow, obviously-correct reference implementations. Nothing here calls the
//! code paths it is used to check.

use sdtr_core::geometry::Camera;
use sdtr_core::scene::Box3D;

/// Ego point to `(u, v, depth)` by explicit matrix arithmetic.
pub fn pinhole(cam: &Camera, p: [f64; 3]) -> (f64, f64, f64) {
    let r = &cam.extrinsics.rotation;
    let t = &cam.extrinsics.translation;
    let mut c = [0.0; 3];
    for i in 0..3 {
        c[i] = r[(i, 0)] * p[0] + r[(i, 1)] * p[1] + r[(i, 2)] * p[2] + t[i];
    }
    let k = &cam.intrinsics;
    (k.cx + k.fx * c[0] / c[2], k.cy + k.fy * c[1] / c[2], c[2])
}

/// Per-pixel scan over all points: O(M * H * W).
pub fn depth_brute_force(points: &[[f64; 3]], cam: &Camera, z_near: f64) -> Vec<Option<f64>> {
    let k = &cam.intrinsics;
    let mut out = vec![None; k.width * k.height];
    for row in 0..k.height {
        for col in 0..k.width {
            let mut best: Option<f64> = None;
            for p in points {
                let (u, v, d) = pinhole(cam, *p);
                let inside = d > z_near && u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64;
                if inside && u.floor() as usize == col && v.floor() as usize == row {
                    best = Some(best.map_or(d, |b: f64| b.min(d)));
                }
            }
            out[row * k.width + col] = best;
        }
    }
    out
}

/// Winding number of `poly` around `p`; nonzero means inside.
pub fn winding_number(p: [f64; 2], poly: &[[f64; 2]]) -> i32 {
    let n = poly.len();
    let mut wn = 0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let side = (b[0] - a[0]) * (p[1] - a[1]) - (p[0] - a[0]) * (b[1] - a[1]);
        if a[1] <= p[1] {
            if b[1] > p[1] && side > 0.0 {
                wn += 1;
            }
        } else if b[1] <= p[1] && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

/// Footprint corners of a box computed from first principles.
pub fn footprint(b: &Box3D) -> Vec<[f64; 2]> {
    let (s, c) = (b.yaw.sin(), b.yaw.cos());
    let (hl, hw) = (b.size[1] / 2.0, b.size[0] / 2.0);
    [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)]
        .iter()
        .map(|&(x, y)| [b.center[0] + c * x - s * y, b.center[1] + s * x + c * y])
        .collect()
}

/// Cell-center rasterization of a BEV grid: rows run from +x to -x, columns
/// from +y to -y, ego at the center.
pub fn bev_brute_force(
    size: usize,
    cell: f64,
    drivable: &[Vec<[f64; 2]>],
    lanes: &[Vec<[f64; 2]>],
    boxes: &[Box3D],
    num_classes: usize,
) -> Vec<u8> {
    let plane = size * size;
    let mut out = vec![0u8; (2 + num_classes) * plane];
    let half = size as f64 * cell / 2.0;
    for row in 0..size {
        for col in 0..size {
            let p = [half - (row as f64 + 0.5) * cell, half - (col as f64 + 0.5) * cell];
            let i = row * size + col;
            if drivable.iter().any(|poly| winding_number(p, poly) != 0) {
                out[i] = 1;
            }
            if lanes.iter().any(|poly| winding_number(p, poly) != 0) {
                out[plane + i] = 1;
            }
            for b in boxes {
                if winding_number(p, &footprint(b)) != 0 {
                    out[(2 + b.class_id) * plane + i] = 1;
                }
            }
        }
    }
    out
}

/// Minimum-cost injection of rows into columns by exhaustive enumeration.
/// Returns the cost and, per row, the chosen column.
pub fn exhaustive_assignment(cost: &[Vec<f64>]) -> (f64, Vec<usize>) {
    fn rec(
        cost: &[Vec<f64>],
        row: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
        acc: f64,
    ) {
        if row == cost.len() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for col in 0..used.len() {
            if !used[col] {
                used[col] = true;
                cur.push(col);
                rec(cost, row + 1, used, cur, best, acc + cost[row][col]);
                cur.pop();
                used[col] = false;
            }
        }
    }
    let cols = cost.first().map_or(0, Vec::len);
    let mut best = (f64::INFINITY, Vec::new());
    if cost.is_empty() {
        return (0.0, Vec::new());
    }
    rec(cost, 0, &mut vec![false; cols], &mut Vec::new(), &mut best, 0.0);
    best
}

/// Independent greedy evaluation matcher. Returns one TP flag per
/// prediction index of the given class (None for other classes).
pub fn greedy_oracle(preds: &[(Box3D, f64)], gts: &[Box3D], class_id: usize, threshold: f64) -> Vec<Option<bool>> {
    let mut flags = vec![None; preds.len()];
    let mut free: Vec<usize> = (0..gts.len()).filter(|&j| gts[j].class_id == class_id).collect();
    let mut remaining: Vec<usize> = (0..preds.len()).filter(|&i| preds[i].0.class_id == class_id).collect();
    while !remaining.is_empty() {
        // Highest score, lowest index among ties.
        let mut pick = 0;
        for k in 1..remaining.len() {
            if preds[remaining[k]].1 > preds[remaining[pick]].1 {
                pick = k;
            }
        }
        let i = remaining.remove(pick);
        let dist = |g: &Box3D| {
            ((preds[i].0.center[0] - g.center[0]).powi(2) + (preds[i].0.center[1] - g.center[1]).powi(2)).sqrt()
        };
        let mut best: Option<usize> = None;
        for (k, &j) in free.iter().enumerate() {
            let d = dist(&gts[j]);
            if d <= threshold && best.is_none_or(|b| d < dist(&gts[free[b]])) {
                best = Some(k);
            }
        }
        flags[i] = Some(best.is_some());
        if let Some(k) = best {
            free.remove(k);
        }
    }
    flags
}

/// nuScenes AP evaluated on a dense recall grid. `tp_in_score_order` lists
/// the TP flag of every prediction sorted by descending score.
pub fn ap_dense_grid(tp_in_score_order: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut pts: Vec<(f64, f64)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for &f in tp_in_score_order {
        if f {
            tp += 1;
        } else {
            fp += 1;
        }
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    let mut total = 0.0;
    let mut count = 0;
    for k in 11..=100 {
        let r = k as f64 / 100.0;
        let p = precision_at(&pts, r);
        total += ((p - 0.1) / 0.9).max(0.0);
        count += 1;
    }
    total / count as f64
}

/// Linear interpolation of the raw (recall, precision) polyline at recall
/// `r`, scanning segments one by one.
fn precision_at(pts: &[(f64, f64)], r: f64) -> f64 {
    if pts.is_empty() || r > pts[pts.len() - 1].0 {
        return 0.0;
    }
    if r <= pts[0].0 {
        // numpy extends the first value leftwards; at an exact tie it keeps the last duplicate.
        if r == pts[0].0 {
            let mut last = 0;
            while last + 1 < pts.len() && pts[last + 1].0 == r {
                last += 1;
            }
            return pts[last].1;
        }
        return pts[0].1;
    }
    for w in 0..pts.len() - 1 {
        let (a, b) = (pts[w], pts[w + 1]);
        if b.0 == r {
            let mut last = w + 1;
            while last + 1 < pts.len() && pts[last + 1].0 == r {
                last += 1;
            }
            return pts[last].1;
        }
        if a.0 < r && r < b.0 {
            return a.1 + (r - a.0) / (b.0 - a.0) * (b.1 - a.1);
        }
    }
    pts[pts.len() - 1].1
}

/// Central finite difference of `f` along coordinate `i` of `x`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Relative gradient error with an absolute floor so that near-zero
/// gradients do not blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Area of the intersection of two convex polygons (Sutherland-Hodgman).
pub fn convex_intersection_area(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let orient = |poly: &[[f64; 2]]| {
        let mut s = 0.0;
        for i in 0..poly.len() {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            s += p[0] * q[1] - q[0] * p[1];
        }
        s
    };
    let mut clip: Vec<[f64; 2]> = b.to_vec();
    if orient(&clip) < 0.0 {
        clip.reverse();
    }
    let mut out: Vec<[f64; 2]> = a.to_vec();
    for i in 0..clip.len() {
        let (c0, c1) = (clip[i], clip[(i + 1) % clip.len()]);
        let inside = |p: [f64; 2]| (c1[0] - c0[0]) * (p[1] - c0[1]) - (c1[1] - c0[1]) * (p[0] - c0[0]) >= 0.0;
        let cut = |p: [f64; 2], q: [f64; 2]| {
            let d1 = (c1[0] - c0[0]) * (p[1] - c0[1]) - (c1[1] - c0[1]) * (p[0] - c0[0]);
            let d2 = (c1[0] - c0[0]) * (q[1] - c0[1]) - (c1[1] - c0[1]) * (q[0] - c0[0]);
            let t = d1 / (d1 - d2);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            match (inside(p), inside(q)) {
                (true, true) => out.push(q),
                (true, false) => out.push(cut(p, q)),
                (false, true) => {
                    out.push(cut(p, q));
                    out.push(q);
                }
                (false, false) => {}
            }
        }
        if out.is_empty() {
            return 0.0;
        }
    }
    orient(&out).abs() / 2.0
}

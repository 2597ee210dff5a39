//! Box parameterization shared by the detection head, the matcher and the
//! regression loss.
//!
//! Raw head output `r` (10 values) decodes as
//! `x = R (2 sigmoid(r0) - 1)`, `y = R (2 sigmoid(r1) - 1)`,
//! `z = Z (2 sigmoid(r2) - 1)`, `(w, l, h) = exp(r3..6)`,
//! `(sin, cos) = r6..8`, `(vx, vy) = r8..10`.
//!
//! The regression code compared by L1 is
//! `(x, y, z, ln w, ln l, ln h, sin yaw, cos yaw, vx, vy)` in meters.

use sdtr_core::scene::Box3D;

use crate::autodiff::sigmoid;
use crate::config::BOX_CODE_LEN;

pub type Code = [f64; BOX_CODE_LEN];

#[derive(Debug, Clone, Copy)]
pub struct BoxRanges {
    pub range: f64,
    pub z_range: f64,
}

impl BoxRanges {
    fn half(&self, i: usize) -> f64 {
        if i == 2 {
            self.z_range
        } else {
            self.range
        }
    }
}

/// Regression target of a ground-truth box.
pub fn target_code(b: &Box3D) -> Code {
    [
        b.center[0],
        b.center[1],
        b.center[2],
        b.size[0].ln(),
        b.size[1].ln(),
        b.size[2].ln(),
        b.yaw.sin(),
        b.yaw.cos(),
        b.velocity[0],
        b.velocity[1],
    ]
}

/// Regression code of a raw head output and its elementwise derivative
/// `d code_i / d raw_i` (each code entry depends on one raw entry).
pub fn pred_code(raw: &[f64], r: BoxRanges) -> (Code, Code) {
    let mut code = [0.0; BOX_CODE_LEN];
    let mut deriv = [1.0; BOX_CODE_LEN];
    for i in 0..BOX_CODE_LEN {
        if i < 3 {
            let s = sigmoid(raw[i]);
            code[i] = r.half(i) * (2.0 * s - 1.0);
            deriv[i] = 2.0 * r.half(i) * s * (1.0 - s);
        } else {
            code[i] = raw[i];
        }
    }
    (code, deriv)
}

/// Raw head output that decodes to `b`; requires the center strictly inside
/// the ranges.
pub fn encode(b: &Box3D, r: BoxRanges) -> Code {
    let mut raw = target_code(b);
    for (i, v) in raw.iter_mut().enumerate().take(3) {
        let p = (*v / r.half(i) + 1.0) / 2.0;
        *v = (p / (1.0 - p)).ln();
    }
    raw
}

/// Box described by a raw head output.
pub fn decode(raw: &[f64], class_id: usize, attribute_id: usize, r: BoxRanges) -> Box3D {
    let (code, _) = pred_code(raw, r);
    Box3D {
        center: [code[0], code[1], code[2]],
        size: [raw[3].exp(), raw[4].exp(), raw[5].exp()],
        yaw: wrap_yaw(raw[6].atan2(raw[7])),
        velocity: [raw[8], raw[9]],
        class_id,
        attribute_id,
    }
}

/// Maps `-pi` onto `pi` so yaws lie in `(-pi, pi]`.
fn wrap_yaw(a: f64) -> f64 {
    if a <= -std::f64::consts::PI {
        a + 2.0 * std::f64::consts::PI
    } else {
        a
    }
}

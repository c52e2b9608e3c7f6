//! Rigid SE(2) poses and the planar containment tests used by rasterization.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Wrap an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    // rem_euclid may round up to exactly 2π for tiny negative inputs
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Position and heading in a planar frame (meters, radians).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Default for Pose2D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl Pose2D {
    pub const IDENTITY: Pose2D = Pose2D {
        x: 0.0,
        y: 0.0,
        yaw: 0.0,
    };

    /// Builds a pose with the heading wrapped into `(-π, π]`.
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.yaw.is_finite()
    }

    /// Rigid composition `self ∘ other`: `other` expressed in `self`'s frame,
    /// mapped into the frame `self` lives in.
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        Pose2D::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.yaw + other.yaw,
        )
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.yaw.sin_cos();
        Pose2D::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.yaw,
        )
    }

    /// Maps a point given in this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Maps a parent-frame point into this pose's local frame.
    pub fn inverse_transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Expresses a world-frame pose in the frame of `ego`.
pub fn world_to_ego(point: &Pose2D, ego: &Pose2D) -> Pose2D {
    ego.inverse().compose(point)
}

/// Inverse of [`world_to_ego`].
pub fn ego_to_world(point: &Pose2D, ego: &Pose2D) -> Pose2D {
    ego.compose(point)
}

/// Linear interpolation of position and shortest-arc interpolation of heading,
/// `frac` in `[0, 1]`.
pub fn interpolate_pose(a: &Pose2D, b: &Pose2D, frac: f64) -> Pose2D {
    let dyaw = wrap_angle(b.yaw - a.yaw);
    Pose2D::new(
        a.x + (b.x - a.x) * frac,
        a.y + (b.y - a.y) * frac,
        a.yaw + dyaw * frac,
    )
}

/// Whether `p` lies inside the rectangle of the given `length` (along the
/// heading) and `width`, centered on `center`. Boundary points count as inside.
pub fn point_in_oriented_rect(p: [f64; 2], center: &Pose2D, length: f64, width: f64) -> bool {
    let [lx, ly] = center.inverse_transform_point(p);
    lx.abs() <= 0.5 * length && ly.abs() <= 0.5 * width
}

/// Corner points of an oriented rectangle, counter-clockwise.
pub fn rect_corners(center: &Pose2D, length: f64, width: f64) -> [[f64; 2]; 4] {
    let hl = 0.5 * length;
    let hw = 0.5 * width;
    [
        center.transform_point([hl, hw]),
        center.transform_point([-hl, hw]),
        center.transform_point([-hl, -hw]),
        center.transform_point([hl, -hw]),
    ]
}

/// Even-odd rule point-in-polygon test.
pub fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let [xi, yi] = poly[i];
        let [xj, yj] = poly[j];
        if (yi > p[1]) != (yj > p[1]) {
            let x_cross = xj + (p[1] - yj) * (xi - xj) / (yi - yj);
            if p[0] < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> bool {
    p[0] >= a[0].min(b[0])
        && p[0] <= a[0].max(b[0])
        && p[1] >= a[1].min(b[1])
        && p[1] <= a[1].max(b[1])
}

fn segments_intersect(p1: [f64; 2], p2: [f64; 2], q1: [f64; 2], q2: [f64; 2]) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when no two non-adjacent edges of the closed polygon touch.
pub fn polygon_is_simple(poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let a1 = poly[i];
        let a2 = poly[(i + 1) % n];
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let b1 = poly[j];
            let b2 = poly[(j + 1) % n];
            if segments_intersect(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let abx = b[0] - a[0];
    let aby = b[1] - a[1];
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * abx + (p[1] - a[1]) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * abx).hypot(p[1] - a[1] - t * aby)
}

/// Gap between two oriented rectangles; zero when they touch or overlap.
pub fn rect_separation(
    a: &Pose2D,
    a_len: f64,
    a_wid: f64,
    b: &Pose2D,
    b_len: f64,
    b_wid: f64,
) -> f64 {
    let ca = rect_corners(a, a_len, a_wid);
    let cb = rect_corners(b, b_len, b_wid);
    for i in 0..4 {
        for j in 0..4 {
            if segments_intersect(ca[i], ca[(i + 1) % 4], cb[j], cb[(j + 1) % 4]) {
                return 0.0;
            }
        }
    }
    if point_in_oriented_rect(ca[0], b, b_len, b_wid)
        || point_in_oriented_rect(cb[0], a, a_len, a_wid)
    {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for i in 0..4 {
        for j in 0..4 {
            best = best.min(point_segment_distance(ca[i], cb[j], cb[(j + 1) % 4]));
            best = best.min(point_segment_distance(cb[i], ca[j], ca[(j + 1) % 4]));
        }
    }
    best
}

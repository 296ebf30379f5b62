//! Oriented 3D boxes and the BEV geometry used everywhere: rotated-rectangle
//! IoU via convex polygon clipping, 3D IoU, and point containment tests.

use serde::{Deserialize, Serialize};

/// 7-DoF oriented box: center, size, yaw about the z axis.
///
/// `l` extends along the heading direction, `w` across it. Ground truth,
/// anchors, and detections all use this type.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, yaw: f64) -> Self {
        Box3D { x, y, z, w, l, h, yaw: normalize_angle(yaw) }
    }

    /// BEV footprint corners in world coordinates, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.l / 2.0, self.w / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[lx, ly]| [self.x + c * lx - s * ly, self.y + s * lx + c * ly])
    }

    pub fn bev_area(&self) -> f64 {
        self.w * self.l
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// World point -> box-local coordinates (x along heading).
    pub fn world_to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.z]
    }

    /// Box-local point -> world coordinates.
    pub fn local_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1], self.z + p[2]]
    }

    /// Full 3D containment (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let q = self.world_to_local(p);
        q[0].abs() <= self.l / 2.0 && q[1].abs() <= self.w / 2.0 && q[2].abs() <= self.h / 2.0
    }

    /// BEV containment, ignoring z.
    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let q = self.world_to_local([x, y, self.z]);
        q[0].abs() <= self.l / 2.0 && q[1].abs() <= self.w / 2.0
    }
}

/// Axis-aligned crop volume, half-open on every axis: [min, max).
///
/// Half-open bounds keep `floor((v - min) / size)` in-grid without a
/// clamp branch when voxelizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range3 {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z: (f64, f64),
}

impl Range3 {
    pub const fn new(x: (f64, f64), y: (f64, f64), z: (f64, f64)) -> Self {
        Range3 { x, y, z }
    }

    /// Default detection range for full-size scenes.
    pub const fn paper() -> Self {
        Range3::new((0.0, 69.12), (-39.68, 39.68), (-3.0, 1.0))
    }

    /// Reduced range for CPU-budget training.
    pub const fn desk() -> Self {
        Range3::new((0.0, 19.2), (-9.6, 9.6), (-3.0, 1.0))
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.x.0 && x < self.x.1 && y >= self.y.0 && y < self.y.1 && z >= self.z.0 && z < self.z.1
    }

    pub fn extent(&self) -> (f64, f64, f64) {
        (self.x.1 - self.x.0, self.y.1 - self.y.0, self.z.1 - self.z.0)
    }

    pub fn ordered(&self) -> bool {
        self.x.0 < self.x.1 && self.y.0 < self.y.1 && self.z.0 < self.z.1
    }
}

/// Normalize an angle to [-pi, pi).
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut r = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if r >= std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Shoelace area of a simple polygon (positive for CCW winding).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc.abs() / 2.0
}

/// Sutherland-Hodgman clipping of a convex `subject` polygon against a
/// convex CCW `clip` polygon.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        // inside = left of the directed edge a->b
        let inside = |p: [f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let intersect = |p: [f64; 2], q: [f64; 2]| -> [f64; 2] {
            let d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
            let d2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0]);
            let t = d1 / (d1 - d2);
            [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
        };
        for j in 0..input.len() {
            let cur = input[j];
            let next = input[(j + 1) % input.len()];
            if inside(cur) {
                output.push(cur);
                if !inside(next) {
                    output.push(intersect(cur, next));
                }
            } else if inside(next) {
                output.push(intersect(cur, next));
            }
        }
    }
    output
}

/// Exact rotated-rectangle intersection area in the BEV plane.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let inter = clip_polygon(&a.bev_corners(), &b.bev_corners());
    polygon_area(&inter)
}

/// Rotated BEV IoU via convex polygon clipping.
pub fn rotated_bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    // bounding-circle reject: anchor matching calls this for every
    // anchor/gt pair and nearly all are far apart
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let ra = (a.l * a.l + a.w * a.w).sqrt() / 2.0;
    let rb = (b.l * b.l + b.w * b.w).sqrt() / 2.0;
    if dx * dx + dy * dy > (ra + rb) * (ra + rb) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = a.bev_area() + b.bev_area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// 3D IoU: BEV intersection area times z-overlap, over volume union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let zlo = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let zhi = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let dz = (zhi - zlo).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_square_at(x: f64, y: f64) -> Box3D {
        Box3D::new(x, y, 0.0, 1.0, 1.0, 1.0, 0.0)
    }

    #[test]
    fn identical_boxes_iou_one() {
        let b = Box3D::new(1.0, 2.0, 0.5, 1.6, 3.9, 1.56, 0.7);
        assert_abs_diff_eq!(rotated_bev_iou(&b, &b), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(iou_3d(&b, &b), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn offset_unit_squares() {
        // overlap 0.5, union 1.5
        let a = unit_square_at(0.0, 0.0);
        let b = unit_square_at(0.5, 0.0);
        assert_abs_diff_eq!(rotated_bev_iou(&a, &b), 1.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_z_means_zero_3d_iou() {
        let a = Box3D::new(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0);
        let b = Box3D::new(0.0, 0.0, 5.0, 1.0, 1.0, 1.0, 0.3);
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn rotated_square_self_overlap() {
        // a unit square vs itself rotated 45 degrees: intersection is a
        // regular octagon of area 2*(sqrt(2)-1)
        let a = unit_square_at(0.0, 0.0);
        let mut b = a;
        b.yaw = std::f64::consts::FRAC_PI_4;
        let inter = bev_intersection_area(&a, &b);
        assert_abs_diff_eq!(inter, 2.0 * (2f64.sqrt() - 1.0), epsilon = 1e-12);
    }

    #[test]
    fn iou_symmetric_and_rigid_invariant() {
        let mut rng = 1234u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (rng >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..200 {
            let a = Box3D::new(next() * 4.0, next() * 4.0, 0.0, 0.5 + next(), 0.5 + next(), 1.0, next() * 6.0 - 3.0);
            let b = Box3D::new(next() * 4.0, next() * 4.0, 0.0, 0.5 + next(), 0.5 + next(), 1.0, next() * 6.0 - 3.0);
            let iou = rotated_bev_iou(&a, &b);
            assert!((0.0..=1.0).contains(&iou));
            assert_abs_diff_eq!(iou, rotated_bev_iou(&b, &a), epsilon = 1e-12);
            // joint rigid motion
            let (dx, dy, phi) = (next() * 10.0 - 5.0, next() * 10.0 - 5.0, next() * 6.0 - 3.0);
            let (s, c) = phi.sin_cos();
            let mv = |bx: &Box3D| {
                Box3D::new(
                    c * bx.x - s * bx.y + dx,
                    s * bx.x + c * bx.y + dy,
                    bx.z,
                    bx.w,
                    bx.l,
                    bx.h,
                    bx.yaw + phi,
                )
            };
            assert_abs_diff_eq!(iou, rotated_bev_iou(&mv(&a), &mv(&b)), epsilon = 1e-9);
        }
    }

    #[test]
    fn normalize_angle_range() {
        for k in -20..20 {
            let a = normalize_angle(0.3 + k as f64 * std::f64::consts::PI);
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&a));
        }
        assert_abs_diff_eq!(normalize_angle(std::f64::consts::PI), -std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn local_world_round_trip() {
        let b = Box3D::new(3.0, -2.0, 1.0, 1.0, 2.0, 1.5, 0.9);
        let p = [4.0, 1.0, 0.2];
        let q = b.local_to_world(b.world_to_local(p));
        for i in 0..3 {
            assert_abs_diff_eq!(p[i], q[i], epsilon = 1e-12);
        }
    }
}

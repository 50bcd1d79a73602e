//! Oriented-box geometry: BEV corner extraction, rotated IoU via convex
//! polygon clipping, 3D IoU, and the greedy rotated-NMS baseline.
//!
//! All operations are pure functions on immutable inputs.

use crate::error::{Error, Result};

/// Intersection areas below this are treated as zero (floating-point
/// sliver suppression).
const AREA_EPS: f64 = 1e-12;

/// Wrap an angle into the canonical range `[-pi, pi)`.
pub fn canonical_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta.rem_euclid(two_pi);
    if t >= std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// 7-DoF oriented 3D box: center `(x, y, z)` in the LiDAR frame, extents
/// `(w, l, h)` in meters, yaw `theta` about the vertical axis.
///
/// `l` runs along the heading direction, `w` across it. `theta` is kept in
/// `[-pi, pi)` by construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Result<Self> {
        for (name, v) in [
            ("x", x),
            ("y", y),
            ("z", z),
            ("w", w),
            ("l", l),
            ("h", h),
            ("theta", theta),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidBox(format!("{name} is not finite ({v})")));
            }
        }
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be strictly positive, got w={w} l={l} h={h}"
            )));
        }
        Ok(Self {
            x,
            y,
            z,
            w,
            l,
            h,
            theta: canonical_angle(theta),
        })
    }

    pub fn volume(&self) -> f64 {
        self.w * self.l * self.h
    }

    /// BEV footprint area in m^2.
    pub fn footprint_area(&self) -> f64 {
        self.w * self.l
    }

    /// True if `(px, py, pz)` lies inside the oriented box (boundary inclusive).
    pub fn contains_point(&self, px: f64, py: f64, pz: f64) -> bool {
        let (s, c) = self.theta.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        // rotate into the box frame
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.l / 2.0 && v.abs() <= self.w / 2.0 && (pz - self.z).abs() <= self.h / 2.0
    }
}

/// Convex counter-clockwise polygon in the BEV plane.
#[derive(Debug, Clone, PartialEq)]
pub struct BevPolygon {
    pub vertices: Vec<(f64, f64)>,
}

impl BevPolygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Self {
        Self { vertices }
    }

    /// Shoelace signed area; positive for counter-clockwise winding.
    pub fn signed_area(&self) -> f64 {
        let v = &self.vertices;
        if v.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..v.len() {
            let (x0, y0) = v[i];
            let (x1, y1) = v[(i + 1) % v.len()];
            acc += x0 * y1 - x1 * y0;
        }
        0.5 * acc
    }

    pub fn area(&self) -> f64 {
        self.signed_area().max(0.0)
    }

    /// Convexity/winding check used by tests and debug assertions.
    pub fn is_convex_ccw(&self) -> bool {
        let v = &self.vertices;
        if v.len() < 3 {
            return false;
        }
        for i in 0..v.len() {
            let a = v[i];
            let b = v[(i + 1) % v.len()];
            let c = v[(i + 2) % v.len()];
            if cross(sub(b, a), sub(c, b)) < -AREA_EPS {
                return false;
            }
        }
        self.signed_area() > 0.0
    }
}

/// A scored, classified box prediction.
#[derive(Debug, Clone)]
pub struct Detection {
    pub box3d: Box3D,
    /// Heatmap confidence in `[0, 1]`.
    pub score: f64,
    pub class_id: usize,
}

#[inline]
fn sub(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 - b.0, a.1 - b.1)
}

#[inline]
fn cross(a: (f64, f64), b: (f64, f64)) -> f64 {
    a.0 * b.1 - a.1 * b.0
}

/// The four BEV corners of the `w x l` footprint rotated by `theta` about
/// `(x, y)`, in counter-clockwise order. `l` extends along the heading.
pub fn box_corners_bev(b: &Box3D) -> BevPolygon {
    let (s, c) = b.theta.sin_cos();
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [(hl, -hw), (hl, hw), (-hl, hw), (-hl, -hw)];
    let vertices = local
        .iter()
        .map(|&(lx, ly)| (b.x + c * lx - s * ly, b.y + s * lx + c * ly))
        .collect();
    BevPolygon::new(vertices)
}

/// Sutherland-Hodgman clip of convex `subject` against convex CCW `clip`.
fn clip_convex(subject: &[(f64, f64)], clip: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = sub(b, a);
        let input = std::mem::take(&mut output);
        let n = input.len();
        for j in 0..n {
            let cur = input[j];
            let prev = input[(j + n - 1) % n];
            let cur_in = cross(edge, sub(cur, a)) >= 0.0;
            let prev_in = cross(edge, sub(prev, a)) >= 0.0;
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection of segment `(p, q)` with the infinite line through `(a, b)`.
fn line_intersection(p: (f64, f64), q: (f64, f64), a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let edge = sub(b, a);
    let dir = sub(q, p);
    let denom = cross(edge, dir);
    if denom.abs() < 1e-300 {
        // Degenerate near-parallel crossing; the sliver clamp absorbs it.
        return p;
    }
    let t = cross(edge, sub(a, p)) / denom;
    (p.0 + t * dir.0, p.1 + t * dir.1)
}

/// Area of the intersection of two convex CCW polygons.
pub fn intersection_area(a: &BevPolygon, b: &BevPolygon) -> f64 {
    let clipped = clip_convex(&a.vertices, &b.vertices);
    BevPolygon::new(clipped).area()
}

/// Rotated BEV IoU of two boxes' footprints. Disjoint or sliver
/// intersections return exactly 0.
pub fn iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let pa = box_corners_bev(a);
    let pb = box_corners_bev(b);
    let inter = intersection_area(&pa, &pb);
    if inter <= AREA_EPS {
        return 0.0;
    }
    let union = pa.area() + pb.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection area times vertical overlap of the
/// `[z - h/2, z + h/2]` intervals, over the union of volumes.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let pa = box_corners_bev(a);
    let pb = box_corners_bev(b);
    let inter_bev = intersection_area(&pa, &pb);
    let z_lo = (a.z - a.h / 2.0).max(b.z - b.h / 2.0);
    let z_hi = (a.z + a.h / 2.0).min(b.z + b.h / 2.0);
    let dz = (z_hi - z_lo).max(0.0);
    let inter_vol = inter_bev * dz;
    if inter_vol <= AREA_EPS {
        return 0.0;
    }
    let union = a.volume() + b.volume() - inter_vol;
    (inter_vol / union).clamp(0.0, 1.0)
}

/// Greedy score-descending suppression using `iou_bev`. Returns the kept
/// original indices in visit (descending score) order. Ties on equal score
/// are broken by the lower original index. Suppression ignores `class_id`.
pub fn rotated_nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut suppressed = vec![false; dets.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou_bev(&dets[i].box3d, &dets[j].box3d) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

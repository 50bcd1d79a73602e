//! Deterministic synthetic scenes: non-overlapping car-like boxes with
//! surface-sampled points plus ground clutter, for desk-scale training
//! and codec oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{Frame, FrameBox};
use crate::encoder::{GridSpec, Point, PointCloud};
use crate::geometry::{iou_bev, Box3D};

/// Points sampled on each box's surface.
const POINTS_PER_BOX: usize = 160;
/// Ground-plane clutter points per frame.
const CLUTTER_POINTS: usize = 600;

/// Sample a frame with `n_boxes` pairwise BEV-disjoint boxes inside the
/// detection range. Identical seeds give identical frames.
pub fn synth_scene(seed: u64, n_boxes: usize, grid: &GridSpec) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = 3.0;
    let mut boxes: Vec<Box3D> = Vec::new();
    let mut tries = 0;
    while boxes.len() < n_boxes && tries < 10_000 {
        tries += 1;
        let candidate = Box3D::new(
            rng.gen_range(grid.back + margin..grid.front - margin),
            rng.gen_range(grid.left + margin..grid.right - margin),
            rng.gen_range(-1.2..-0.4),
            rng.gen_range(1.5..1.9),
            rng.gen_range(3.5..4.5),
            rng.gen_range(1.4..1.7),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        )
        .expect("sampled extents positive");
        if boxes.iter().all(|b| iou_bev(b, &candidate) == 0.0) {
            boxes.push(candidate);
        }
    }

    let mut points: Vec<Point> = Vec::new();
    for b in &boxes {
        points.extend(sample_box_surface(&mut rng, b, POINTS_PER_BOX));
    }
    let ground_z = (grid.z_min + 0.4).min(grid.z_max);
    for _ in 0..CLUTTER_POINTS {
        points.push(Point {
            x: rng.gen_range(grid.back..grid.front),
            y: rng.gen_range(grid.left..grid.right),
            z: ground_z + rng.gen_range(0.0..0.05),
            reflectance: rng.gen_range(0.0..1.0),
        });
    }

    Frame {
        id: format!("{seed:06}"),
        cloud: PointCloud { points },
        boxes: boxes
            .into_iter()
            .map(|box3d| FrameBox {
                box3d,
                class_id: 0,
                bbox_height: 100.0,
                occlusion: 0,
                truncation: 0.0,
            })
            .collect(),
    }
}

/// Uniform samples over the four side faces and the roof, pushed
/// slightly inside so containment tests are unambiguous.
fn sample_box_surface(rng: &mut ChaCha8Rng, b: &Box3D, n: usize) -> Vec<Point> {
    let (s, c) = b.theta.sin_cos();
    let inset = 1e-4;
    let (hl, hw, hh) = (b.l / 2.0 - inset, b.w / 2.0 - inset, b.h / 2.0 - inset);
    let side_area = 2.0 * (b.l + b.w) * b.h;
    let roof_area = b.l * b.w;
    let total = side_area + roof_area;
    (0..n)
        .map(|_| {
            // local box coordinates (u along heading, v across, t up)
            let (u, v, t) = if rng.gen_range(0.0..total) < side_area {
                let p = rng.gen_range(0.0..2.0 * (b.l + b.w));
                let t = rng.gen_range(-hh..hh);
                if p < b.l {
                    (p - b.l / 2.0, -hw, t)
                } else if p < b.l + b.w {
                    (hl, p - b.l - b.w / 2.0, t)
                } else if p < 2.0 * b.l + b.w {
                    (p - 2.0 * b.l - b.w + b.l / 2.0, hw, t)
                } else {
                    (-hl, p - 2.0 * b.l - b.w - b.w / 2.0, t)
                }
            } else {
                (rng.gen_range(-hl..hl), rng.gen_range(-hw..hw), hh)
            };
            Point {
                x: b.x + c * u.clamp(-hl, hl) - s * v.clamp(-hw, hw),
                y: b.y + s * u.clamp(-hl, hl) + c * v.clamp(-hw, hw),
                z: b.z + t,
                reflectance: rng.gen_range(0.0..1.0),
            }
        })
        .collect()
}

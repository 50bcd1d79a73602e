//! The augmentation chain: ground-truth paste sampling, per-box
//! perturbation, and global flip/rotation/scaling. Deterministic per
//! seed; never produces overlapping BEV footprints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data_io::{Frame, FrameBox, GtDatabase};
use crate::encoder::Point;
use crate::geometry::{canonical_angle, iou_bev, Box3D};
use crate::pipeline::config::AugmentSpec;

pub fn augment(frame: &Frame, db: &GtDatabase, spec: &AugmentSpec, seed: u64) -> Frame {
    let mut out = frame.clone();
    if !spec.enabled {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    paste_gt_samples(&mut out, db, spec, &mut rng);
    perturb_boxes(&mut out, spec, &mut rng);
    global_transforms(&mut out, spec, &mut rng);
    out
}

/// Paste stored ground-truth objects (with their points) wherever their
/// footprint does not overlap any current box.
fn paste_gt_samples(frame: &mut Frame, db: &GtDatabase, spec: &AugmentSpec, rng: &mut ChaCha8Rng) {
    let mut class_ids: Vec<usize> = db.by_class.keys().cloned().collect();
    class_ids.sort_unstable();
    for class_id in class_ids {
        let entries = &db.by_class[&class_id];
        let mut order: Vec<usize> = (0..entries.len()).collect();
        order.shuffle(rng);
        let mut pasted = 0;
        for idx in order {
            if pasted >= spec.gt_samples_per_frame {
                break;
            }
            let entry = &entries[idx];
            let collides = frame
                .boxes
                .iter()
                .any(|fb| iou_bev(&fb.box3d, &entry.box3d) > 0.0);
            if collides {
                continue;
            }
            frame.cloud.points.extend_from_slice(&entry.points);
            frame.boxes.push(FrameBox {
                box3d: entry.box3d,
                class_id: entry.class_id,
                bbox_height: 100.0,
                occlusion: 0,
                truncation: 0.0,
            });
            pasted += 1;
        }
    }
}

/// Rotate each box about its center and translate it, moving its interior
/// points along. A perturbation that would collide with another box is
/// reverted.
fn perturb_boxes(frame: &mut Frame, spec: &AugmentSpec, rng: &mut ChaCha8Rng) {
    let normal = Normal::new(0.0, spec.box_translation_std).expect("positive std");
    for bi in 0..frame.boxes.len() {
        let original = frame.boxes[bi].box3d;
        let phi = rng.gen_range(-spec.box_rotation_range..spec.box_rotation_range);
        let (tx, ty, tz) = (normal.sample(rng), normal.sample(rng), normal.sample(rng));
        let moved = Box3D {
            x: original.x + tx,
            y: original.y + ty,
            z: original.z + tz,
            theta: canonical_angle(original.theta + phi),
            ..original
        };
        let collides = frame
            .boxes
            .iter()
            .enumerate()
            .any(|(j, other)| j != bi && iou_bev(&other.box3d, &moved) > 0.0);
        if collides {
            continue;
        }
        let (s, c) = phi.sin_cos();
        for p in frame.cloud.points.iter_mut() {
            if original.contains_point(p.x, p.y, p.z) {
                let dx = p.x - original.x;
                let dy = p.y - original.y;
                p.x = original.x + c * dx - s * dy + tx;
                p.y = original.y + s * dx + c * dy + ty;
                p.z += tz;
            }
        }
        frame.boxes[bi].box3d = moved;
    }
}

/// Mirror across the x-z plane with probability `flip_probability`, then
/// rotate everything about the origin and scale uniformly.
fn global_transforms(frame: &mut Frame, spec: &AugmentSpec, rng: &mut ChaCha8Rng) {
    if rng.gen_bool(spec.flip_probability) {
        for p in frame.cloud.points.iter_mut() {
            p.y = -p.y;
        }
        for fb in frame.boxes.iter_mut() {
            fb.box3d.y = -fb.box3d.y;
            fb.box3d.theta = canonical_angle(-fb.box3d.theta);
        }
    }
    let phi = rng.gen_range(-spec.global_rotation_range..spec.global_rotation_range);
    let (s, c) = phi.sin_cos();
    let rotate = |x: f64, y: f64| (c * x - s * y, s * x + c * y);
    for p in frame.cloud.points.iter_mut() {
        let (x, y) = rotate(p.x, p.y);
        p.x = x;
        p.y = y;
    }
    for fb in frame.boxes.iter_mut() {
        let (x, y) = rotate(fb.box3d.x, fb.box3d.y);
        fb.box3d.x = x;
        fb.box3d.y = y;
        fb.box3d.theta = canonical_angle(fb.box3d.theta + phi);
    }
    let scale = rng.gen_range(spec.global_scale_low..spec.global_scale_high);
    for p in frame.cloud.points.iter_mut() {
        p.x *= scale;
        p.y *= scale;
        p.z *= scale;
    }
    for fb in frame.boxes.iter_mut() {
        fb.box3d.x *= scale;
        fb.box3d.y *= scale;
        fb.box3d.z *= scale;
        fb.box3d.w *= scale;
        fb.box3d.l *= scale;
        fb.box3d.h *= scale;
    }
}

/// Apply a pure global rotation; used by tests to verify inverses.
pub fn rotate_frame(frame: &Frame, phi: f64) -> Frame {
    let mut out = frame.clone();
    let (s, c) = phi.sin_cos();
    for p in out.cloud.points.iter_mut() {
        let (x, y) = (c * p.x - s * p.y, s * p.x + c * p.y);
        p.x = x;
        p.y = y;
    }
    for fb in out.boxes.iter_mut() {
        let (x, y) = (c * fb.box3d.x - s * fb.box3d.y, s * fb.box3d.x + c * fb.box3d.y);
        fb.box3d.x = x;
        fb.box3d.y = y;
        fb.box3d.theta = canonical_angle(fb.box3d.theta + phi);
    }
    out
}

/// Points inside any labeled box, useful for membership checks.
pub fn points_in_box(frame: &Frame, fb: &FrameBox) -> Vec<Point> {
    frame
        .cloud
        .points
        .iter()
        .filter(|p| fb.box3d.contains_point(p.x, p.y, p.z))
        .cloned()
        .collect()
}

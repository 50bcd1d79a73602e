//! The anchor-free codec: encode ground-truth boxes into the five head
//! targets (center heatmap, local offset, z, size, orientation) and
//! decode predicted maps back into detections via max-pool/AND peak
//! extraction. No NMS anywhere.

use crate::encoder::GridSpec;
use crate::error::{Error, Result};
use crate::geometry::{canonical_angle, Box3D, Detection};
use crate::net::maxpool2d_forward;
use crate::net::tensor::Tensor;

use std::f64::consts::PI;

/// Yaw bins: overlapping ranges and their midpoint centers.
pub const BIN_RANGES: [(f64, f64); 2] = [
    (-7.0 * PI / 6.0, PI / 6.0),
    (-PI / 6.0, 7.0 * PI / 6.0),
];
pub const BIN_CENTERS: [f64; 2] = [-PI / 2.0, PI / 2.0];

/// Continuous BEV keypoint of an object center and its integer pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub p: (f64, f64),
    pub p_tilde: (usize, usize),
}

/// Project an in-range box center onto the lattice.
pub fn encode_keypoint(box3d: &Box3D, grid: &GridSpec) -> Result<Keypoint> {
    if !(box3d.x >= grid.back
        && box3d.x < grid.front
        && box3d.y >= grid.left
        && box3d.y < grid.right)
    {
        return Err(Error::OutOfRange { x: box3d.x, y: box3d.y });
    }
    let p = grid.pixel_of(box3d.x, box3d.y);
    let px = (p.0.floor() as isize).clamp(0, grid.nx as isize - 1) as usize;
    let py = (p.1.floor() as isize).clamp(0, grid.ny as isize - 1) as usize;
    Ok(Keypoint { p, p_tilde: (px, py) })
}

/// Heatmap value as a function of the lattice distance to the center
/// pixel: 1 at the center, 0.8 one pixel out, 1/d beyond.
#[inline]
fn carshape_value(d: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else if d == 1.0 {
        0.8
    } else {
        1.0 / d
    }
}

/// True if lattice cell `(ix, iy)` (tested at its geometric center) lies
/// inside the box footprint, all in continuous pixel coordinates.
fn cell_in_footprint(
    ix: usize,
    iy: usize,
    p: (f64, f64),
    half_l: f64,
    half_w: f64,
    theta: f64,
) -> bool {
    let (s, c) = theta.sin_cos();
    let dx = (ix as f64 + 0.5) - p.0;
    let dy = (iy as f64 + 0.5) - p.1;
    let u = c * dx + s * dy;
    let v = -s * dx + c * dy;
    u.abs() <= half_l && v.abs() <= half_w
}

/// Car-shape heatmap: every pixel covered by a box's rotated BEV
/// footprint gets `carshape_value(d)` on that box's class channel,
/// merged across objects by max. Out-of-range boxes are ignored.
pub fn encode_heatmap_carshape(
    boxes: &[(Box3D, usize)],
    grid: &GridSpec,
    num_classes: usize,
) -> Tensor {
    let mut m = Tensor::zeros(&[num_classes, grid.nx, grid.ny]);
    for (b, class) in boxes {
        let Ok(kp) = encode_keypoint(b, grid) else { continue };
        let (half_l, half_w) = (b.l / (2.0 * grid.b), b.w / (2.0 * grid.b));
        let rad = (half_l * half_l + half_w * half_w).sqrt();
        let x_lo = ((kp.p.0 - rad).floor().max(0.0)) as usize;
        let y_lo = ((kp.p.1 - rad).floor().max(0.0)) as usize;
        let x_hi = ((kp.p.0 + rad).ceil().max(0.0) as usize).min(grid.nx - 1);
        let y_hi = ((kp.p.1 + rad).ceil().max(0.0) as usize).min(grid.ny - 1);
        for ix in x_lo..=x_hi {
            for iy in y_lo..=y_hi {
                if !cell_in_footprint(ix, iy, kp.p, half_l, half_w, b.theta) {
                    continue;
                }
                let dx = ix as f64 - kp.p_tilde.0 as f64;
                let dy = iy as f64 - kp.p_tilde.1 as f64;
                let d = (dx * dx + dy * dy).sqrt();
                let v = carshape_value(d);
                let o = m.off3(*class, ix, iy);
                if v > m.data()[o] {
                    m.data_mut()[o] = v;
                }
            }
        }
        // the center pixel is always the object's peak
        let o = m.off3(*class, kp.p_tilde.0, kp.p_tilde.1);
        if m.data()[o] < 1.0 {
            m.data_mut()[o] = 1.0;
        }
    }
    m
}

/// Size-adaptive splat radius at a minimum-overlap requirement between
/// the footprint and a shifted copy (the CornerNet construction).
pub fn gaussian_radius(height: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w) = (height, width);
    let a1 = 1.0;
    let b1 = h + w;
    let c1 = w * h * (1.0 - min_overlap) / (1.0 + min_overlap);
    let sq1 = (b1 * b1 - 4.0 * a1 * c1).max(0.0).sqrt();
    let r1 = (b1 - sq1) / 2.0;

    let a2 = 4.0;
    let b2 = 2.0 * (h + w);
    let c2 = (1.0 - min_overlap) * w * h;
    let sq2 = (b2 * b2 - 4.0 * a2 * c2).max(0.0).sqrt();
    let r2 = (b2 - sq2) / 2.0;

    let a3 = 4.0 * min_overlap;
    let b3 = -2.0 * min_overlap * (h + w);
    let c3 = (min_overlap - 1.0) * w * h;
    let sq3 = (b3 * b3 - 4.0 * a3 * c3).max(0.0).sqrt();
    let r3 = (b3 + sq3) / 2.0;

    r1.min(r2).min(r3)
}

/// Standard deviation of the splat for a footprint of `l_pix x w_pix`
/// pixels: sigma = (2 * floor(radius) + 1) / 6.
pub fn gaussian_sigma(l_pix: f64, w_pix: f64, min_overlap: f64) -> f64 {
    let radius = gaussian_radius(l_pix, w_pix, min_overlap).max(0.0).floor();
    (2.0 * radius + 1.0) / 6.0
}

/// Gaussian-kernel heatmap alternative: per-object splat
/// `exp(-(d^2) / (2 sigma_p^2))` over the `[p~ - r, p~ + r]` square,
/// merged across objects by max.
pub fn encode_heatmap_gaussian(
    boxes: &[(Box3D, usize)],
    grid: &GridSpec,
    num_classes: usize,
    min_overlap: f64,
) -> Tensor {
    let mut m = Tensor::zeros(&[num_classes, grid.nx, grid.ny]);
    for (b, class) in boxes {
        let Ok(kp) = encode_keypoint(b, grid) else { continue };
        let (l_pix, w_pix) = (b.l / grid.b, b.w / grid.b);
        let radius = gaussian_radius(l_pix, w_pix, min_overlap).max(0.0).floor();
        let sigma = (2.0 * radius + 1.0) / 6.0;
        let r = radius as isize;
        let (cx, cy) = (kp.p_tilde.0 as isize, kp.p_tilde.1 as isize);
        for ix in (cx - r).max(0)..=(cx + r).min(grid.nx as isize - 1) {
            for iy in (cy - r).max(0)..=(cy + r).min(grid.ny as isize - 1) {
                let dx = (ix - cx) as f64;
                let dy = (iy - cy) as f64;
                let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let o = m.off3(*class, ix as usize, iy as usize);
                if v > m.data()[o] {
                    m.data_mut()[o] = v;
                }
            }
        }
    }
    m
}

/// Dense offset regression targets with their supervision mask.
#[derive(Debug, Clone)]
pub struct OffsetTargets {
    /// `[2, nx, ny]` target offsets in meters.
    pub target: Tensor,
    /// Per-pixel supervision mask, length `nx * ny`.
    pub mask: Vec<bool>,
}

/// Offset targets on the `(2r+1)^2` square around each center, clipped to
/// the lattice. On pixel conflicts the object whose continuous center is
/// nearer wins; exact ties keep the earlier object.
pub fn encode_offset(boxes: &[Box3D], grid: &GridSpec, r: usize) -> OffsetTargets {
    let mut target = Tensor::zeros(&[2, grid.nx, grid.ny]);
    let mut mask = vec![false; grid.nx * grid.ny];
    let mut best = vec![f64::INFINITY; grid.nx * grid.ny];
    let ri = r as isize;
    for b in boxes {
        let Ok(kp) = encode_keypoint(b, grid) else { continue };
        let (cx, cy) = (kp.p_tilde.0 as isize, kp.p_tilde.1 as isize);
        for dx in -ri..=ri {
            for dy in -ri..=ri {
                let (qx, qy) = (cx + dx, cy + dy);
                if qx < 0 || qy < 0 || qx >= grid.nx as isize || qy >= grid.ny as isize {
                    continue;
                }
                let (qx, qy) = (qx as usize, qy as usize);
                let cell = qx * grid.ny + qy;
                let dist = ((kp.p.0 - qx as f64).powi(2) + (kp.p.1 - qy as f64).powi(2)).sqrt();
                if dist < best[cell] {
                    best[cell] = dist;
                    mask[cell] = true;
                    let ox = grid.b * (kp.p.0 - qx as f64 - 0.5);
                    let oy = grid.b * (kp.p.1 - qy as f64 - 0.5);
                    target.set3(0, qx, qy, ox);
                    target.set3(1, qx, qy, oy);
                }
            }
        }
    }
    OffsetTargets { target, mask }
}

/// Per-object orientation target: bin membership flags and per-bin
/// (sin, cos) residuals to the bin centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientationTarget {
    pub eta: [bool; 2],
    pub nu: [[f64; 2]; 2],
}

/// Bin membership is tested on all 2-pi representatives so the bins also
/// overlap around the +-pi seam; residuals are representative-free.
pub fn encode_orientation(theta: f64) -> OrientationTarget {
    let theta = canonical_angle(theta);
    let mut eta = [false; 2];
    for (i, (lo, hi)) in BIN_RANGES.iter().enumerate() {
        for k in [-1.0, 0.0, 1.0] {
            let t = theta + 2.0 * PI * k;
            if t >= *lo && t <= *hi {
                eta[i] = true;
            }
        }
    }
    let nu = [
        [(theta - BIN_CENTERS[0]).sin(), (theta - BIN_CENTERS[0]).cos()],
        [(theta - BIN_CENTERS[1]).sin(), (theta - BIN_CENTERS[1]).cos()],
    ];
    OrientationTarget { eta, nu }
}

/// Invert the orientation encoding: pick the bin with the larger
/// classification score (softmax over each bin's two logits) and undo its
/// residual. Ties pick the first bin.
pub fn decode_orientation(mu_hat: [[f64; 2]; 2], nu_hat: [[f64; 2]; 2]) -> f64 {
    let score = |mu: &[f64; 2]| {
        let m = mu[0].max(mu[1]);
        let e0 = (mu[0] - m).exp();
        let e1 = (mu[1] - m).exp();
        e1 / (e0 + e1)
    };
    let j = if score(&mu_hat[1]) > score(&mu_hat[0]) { 1 } else { 0 };
    canonical_angle(nu_hat[j][0].atan2(nu_hat[j][1]) + BIN_CENTERS[j])
}

/// Per-object regression targets stored at the center indices.
#[derive(Debug, Clone, Default)]
pub struct RegressionTargets {
    pub z: Vec<f64>,
    pub size: Vec<[f64; 3]>,
    pub centers: Vec<(usize, usize)>,
}

/// z and (w, l, h) per object, keyed by its center pixel. Only these
/// indices are supervised.
pub fn encode_regression(boxes: &[Box3D], grid: &GridSpec) -> RegressionTargets {
    let mut out = RegressionTargets::default();
    for b in boxes {
        let Ok(kp) = encode_keypoint(b, grid) else { continue };
        out.z.push(b.z);
        out.size.push([b.w, b.l, b.h]);
        out.centers.push(kp.p_tilde);
    }
    out
}

/// How the supervision heatmap is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeatmapKind {
    CarShape,
    Gaussian,
}

/// All five supervised targets for one frame, after range filtering.
#[derive(Debug, Clone)]
pub struct HeadTargets {
    pub heatmap: Tensor,
    pub offset: OffsetTargets,
    pub regression: RegressionTargets,
    pub orientation: Vec<OrientationTarget>,
    pub classes: Vec<usize>,
    /// Number of objects inside the detection range.
    pub n_objects: usize,
}

/// Encode every in-range box; out-of-range objects are dropped (they do
/// not count toward the loss normalizer).
pub fn encode_targets(
    boxes: &[(Box3D, usize)],
    grid: &GridSpec,
    r: usize,
    kind: HeatmapKind,
    num_classes: usize,
    gaussian_min_overlap: f64,
) -> HeadTargets {
    let in_range: Vec<(Box3D, usize)> = boxes
        .iter()
        .filter(|(b, _)| encode_keypoint(b, grid).is_ok())
        .cloned()
        .collect();
    let heatmap = match kind {
        HeatmapKind::CarShape => encode_heatmap_carshape(&in_range, grid, num_classes),
        HeatmapKind::Gaussian => {
            encode_heatmap_gaussian(&in_range, grid, num_classes, gaussian_min_overlap)
        }
    };
    let plain: Vec<Box3D> = in_range.iter().map(|(b, _)| *b).collect();
    let offset = encode_offset(&plain, grid, r);
    let regression = encode_regression(&plain, grid);
    let orientation = plain.iter().map(|b| encode_orientation(b.theta)).collect();
    let classes = in_range.iter().map(|(_, c)| *c).collect();
    HeadTargets {
        heatmap,
        offset,
        regression,
        orientation,
        classes,
        n_objects: in_range.len(),
    }
}

/// A heatmap peak: class channel, lattice pixel, and its score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub class_id: usize,
    pub px: usize,
    pub py: usize,
    pub score: f64,
}

/// Max-pool/AND peak extraction: a pixel is a peak iff it equals its 3x3
/// neighborhood max and clears the score threshold. The top `max_objects`
/// by score survive; ties break by (channel, row, column).
pub fn extract_peaks(heatmap: &Tensor, max_objects: usize, score_threshold: f64) -> Vec<Peak> {
    let pooled = maxpool2d_forward(heatmap, 3).expect("rank-3 heatmap");
    let (c, nx, ny) = (heatmap.shape()[0], heatmap.shape()[1], heatmap.shape()[2]);
    let hd = heatmap.data();
    let pd = pooled.data();
    let mut peaks = Vec::new();
    for ci in 0..c {
        for ix in 0..nx {
            for iy in 0..ny {
                let o = (ci * nx + ix) * ny + iy;
                let v = hd[o];
                if v == pd[o] && v >= score_threshold {
                    peaks.push(Peak { class_id: ci, px: ix, py: iy, score: v });
                }
            }
        }
    }
    peaks.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.class_id, a.px, a.py).cmp(&(b.class_id, b.px, b.py)))
    });
    peaks.truncate(max_objects);
    peaks
}

/// Orientation head values at one pixel, split into the two bins'
/// logits and residuals. Channel layout: bin-1 logits, bin-2 logits,
/// bin-1 (sin, cos), bin-2 (sin, cos).
pub fn orientation_at(ori: &Tensor, px: usize, py: usize) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let mu = [
        [ori.at3(0, px, py), ori.at3(1, px, py)],
        [ori.at3(2, px, py), ori.at3(3, px, py)],
    ];
    let nu = [
        [ori.at3(4, px, py), ori.at3(5, px, py)],
        [ori.at3(6, px, py), ori.at3(7, px, py)],
    ];
    (mu, nu)
}

/// Decode peaks plus dense head maps into detections. Centers add the
/// range origin so boxes live in the LiDAR frame; predicted extents are
/// floored at 1 mm to keep boxes valid.
pub fn decode_boxes(
    peaks: &[Peak],
    offset: &Tensor,
    z: &Tensor,
    size: &Tensor,
    ori: &Tensor,
    grid: &GridSpec,
) -> Vec<Detection> {
    let mut dets = Vec::with_capacity(peaks.len());
    for pk in peaks {
        let (px, py) = (pk.px, pk.py);
        let o1 = offset.at3(0, px, py);
        let o2 = offset.at3(1, px, py);
        let x = grid.back + grid.b * (px as f64 + 0.5) + o1;
        let y = grid.left + grid.b * (py as f64 + 0.5) + o2;
        let zv = z.at3(0, px, py);
        let w = size.at3(0, px, py).max(1e-3);
        let l = size.at3(1, px, py).max(1e-3);
        let h = size.at3(2, px, py).max(1e-3);
        let (mu, nu) = orientation_at(ori, px, py);
        let theta = decode_orientation(mu, nu);
        let box3d = Box3D::new(x, y, zv, w, l, h, theta).expect("sizes floored positive");
        dets.push(Detection { box3d, score: pk.score.clamp(0.0, 1.0), class_id: pk.class_id });
    }
    dets
}

/// Dense maps a perfect predictor would emit for the given targets:
/// exact offsets inside the supervision squares, exact z/size/orientation
/// on each object's square (nearest object wins on conflicts), and
/// confident bin logits with margin 10.
#[derive(Debug, Clone)]
pub struct PerfectMaps {
    pub heat: Tensor,
    pub offset: Tensor,
    pub z: Tensor,
    pub size: Tensor,
    pub ori: Tensor,
}

pub fn perfect_prediction_maps(t: &HeadTargets, grid: &GridSpec, r: usize) -> PerfectMaps {
    let mut z = Tensor::zeros(&[1, grid.nx, grid.ny]);
    let mut size = Tensor::zeros(&[3, grid.nx, grid.ny]);
    let mut ori = Tensor::zeros(&[8, grid.nx, grid.ny]);
    let mut best = vec![f64::INFINITY; grid.nx * grid.ny];
    let ri = r as isize;
    for k in 0..t.regression.centers.len() {
        let (cx, cy) = t.regression.centers[k];
        for dx in -ri..=ri {
            for dy in -ri..=ri {
                let (qx, qy) = (cx as isize + dx, cy as isize + dy);
                if qx < 0 || qy < 0 || qx >= grid.nx as isize || qy >= grid.ny as isize {
                    continue;
                }
                let (qx, qy) = (qx as usize, qy as usize);
                let cell = qx * grid.ny + qy;
                let dist = ((dx * dx + dy * dy) as f64).sqrt();
                if dist >= best[cell] {
                    continue;
                }
                best[cell] = dist;
                z.set3(0, qx, qy, t.regression.z[k]);
                for (j, v) in t.regression.size[k].iter().enumerate() {
                    size.set3(j, qx, qy, *v);
                }
                let o = &t.orientation[k];
                for bin in 0..2 {
                    let (neg, pos) = if o.eta[bin] { (0.0, 10.0) } else { (10.0, 0.0) };
                    ori.set3(bin * 2, qx, qy, neg);
                    ori.set3(bin * 2 + 1, qx, qy, pos);
                    ori.set3(4 + bin * 2, qx, qy, o.nu[bin][0]);
                    ori.set3(4 + bin * 2 + 1, qx, qy, o.nu[bin][1]);
                }
            }
        }
    }
    PerfectMaps {
        heat: t.heatmap.clone(),
        offset: t.offset.target.clone(),
        z,
        size,
        ori,
    }
}

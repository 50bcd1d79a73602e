//! Point-cloud encoder: assign points to square BEV pillars, augment each
//! point to 9 features, run a linear + batch-norm + ReLU + per-pillar max
//! feature network, and scatter pillar features back onto the lattice as
//! a pseudo image.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::net::network::Param;
use crate::net::tensor::Tensor;

/// Augmented per-point feature width: (x, y, z, r, offsets to the pillar
/// point centroid, offsets to the pillar geometric center).
pub const POINT_FEATURE_DIM: usize = 9;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub reflectance: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

/// Detection range plus the square-pillar lattice derived from it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub back: f64,
    pub front: f64,
    pub left: f64,
    pub right: f64,
    pub z_min: f64,
    pub z_max: f64,
    /// Pillar side length in meters.
    pub b: f64,
    pub nx: usize,
    pub ny: usize,
}

/// Cell count along one axis: `ceil(len / b)` with a tolerance so exact
/// multiples do not spill into an extra cell through float rounding.
fn ceil_cells(len: f64, b: f64) -> usize {
    let r = len / b;
    let rounded = r.round();
    if (r - rounded).abs() < 1e-9 * rounded.abs().max(1.0) {
        rounded as usize
    } else {
        r.ceil() as usize
    }
}

pub fn make_grid(
    back: f64,
    front: f64,
    left: f64,
    right: f64,
    z_min: f64,
    z_max: f64,
    b: f64,
) -> Result<GridSpec> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(Error::InvalidGrid(format!("pillar side must be > 0, got {b}")));
    }
    if !(front > back) || !(right > left) || !(z_max > z_min) {
        return Err(Error::InvalidGrid(format!(
            "inverted range: x [{back}, {front}], y [{left}, {right}], z [{z_min}, {z_max}]"
        )));
    }
    Ok(GridSpec {
        back,
        front,
        left,
        right,
        z_min,
        z_max,
        b,
        nx: ceil_cells(front - back, b),
        ny: ceil_cells(right - left, b),
    })
}

impl GridSpec {
    /// Continuous BEV pixel coordinates of a LiDAR-frame point.
    #[inline]
    pub fn pixel_of(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.back) / self.b, (y - self.left) / self.b)
    }

    /// Half-open in-range test: x in [back, front), y in [left, right),
    /// z in [z_min, z_max].
    #[inline]
    pub fn in_range(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.back
            && x < self.front
            && y >= self.left
            && y < self.right
            && z >= self.z_min
            && z <= self.z_max
    }

    /// Lattice cell of an in-range point, clamped against float edge
    /// effects at the far boundary.
    #[inline]
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let (px, py) = self.pixel_of(x, y);
        let ix = (px.floor() as isize).clamp(0, self.nx as isize - 1) as usize;
        let iy = (py.floor() as isize).clamp(0, self.ny as isize - 1) as usize;
        (ix, iy)
    }

    /// Geometric center of pillar `(ix, iy)` in meters.
    #[inline]
    pub fn pillar_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.back + (ix as f64 + 0.5) * self.b,
            self.left + (iy as f64 + 0.5) * self.b,
        )
    }
}

/// Occupied pillars with augmented per-point features.
#[derive(Debug, Clone)]
pub struct PillarSet {
    /// `P x max_points x 9`, zero-padded beyond each pillar's count.
    pub features: Vec<f64>,
    pub counts: Vec<usize>,
    pub coords: Vec<(usize, usize)>,
    pub max_points: usize,
}

impl PillarSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn point(&self, pillar: usize, slot: usize) -> &[f64] {
        let o = (pillar * self.max_points + slot) * POINT_FEATURE_DIM;
        &self.features[o..o + POINT_FEATURE_DIM]
    }
}

/// Assign in-range points to pillars (input order, first `max_points` per
/// pillar kept) and augment to 9 features. If more than `max_pillars`
/// pillars are occupied, a seeded uniform subsample of pillars survives.
pub fn pillarize(
    cloud: &PointCloud,
    grid: &GridSpec,
    max_points: usize,
    max_pillars: usize,
    rng_seed: u64,
) -> PillarSet {
    let mut pillar_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pillar_points: Vec<Vec<Point>> = Vec::new();
    let mut pillar_coords: Vec<(usize, usize)> = Vec::new();
    for p in &cloud.points {
        if !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()) {
            continue;
        }
        if !grid.in_range(p.x, p.y, p.z) {
            continue;
        }
        let cell = grid.cell_of(p.x, p.y);
        let idx = *pillar_index.entry(cell).or_insert_with(|| {
            pillar_points.push(Vec::new());
            pillar_coords.push(cell);
            pillar_points.len() - 1
        });
        if pillar_points[idx].len() < max_points {
            pillar_points[idx].push(*p);
        }
    }

    let kept: Vec<usize> = if pillar_coords.len() > max_pillars {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut ids: Vec<usize> = (0..pillar_coords.len()).collect();
        ids.shuffle(&mut rng);
        let mut sample: Vec<usize> = ids.into_iter().take(max_pillars).collect();
        sample.sort_unstable();
        sample
    } else {
        (0..pillar_coords.len()).collect()
    };

    let mut features = vec![0.0; kept.len() * max_points * POINT_FEATURE_DIM];
    let mut counts = Vec::with_capacity(kept.len());
    let mut coords = Vec::with_capacity(kept.len());
    for (slot_p, &src) in kept.iter().enumerate() {
        let pts = &pillar_points[src];
        let (ix, iy) = pillar_coords[src];
        let n = pts.len() as f64;
        let cx = pts.iter().map(|p| p.x).sum::<f64>() / n;
        let cy = pts.iter().map(|p| p.y).sum::<f64>() / n;
        let cz = pts.iter().map(|p| p.z).sum::<f64>() / n;
        let (gx, gy) = grid.pillar_center(ix, iy);
        for (slot, p) in pts.iter().enumerate() {
            let o = (slot_p * max_points + slot) * POINT_FEATURE_DIM;
            features[o..o + POINT_FEATURE_DIM].copy_from_slice(&[
                p.x,
                p.y,
                p.z,
                p.reflectance,
                p.x - cx,
                p.y - cy,
                p.z - cz,
                p.x - gx,
                p.y - gy,
            ]);
        }
        counts.push(pts.len());
        coords.push((ix, iy));
    }
    PillarSet {
        features,
        counts,
        coords,
        max_points,
    }
}

/// Learned pillar feature layer: linear 9 -> F, batch norm over points,
/// ReLU, then per-pillar elementwise max.
#[derive(Debug, Clone)]
pub struct Pfn {
    pub weight: Param,
    pub bias: Param,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub out_channels: usize,
}

impl Pfn {
    pub fn new(out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, (2.0 / POINT_FEATURE_DIM as f64).sqrt()).expect("valid");
        let wdata: Vec<f64> = (0..out_channels * POINT_FEATURE_DIM)
            .map(|_| dist.sample(&mut rng))
            .collect();
        Self {
            weight: Param {
                name: "pfn.weight".into(),
                value: Tensor::from_vec(&[out_channels, POINT_FEATURE_DIM], wdata).unwrap(),
                grad: Tensor::zeros(&[out_channels, POINT_FEATURE_DIM]),
            },
            bias: Param {
                name: "pfn.bias".into(),
                value: Tensor::zeros(&[out_channels]),
                grad: Tensor::zeros(&[out_channels]),
            },
            gamma: Param {
                name: "pfn.gamma".into(),
                value: Tensor::full(&[out_channels], 1.0),
                grad: Tensor::zeros(&[out_channels]),
            },
            beta: Param {
                name: "pfn.beta".into(),
                value: Tensor::zeros(&[out_channels]),
                grad: Tensor::zeros(&[out_channels]),
            },
            running_mean: vec![0.0; out_channels],
            running_var: vec![1.0; out_channels],
            out_channels,
        }
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    pub fn state_entries(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        vec![
            ("pfn.weight".into(), self.weight.value.shape().to_vec(), self.weight.value.data().to_vec()),
            ("pfn.bias".into(), self.bias.value.shape().to_vec(), self.bias.value.data().to_vec()),
            ("pfn.gamma".into(), self.gamma.value.shape().to_vec(), self.gamma.value.data().to_vec()),
            ("pfn.beta".into(), self.beta.value.shape().to_vec(), self.beta.value.data().to_vec()),
            ("pfn.running_mean".into(), vec![self.out_channels], self.running_mean.clone()),
            ("pfn.running_var".into(), vec![self.out_channels], self.running_var.clone()),
        ]
    }

    pub fn load_state(&mut self, entries: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        let mut found = 0;
        for (name, shape, data) in entries {
            let target: Option<&mut [f64]> = match name.as_str() {
                "pfn.weight" => Some(self.weight.value.data_mut()),
                "pfn.bias" => Some(self.bias.value.data_mut()),
                "pfn.gamma" => Some(self.gamma.value.data_mut()),
                "pfn.beta" => Some(self.beta.value.data_mut()),
                "pfn.running_mean" => Some(&mut self.running_mean),
                "pfn.running_var" => Some(&mut self.running_var),
                _ => None,
            };
            if let Some(t) = target {
                if t.len() != data.len() {
                    return Err(Error::Checkpoint(format!(
                        "pfn entry {name}: expected {} values, got {} (shape {shape:?})",
                        t.len(),
                        data.len()
                    )));
                }
                t.copy_from_slice(data);
                found += 1;
            }
        }
        if found != 6 {
            return Err(Error::Checkpoint(format!("pfn state incomplete: {found}/6 entries")));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a PFN forward evaluation.
#[derive(Debug, Clone)]
pub struct PfnCache {
    /// (pillar, slot) of each valid point, in evaluation order.
    point_slots: Vec<(usize, usize)>,
    /// Raw augmented features per valid point, `n_points x 9`.
    inputs: Vec<f64>,
    /// Normalized pre-affine activations, `n_points x F`.
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    /// Pre-ReLU activations, `n_points x F`.
    bn_out: Vec<f64>,
    /// Winning point index per `(f, pillar)`; ties go to the lowest slot.
    argmax: Vec<usize>,
}

/// Forward pass over every occupied slot. Empty slots never participate
/// in normalization statistics or the per-pillar max.
pub fn pfn_forward(pillars: &PillarSet, pfn: &mut Pfn, training: bool) -> Result<(Tensor, PfnCache)> {
    if pfn.weight.value.shape()[1] != POINT_FEATURE_DIM {
        return Err(Error::ShapeMismatch {
            expected: format!("pfn weight [F, {POINT_FEATURE_DIM}]"),
            got: format!("{:?}", pfn.weight.value.shape()),
        });
    }
    let f_dim = pfn.out_channels;
    let p_count = pillars.len();
    let mut point_slots = Vec::new();
    for (pi, &cnt) in pillars.counts.iter().enumerate() {
        for slot in 0..cnt {
            point_slots.push((pi, slot));
        }
    }
    let n_pts = point_slots.len();
    if n_pts == 0 {
        return Ok((
            Tensor::zeros(&[f_dim, 0]),
            PfnCache {
                point_slots,
                inputs: Vec::new(),
                xhat: Vec::new(),
                inv_std: vec![1.0; f_dim],
                bn_out: Vec::new(),
                argmax: Vec::new(),
            },
        ));
    }

    let mut inputs = vec![0.0; n_pts * POINT_FEATURE_DIM];
    for (i, &(pi, slot)) in point_slots.iter().enumerate() {
        inputs[i * POINT_FEATURE_DIM..(i + 1) * POINT_FEATURE_DIM]
            .copy_from_slice(pillars.point(pi, slot));
    }

    // linear
    let w = pfn.weight.value.data();
    let b = pfn.bias.value.data();
    let mut linear = vec![0.0; n_pts * f_dim];
    for i in 0..n_pts {
        let x = &inputs[i * POINT_FEATURE_DIM..(i + 1) * POINT_FEATURE_DIM];
        for f in 0..f_dim {
            let wr = &w[f * POINT_FEATURE_DIM..(f + 1) * POINT_FEATURE_DIM];
            let mut acc = b[f];
            for d in 0..POINT_FEATURE_DIM {
                acc += wr[d] * x[d];
            }
            linear[i * f_dim + f] = acc;
        }
    }

    // batch norm per channel over all valid points
    let m = n_pts as f64;
    let mut mean = vec![0.0; f_dim];
    let mut var = vec![0.0; f_dim];
    for i in 0..n_pts {
        for f in 0..f_dim {
            mean[f] += linear[i * f_dim + f];
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for i in 0..n_pts {
        for f in 0..f_dim {
            let d = linear[i * f_dim + f] - mean[f];
            var[f] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    if training {
        for f in 0..f_dim {
            pfn.running_mean[f] = (1.0 - BN_MOMENTUM) * pfn.running_mean[f] + BN_MOMENTUM * mean[f];
            pfn.running_var[f] = (1.0 - BN_MOMENTUM) * pfn.running_var[f] + BN_MOMENTUM * var[f];
        }
    }
    let (use_mean, use_inv_std) = if training {
        (mean.clone(), inv_std.clone())
    } else {
        (
            pfn.running_mean.clone(),
            pfn.running_var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(),
        )
    };

    let gamma = pfn.gamma.value.data();
    let beta = pfn.beta.value.data();
    let mut xhat = vec![0.0; n_pts * f_dim];
    let mut bn_out = vec![0.0; n_pts * f_dim];
    for i in 0..n_pts {
        for f in 0..f_dim {
            let xh = (linear[i * f_dim + f] - use_mean[f]) * use_inv_std[f];
            xhat[i * f_dim + f] = xh;
            bn_out[i * f_dim + f] = gamma[f] * xh + beta[f];
        }
    }

    // relu + per-pillar max (strictly-greater update: ties keep the
    // lowest slot index)
    let mut out = Tensor::full(&[f_dim, p_count], f64::NEG_INFINITY);
    let mut argmax = vec![usize::MAX; f_dim * p_count];
    {
        let od = out.data_mut();
        for (i, &(pi, _slot)) in point_slots.iter().enumerate() {
            for f in 0..f_dim {
                let v = bn_out[i * f_dim + f].max(0.0);
                let o = f * p_count + pi;
                if v > od[o] || argmax[o] == usize::MAX {
                    od[o] = v;
                    argmax[o] = i;
                }
            }
        }
    }

    Ok((
        out,
        PfnCache {
            point_slots,
            inputs,
            xhat,
            inv_std,
            bn_out,
            argmax,
        },
    ))
}

/// Gradients produced by `pfn_backward`.
#[derive(Debug, Clone)]
pub struct PfnGrads {
    pub d_weight: Tensor,
    pub d_bias: Tensor,
    pub d_gamma: Tensor,
    pub d_beta: Tensor,
    /// Gradient w.r.t. the augmented point features, `n_points x 9`,
    /// aligned with the cache's point order.
    pub d_inputs: Vec<f64>,
}

/// Exact gradients through max -> ReLU -> batch norm -> linear. The max
/// routes each upstream element to its argmax slot only. Assumes the
/// training-mode forward (batch statistics).
pub fn pfn_backward(pfn: &Pfn, cache: &PfnCache, upstream: &Tensor) -> PfnGrads {
    let f_dim = pfn.out_channels;
    let n_pts = cache.point_slots.len();
    let p_count = upstream.shape()[1];
    let mut d_bn_out = vec![0.0; n_pts * f_dim];
    let up = upstream.data();
    for f in 0..f_dim {
        for pi in 0..p_count {
            let o = f * p_count + pi;
            let i = cache.argmax[o];
            if i == usize::MAX {
                continue;
            }
            // relu subgradient at the winning point
            if cache.bn_out[i * f_dim + f] > 0.0 {
                d_bn_out[i * f_dim + f] += up[o];
            }
        }
    }

    // batch-norm backward per channel over points
    let gamma = pfn.gamma.value.data();
    let m = n_pts as f64;
    let mut d_gamma = vec![0.0; f_dim];
    let mut d_beta = vec![0.0; f_dim];
    for i in 0..n_pts {
        for f in 0..f_dim {
            d_gamma[f] += d_bn_out[i * f_dim + f] * cache.xhat[i * f_dim + f];
            d_beta[f] += d_bn_out[i * f_dim + f];
        }
    }
    let mut d_linear = vec![0.0; n_pts * f_dim];
    for i in 0..n_pts {
        for f in 0..f_dim {
            let coeff = gamma[f] * cache.inv_std[f] / m;
            d_linear[i * f_dim + f] = coeff
                * (m * d_bn_out[i * f_dim + f]
                    - d_beta[f]
                    - cache.xhat[i * f_dim + f] * d_gamma[f]);
        }
    }

    // linear backward
    let w = pfn.weight.value.data();
    let mut d_weight = Tensor::zeros(&[f_dim, POINT_FEATURE_DIM]);
    let mut d_bias = Tensor::zeros(&[f_dim]);
    let mut d_inputs = vec![0.0; n_pts * POINT_FEATURE_DIM];
    {
        let dw = d_weight.data_mut();
        let db = d_bias.data_mut();
        for i in 0..n_pts {
            let x = &cache.inputs[i * POINT_FEATURE_DIM..(i + 1) * POINT_FEATURE_DIM];
            for f in 0..f_dim {
                let g = d_linear[i * f_dim + f];
                if g == 0.0 {
                    continue;
                }
                db[f] += g;
                for d in 0..POINT_FEATURE_DIM {
                    dw[f * POINT_FEATURE_DIM + d] += g * x[d];
                    d_inputs[i * POINT_FEATURE_DIM + d] += g * w[f * POINT_FEATURE_DIM + d];
                }
            }
        }
    }

    PfnGrads {
        d_weight,
        d_bias,
        d_gamma: Tensor::from_vec(&[f_dim], d_gamma).unwrap(),
        d_beta: Tensor::from_vec(&[f_dim], d_beta).unwrap(),
        d_inputs,
    }
}

/// Place pillar feature columns at their lattice cells; every other cell
/// stays exactly zero. Output layout `[F, nx, ny]`.
pub fn scatter(features: &Tensor, coords: &[(usize, usize)], grid: &GridSpec) -> Result<Tensor> {
    let f_dim = features.shape()[0];
    let p_count = features.shape()[1];
    if p_count != coords.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} pillar columns", coords.len()),
            got: format!("{p_count}"),
        });
    }
    for &(ix, iy) in coords {
        if ix >= grid.nx || iy >= grid.ny {
            return Err(Error::OutOfRange {
                x: ix as f64,
                y: iy as f64,
            });
        }
    }
    let mut img = Tensor::zeros(&[f_dim, grid.nx, grid.ny]);
    let fd = features.data();
    let id = img.data_mut();
    let plane = grid.nx * grid.ny;
    for (pi, &(ix, iy)) in coords.iter().enumerate() {
        let cell = ix * grid.ny + iy;
        for f in 0..f_dim {
            id[f * plane + cell] = fd[f * p_count + pi];
        }
    }
    Ok(img)
}

/// Adjoint of `scatter`: read feature columns back out of a lattice map.
pub fn gather(image: &Tensor, coords: &[(usize, usize)]) -> Tensor {
    let f_dim = image.shape()[0];
    let (nx, ny) = (image.shape()[1], image.shape()[2]);
    let plane = nx * ny;
    let mut out = Tensor::zeros(&[f_dim, coords.len()]);
    let od = out.data_mut();
    let id = image.data();
    for (pi, &(ix, iy)) in coords.iter().enumerate() {
        let cell = ix * ny + iy;
        for f in 0..f_dim {
            od[f * coords.len() + pi] = id[f * plane + cell];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};

    fn kitti_grid() -> GridSpec {
        make_grid(0.0, 70.4, -40.0, 40.0, -3.0, 1.0, 0.16).unwrap()
    }

    #[test]
    fn grid_dims_from_range() {
        let g = kitti_grid();
        assert_eq!((g.nx, g.ny), (440, 500));
        let g1 = make_grid(0.0, 1.0, 0.0, 1.0, -1.0, 1.0, 1.0).unwrap();
        assert_eq!((g1.nx, g1.ny), (1, 1));
        let g2 = make_grid(0.0, 1.0, 0.0, 1.0, -1.0, 1.0, 0.3).unwrap();
        assert_eq!((g2.nx, g2.ny), (4, 4));
    }

    #[test]
    fn grid_rejects_bad_inputs() {
        assert!(make_grid(0.0, 1.0, 0.0, 1.0, -1.0, 1.0, 0.0).is_err());
        assert!(make_grid(0.0, 1.0, 0.0, 1.0, -1.0, 1.0, -0.1).is_err());
        assert!(make_grid(1.0, 0.0, 0.0, 1.0, -1.0, 1.0, 0.1).is_err());
        assert!(make_grid(0.0, 1.0, 2.0, 1.0, -1.0, 1.0, 0.1).is_err());
        assert!(make_grid(0.0, 1.0, 0.0, 1.0, 1.0, -1.0, 0.1).is_err());
    }

    fn pt(x: f64, y: f64, z: f64, r: f64) -> Point {
        Point { x, y, z, reflectance: r }
    }

    #[test]
    fn empty_cloud_gives_empty_pillar_set() {
        let g = kitti_grid();
        let ps = pillarize(&PointCloud::default(), &g, 100, 12000, 0);
        assert_eq!(ps.len(), 0);
        assert!(ps.is_empty());
    }

    #[test]
    fn single_point_at_pillar_center_has_zero_offsets() {
        let g = make_grid(0.0, 8.0, 0.0, 8.0, -3.0, 1.0, 1.0).unwrap();
        // pillar (3, 4) center is (3.5, 4.5)
        let cloud = PointCloud { points: vec![pt(3.5, 4.5, -1.0, 0.25)] };
        let ps = pillarize(&cloud, &g, 10, 100, 0);
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.coords[0], (3, 4));
        let f = ps.point(0, 0);
        assert_eq!(&f[0..4], &[3.5, 4.5, -1.0, 0.25]);
        for &v in &f[4..9] {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn centroid_offsets_match_hand_mean() {
        let g = make_grid(0.0, 8.0, 0.0, 8.0, -3.0, 1.0, 1.0).unwrap();
        let pts = [pt(2.1, 3.2, -1.0, 0.1), pt(2.4, 3.8, -0.4, 0.2), pt(2.9, 3.5, 0.4, 0.3)];
        let cloud = PointCloud { points: pts.to_vec() };
        let ps = pillarize(&cloud, &g, 10, 100, 0);
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.counts[0], 3);
        // independent mean
        let cx = (2.1 + 2.4 + 2.9) / 3.0;
        let cy = (3.2 + 3.8 + 3.5) / 3.0;
        let cz = (-1.0 - 0.4 + 0.4) / 3.0;
        for (slot, p) in pts.iter().enumerate() {
            let f = ps.point(0, slot);
            assert!((f[4] - (p.x - cx)).abs() < 1e-12);
            assert!((f[5] - (p.y - cy)).abs() < 1e-12);
            assert!((f[6] - (p.z - cz)).abs() < 1e-12);
            // pillar (2, 3) has center (2.5, 3.5)
            assert!((f[7] - (p.x - 2.5)).abs() < 1e-12);
            assert!((f[8] - (p.y - 3.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_and_boundary_points_are_dropped() {
        let g = make_grid(0.0, 4.0, 0.0, 4.0, -1.0, 1.0, 1.0).unwrap();
        let cloud = PointCloud {
            points: vec![
                pt(4.0, 1.0, 0.0, 0.0),    // x == front: dropped
                pt(-0.01, 1.0, 0.0, 0.0),  // x < back
                pt(1.0, 4.0, 0.0, 0.0),    // y == right
                pt(1.0, 1.0, 1.5, 0.0),    // z too high
                pt(1.0, 1.0, 1.0, 0.0),    // z == z_max: kept (closed)
                pt(f64::NAN, 1.0, 0.0, 0.0),
            ],
        };
        let ps = pillarize(&cloud, &g, 10, 100, 0);
        assert_eq!(ps.len(), 1);
        assert_eq!(ps.counts[0], 1);
    }

    #[test]
    fn per_pillar_overflow_keeps_first_points() {
        let g = make_grid(0.0, 4.0, 0.0, 4.0, -1.0, 1.0, 1.0).unwrap();
        let points: Vec<Point> = (0..7).map(|i| pt(0.5, 0.5, 0.0, i as f64 / 10.0)).collect();
        let ps = pillarize(&PointCloud { points }, &g, 5, 100, 0);
        assert_eq!(ps.counts[0], 5);
        for slot in 0..5 {
            assert!((ps.point(0, slot)[3] - slot as f64 / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pillar_subsample_is_seeded_and_bounded() {
        let g = make_grid(0.0, 16.0, 0.0, 16.0, -1.0, 1.0, 1.0).unwrap();
        let points: Vec<Point> = (0..16)
            .flat_map(|i| (0..16).map(move |j| pt(i as f64 + 0.5, j as f64 + 0.5, 0.0, 0.0)))
            .collect();
        let cloud = PointCloud { points };
        let a = pillarize(&cloud, &g, 10, 60, 7);
        let b = pillarize(&cloud, &g, 10, 60, 7);
        let c = pillarize(&cloud, &g, 10, 60, 8);
        assert_eq!(a.len(), 60);
        assert_eq!(a.coords, b.coords);
        assert_ne!(a.coords, c.coords);
        // kept pillars are a subset of the occupied ones, unique
        let mut seen = std::collections::HashSet::new();
        for &xy in &a.coords {
            assert!(seen.insert(xy));
        }
    }

    #[test]
    fn pillar_assignment_respects_half_open_cells() {
        use rand::Rng;
        let g = make_grid(0.0, 4.0, -2.0, 2.0, -1.0, 1.0, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Point> = (0..500)
            .map(|_| {
                pt(
                    rng.gen_range(-0.5..4.5),
                    rng.gen_range(-2.5..2.5),
                    rng.gen_range(-1.2..1.2),
                    rng.gen_range(0.0..1.0),
                )
            })
            .collect();
        let in_range = points
            .iter()
            .filter(|p| g.in_range(p.x, p.y, p.z))
            .count();
        let ps = pillarize(&PointCloud { points }, &g, 1000, 10000, 0);
        let total: usize = ps.counts.iter().sum();
        assert_eq!(total, in_range);
        for (pi, &(ix, iy)) in ps.coords.iter().enumerate() {
            for slot in 0..ps.counts[pi] {
                let f = ps.point(pi, slot);
                let (x, y) = (f[0], f[1]);
                assert!(g.back + ix as f64 * g.b <= x && x < g.back + (ix as f64 + 1.0) * g.b);
                assert!(g.left + iy as f64 * g.b <= y && y < g.left + (iy as f64 + 1.0) * g.b);
            }
        }
    }

    /// Straightforward single-loop reimplementation of the PFN forward.
    fn pfn_naive(pillars: &PillarSet, pfn: &Pfn) -> Vec<f64> {
        let f_dim = pfn.out_channels;
        let w = pfn.weight.value.data();
        let b = pfn.bias.value.data();
        let gamma = pfn.gamma.value.data();
        let beta = pfn.beta.value.data();
        let mut per_point: Vec<Vec<f64>> = Vec::new();
        let mut owners: Vec<usize> = Vec::new();
        for pi in 0..pillars.len() {
            for slot in 0..pillars.counts[pi] {
                let x = pillars.point(pi, slot);
                let mut u = vec![0.0; f_dim];
                for f in 0..f_dim {
                    u[f] = b[f]
                        + (0..POINT_FEATURE_DIM)
                            .map(|d| w[f * POINT_FEATURE_DIM + d] * x[d])
                            .sum::<f64>();
                }
                per_point.push(u);
                owners.push(pi);
            }
        }
        let m = per_point.len() as f64;
        let mut out = vec![0.0; f_dim * pillars.len()];
        for f in 0..f_dim {
            let mean = per_point.iter().map(|u| u[f]).sum::<f64>() / m;
            let var = per_point.iter().map(|u| (u[f] - mean).powi(2)).sum::<f64>() / m;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for pi in 0..pillars.len() {
                let best = per_point
                    .iter()
                    .zip(&owners)
                    .filter(|(_, &o)| o == pi)
                    .map(|(u, _)| (gamma[f] * (u[f] - mean) * inv + beta[f]).max(0.0))
                    .fold(f64::NEG_INFINITY, f64::max);
                out[f * pillars.len() + pi] = best;
            }
        }
        out
    }

    fn random_pillars(rng: &mut rand_chacha::ChaCha8Rng, p: usize, max_points: usize) -> PillarSet {
        let counts: Vec<usize> = (0..p).map(|_| rng.gen_range(1..=max_points)).collect();
        let mut features = vec![0.0; p * max_points * POINT_FEATURE_DIM];
        for pi in 0..p {
            for slot in 0..counts[pi] {
                for d in 0..POINT_FEATURE_DIM {
                    features[(pi * max_points + slot) * POINT_FEATURE_DIM + d] =
                        rng.gen_range(-1.0..1.0);
                }
            }
        }
        PillarSet {
            features,
            counts,
            coords: (0..p).map(|i| (i, 0)).collect(),
            max_points,
        }
    }

    #[test]
    fn pfn_forward_matches_naive_reimplementation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pillars = random_pillars(&mut rng, 5, 4);
        let mut pfn = Pfn::new(6, 21);
        let (out, _) = pfn_forward(&pillars, &mut pfn, true).unwrap();
        let naive = pfn_naive(&pillars, &pfn);
        for (a, b) in out.data().iter().zip(&naive) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn pfn_two_points_take_elementwise_max() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let mut pillars = random_pillars(&mut rng, 1, 2);
        pillars.counts[0] = 2;
        for d in 0..POINT_FEATURE_DIM {
            pillars.features[POINT_FEATURE_DIM + d] = rng.gen_range(-1.0..1.0);
        }
        let mut pfn = Pfn::new(4, 3);
        let (out, cache) = pfn_forward(&pillars, &mut pfn, true).unwrap();
        // recompute per-point activations from the cache and check max
        for f in 0..4 {
            let v0 = cache.bn_out[f].max(0.0);
            let v1 = cache.bn_out[4 + f].max(0.0);
            assert!((out.data()[f] - v0.max(v1)).abs() < 1e-12);
        }
    }

    #[test]
    fn pfn_permutation_invariant_within_pillar() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut pillars = random_pillars(&mut rng, 3, 5);
        let mut pfn = Pfn::new(4, 9);
        let (out_a, _) = pfn_forward(&pillars, &mut pfn.clone(), true).unwrap();
        // reverse the slots of pillar 1
        let cnt = pillars.counts[1];
        let base = pillars.max_points * POINT_FEATURE_DIM;
        let seg = pillars.features[base..base + cnt * POINT_FEATURE_DIM].to_vec();
        for (i, chunk) in seg.chunks(POINT_FEATURE_DIM).rev().enumerate() {
            pillars.features[base + i * POINT_FEATURE_DIM..base + (i + 1) * POINT_FEATURE_DIM]
                .copy_from_slice(chunk);
        }
        let (out_b, _) = pfn_forward(&pillars, &mut pfn, true).unwrap();
        for (a, b) in out_a.data().iter().zip(out_b.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pfn_rejects_bad_weight_shape() {
        let mut pfn = Pfn::new(4, 0);
        pfn.weight.value = Tensor::zeros(&[4, 7]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let pillars = random_pillars(&mut rng, 2, 2);
        assert!(pfn_forward(&pillars, &mut pfn, true).is_err());
    }

    #[test]
    fn pfn_backward_zero_upstream_gives_zero_grads() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let pillars = random_pillars(&mut rng, 3, 3);
        let mut pfn = Pfn::new(4, 2);
        let (out, cache) = pfn_forward(&pillars, &mut pfn, true).unwrap();
        let grads = pfn_backward(&pfn, &cache, &Tensor::zeros(out.shape()));
        assert_eq!(grads.d_weight.l2_norm(), 0.0);
        assert_eq!(grads.d_bias.l2_norm(), 0.0);
        assert_eq!(grads.d_gamma.l2_norm(), 0.0);
        assert_eq!(grads.d_beta.l2_norm(), 0.0);
    }

    #[test]
    fn pfn_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let pillars = random_pillars(&mut rng, 4, 3);
        let pfn = Pfn::new(5, 33);
        let (out0, cache) = pfn_forward(&pillars, &mut pfn.clone(), true).unwrap();
        let gsel: Vec<f64> = (0..out0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream = Tensor::from_vec(out0.shape(), gsel.clone()).unwrap();
        let grads = pfn_backward(&pfn, &cache, &upstream);

        let objective = |weights: &Pfn, pl: &PillarSet| -> f64 {
            let (o, _) = pfn_forward(pl, &mut weights.clone(), true).unwrap();
            o.data().iter().zip(&gsel).map(|(a, g)| a * g).sum()
        };

        // weight
        let fd_w = central_diff(
            |wv| {
                let mut p2 = pfn.clone();
                p2.weight.value.data_mut().copy_from_slice(wv);
                objective(&p2, &pillars)
            },
            pfn.weight.value.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.d_weight.data(), &fd_w) < 1e-4);
        // bias
        let fd_b = central_diff(
            |bv| {
                let mut p2 = pfn.clone();
                p2.bias.value.data_mut().copy_from_slice(bv);
                objective(&p2, &pillars)
            },
            pfn.bias.value.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.d_bias.data(), &fd_b) < 1e-4);
        // gamma / beta
        let fd_g = central_diff(
            |gv| {
                let mut p2 = pfn.clone();
                p2.gamma.value.data_mut().copy_from_slice(gv);
                objective(&p2, &pillars)
            },
            pfn.gamma.value.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.d_gamma.data(), &fd_g) < 1e-4);
        let fd_be = central_diff(
            |bv| {
                let mut p2 = pfn.clone();
                p2.beta.value.data_mut().copy_from_slice(bv);
                objective(&p2, &pillars)
            },
            pfn.beta.value.data(),
            1e-6,
        );
        assert!(max_rel_err(grads.d_beta.data(), &fd_be) < 1e-4);
        // inputs
        let valid: Vec<(usize, usize)> = cache.point_slots.clone();
        let fd_x = central_diff(
            |xs| {
                let mut pl2 = pillars.clone();
                for (i, &(pi, slot)) in valid.iter().enumerate() {
                    let o = (pi * pl2.max_points + slot) * POINT_FEATURE_DIM;
                    pl2.features[o..o + POINT_FEATURE_DIM]
                        .copy_from_slice(&xs[i * POINT_FEATURE_DIM..(i + 1) * POINT_FEATURE_DIM]);
                }
                objective(&pfn, &pl2)
            },
            &cache.inputs,
            1e-6,
        );
        assert!(max_rel_err(&grads.d_inputs, &fd_x) < 1e-4);
    }

    #[test]
    fn scatter_trivials_and_gather_roundtrip() {
        let g = make_grid(0.0, 8.0, 0.0, 6.0, -1.0, 1.0, 1.0).unwrap();
        // empty
        let img = scatter(&Tensor::zeros(&[3, 0]), &[], &g).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
        // single pillar at (3, 4)
        let feats = Tensor::from_vec(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let img = scatter(&feats, &[(3, 4)], &g).unwrap();
        for f in 0..3 {
            for x in 0..8 {
                for y in 0..6 {
                    let v = img.at3(f, x, y);
                    if (x, y) == (3, 4) {
                        assert_eq!(v, (f + 1) as f64);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
        // roundtrip
        let coords = vec![(0, 0), (7, 5), (2, 3)];
        let feats = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let img = scatter(&feats, &coords, &g).unwrap();
        let back = gather(&img, &coords);
        assert_eq!(back.data(), feats.data());
        // out-of-range coord rejected
        assert!(scatter(&Tensor::zeros(&[2, 1]), &[(8, 0)], &g).is_err());
    }
}

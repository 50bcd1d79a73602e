//! Post-processing benchmark: single-threaded max-pool/AND peak
//! extraction against single-threaded rotated NMS on equivalent inputs,
//! with an output-agreement check on isolated-peak scenes.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{make_grid, GridSpec};
use crate::geometry::{rotated_nms, Box3D, Detection};
use crate::net::tensor::Tensor;
use crate::targets::extract_peaks;

/// How candidate boxes are laid out on the lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlapProfile {
    /// Peaks pairwise more than 2 pixels apart, boxes pairwise disjoint:
    /// both methods must keep the identical object set.
    Isolated,
    /// Clustered, heavily overlapping candidates; outputs may differ.
    Dense,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub n_candidates: usize,
    pub nms_median_s: f64,
    pub peak_median_s: f64,
    /// True when both methods kept exactly the same object set.
    pub identical: bool,
    /// nms_median_s / peak_median_s.
    pub ratio: f64,
    pub profile: OverlapProfile,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        format!(
            "method,n,median_s,identical,ratio\nnms,{},{},{},{}\npeaks,{},{},{},{}\n",
            self.n_candidates,
            self.nms_median_s,
            self.identical,
            self.ratio,
            self.n_candidates,
            self.peak_median_s,
            self.identical,
            self.ratio
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// The benchmark lattice: the default car-detection grid.
fn bench_grid() -> GridSpec {
    make_grid(0.0, 70.4, -40.0, 40.0, -3.0, 1.0, 0.16).expect("static grid is valid")
}

/// Generate a dense score map and the equivalent candidate list, time
/// both post-processing routes, and verify output agreement.
pub fn bench_postprocessing(
    n_candidates: usize,
    profile: OverlapProfile,
    seed: u64,
    repeats: usize,
) -> BenchReport {
    assert!(n_candidates >= 1);
    let grid = bench_grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = Tensor::zeros(&[1, grid.nx, grid.ny]);
    let mut dets: Vec<Detection> = Vec::with_capacity(n_candidates);

    match profile {
        OverlapProfile::Isolated => {
            // stride-4 lattice of slots, margin 2 from the border
            let mut slots: Vec<(usize, usize)> = (0..(grid.nx - 4) / 4)
                .flat_map(|i| (0..(grid.ny - 4) / 4).map(move |j| (2 + 4 * i, 2 + 4 * j)))
                .collect();
            slots.shuffle(&mut rng);
            assert!(slots.len() >= n_candidates, "lattice too small for n");
            for &(px, py) in slots.iter().take(n_candidates) {
                let score = rng.gen_range(0.5..1.0);
                map.set3(0, px, py, score);
                let (wx, wy) = grid.pillar_center(px, py);
                dets.push(Detection {
                    box3d: Box3D::new(wx, wy, -1.0, 0.5, 0.5, 1.5, 0.0).unwrap(),
                    score,
                    class_id: 0,
                });
            }
        }
        OverlapProfile::Dense => {
            let n_clusters = (n_candidates / 8).max(1);
            let centers: Vec<(f64, f64)> = (0..n_clusters)
                .map(|_| {
                    (
                        rng.gen_range(grid.back + 5.0..grid.front - 5.0),
                        rng.gen_range(grid.left + 5.0..grid.right - 5.0),
                    )
                })
                .collect();
            for k in 0..n_candidates {
                let (cx, cy) = centers[k % n_clusters];
                let x = cx + rng.gen_range(-1.5..1.5);
                let y = cy + rng.gen_range(-1.5..1.5);
                let score = rng.gen_range(0.3..1.0);
                let (px, py) = grid.cell_of(x, y);
                let o = map.off3(0, px, py);
                if score > map.data()[o] {
                    map.data_mut()[o] = score;
                }
                dets.push(Detection {
                    box3d: Box3D::new(
                        x,
                        y,
                        -1.0,
                        rng.gen_range(1.6..2.0),
                        rng.gen_range(3.5..4.5),
                        1.5,
                        rng.gen_range(-0.5..0.5),
                    )
                    .unwrap(),
                    score,
                    class_id: 0,
                });
            }
        }
    }

    let repeats = repeats.max(1);
    let nms_threshold = 0.5;
    let mut nms_times = Vec::with_capacity(repeats);
    let mut kept_indices = Vec::new();
    for _ in 0..repeats {
        let t0 = Instant::now();
        kept_indices = rotated_nms(&dets, nms_threshold);
        nms_times.push(t0.elapsed().as_secs_f64());
    }
    let mut peak_times = Vec::with_capacity(repeats);
    let mut peaks = Vec::new();
    for _ in 0..repeats {
        let t0 = Instant::now();
        peaks = extract_peaks(&map, n_candidates, 0.1);
        peak_times.push(t0.elapsed().as_secs_f64());
    }

    // agreement on the surviving object set, compared as lattice cells
    let mut nms_cells: Vec<(usize, usize)> = kept_indices
        .iter()
        .map(|&i| grid.cell_of(dets[i].box3d.x, dets[i].box3d.y))
        .collect();
    nms_cells.sort_unstable();
    nms_cells.dedup();
    let mut peak_cells: Vec<(usize, usize)> = peaks.iter().map(|p| (p.px, p.py)).collect();
    peak_cells.sort_unstable();
    let identical = nms_cells == peak_cells;

    let nms_median_s = median(nms_times);
    let peak_median_s = median(peak_times);
    BenchReport {
        n_candidates,
        nms_median_s,
        peak_median_s,
        identical,
        ratio: nms_median_s / peak_median_s,
        profile,
    }
}

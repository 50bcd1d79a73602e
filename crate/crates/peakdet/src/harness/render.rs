//! Diagnostic rendering: heatmaps as binary PPM (P6) images with a hot
//! colormap, detection centers marked in cyan. Byte-deterministic.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::net::tensor::Tensor;

fn hot_color(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let comp = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [comp(3.0 * v), comp(3.0 * v - 1.0), comp(3.0 * v - 2.0)]
}

/// Render channel `channel` of a `[C, nx, ny]` map. Rows are the x axis,
/// columns the y axis. `marks` are lattice pixels drawn as cyan crosses.
pub fn render_heatmap_bytes(map: &Tensor, channel: usize, marks: &[(usize, usize)]) -> Vec<u8> {
    let (nx, ny) = (map.shape()[1], map.shape()[2]);
    let mut pixels = vec![0u8; nx * ny * 3];
    for ix in 0..nx {
        for iy in 0..ny {
            let rgb = hot_color(map.at3(channel, ix, iy));
            let o = (ix * ny + iy) * 3;
            pixels[o..o + 3].copy_from_slice(&rgb);
        }
    }
    const MARK: [u8; 3] = [0, 255, 255];
    for &(cx, cy) in marks {
        for d in -2i64..=2 {
            for (px, py) in [
                (cx as i64 + d, cy as i64),
                (cx as i64, cy as i64 + d),
            ] {
                if px >= 0 && py >= 0 && (px as usize) < nx && (py as usize) < ny {
                    let o = (px as usize * ny + py as usize) * 3;
                    pixels[o..o + 3].copy_from_slice(&MARK);
                }
            }
        }
    }
    let mut out = format!("P6\n{ny} {nx}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    out
}

pub fn render_heatmap(
    map: &Tensor,
    channel: usize,
    marks: &[(usize, usize)],
    path: &Path,
) -> Result<()> {
    fs::write(path, render_heatmap_bytes(map, channel, marks))?;
    Ok(())
}

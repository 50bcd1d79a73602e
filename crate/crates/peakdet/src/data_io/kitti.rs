//! KITTI on-disk formats: velodyne point binaries, label text, calibration
//! files, and camera-FOV cropping.

use crate::encoder::{Point, PointCloud};
use crate::error::{Error, Result};
use crate::geometry::{canonical_angle, Box3D};

/// Bytes per point record: four little-endian f32 (x, y, z, reflectance).
const RECORD_BYTES: usize = 16;

pub fn read_velodyne_bin(bytes: &[u8]) -> Result<PointCloud> {
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::Format {
            offset: bytes.len() - bytes.len() % RECORD_BYTES,
            msg: format!(
                "truncated point record: {} trailing bytes (records are {RECORD_BYTES} bytes)",
                bytes.len() % RECORD_BYTES
            ),
        });
    }
    let mut points = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for rec in bytes.chunks_exact(RECORD_BYTES) {
        let f = |i: usize| f32::from_le_bytes([rec[i], rec[i + 1], rec[i + 2], rec[i + 3]]) as f64;
        points.push(Point {
            x: f(0),
            y: f(4),
            z: f(8),
            reflectance: f(12),
        });
    }
    Ok(PointCloud { points })
}

pub fn write_velodyne_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.points.len() * RECORD_BYTES);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.reflectance] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Rectified-camera calibration: projection P2, rectification R0, and the
/// LiDAR-to-camera extrinsic, with precomputed inverses.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub p2: [[f64; 4]; 3],
    pub r0: [[f64; 3]; 3],
    pub tr_velo_to_cam: [[f64; 4]; 3],
    r0_inv: [[f64; 3]; 3],
    tr_inv: [[f64; 4]; 3],
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b, c, d) = (
                m[(i + 1) % 3][(j + 1) % 3],
                m[(i + 1) % 3][(j + 2) % 3],
                m[(i + 2) % 3][(j + 1) % 3],
                m[(i + 2) % 3][(j + 2) % 3],
            );
            // transpose of the cofactor matrix
            inv[j][i] = (a * d - b * c) * inv_det;
        }
    }
    Some(inv)
}

impl Calibration {
    pub fn new(p2: [[f64; 4]; 3], r0: [[f64; 3]; 3], tr: [[f64; 4]; 3]) -> Result<Self> {
        let r0_inv = invert3(&r0)
            .ok_or_else(|| Error::Calibration("singular R0_rect".into()))?;
        let rot = [
            [tr[0][0], tr[0][1], tr[0][2]],
            [tr[1][0], tr[1][1], tr[1][2]],
            [tr[2][0], tr[2][1], tr[2][2]],
        ];
        let rot_inv = invert3(&rot)
            .ok_or_else(|| Error::Calibration("singular Tr_velo_to_cam".into()))?;
        let t = [tr[0][3], tr[1][3], tr[2][3]];
        let mut tr_inv = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                tr_inv[i][j] = rot_inv[i][j];
            }
            tr_inv[i][3] = -(rot_inv[i][0] * t[0] + rot_inv[i][1] * t[1] + rot_inv[i][2] * t[2]);
        }
        Ok(Self { p2, r0, tr_velo_to_cam: tr, r0_inv, tr_inv })
    }

    pub fn identity() -> Self {
        let mut p2 = [[0.0; 4]; 3];
        let mut r0 = [[0.0; 3]; 3];
        let mut tr = [[0.0; 4]; 3];
        for i in 0..3 {
            p2[i][i] = 1.0;
            r0[i][i] = 1.0;
            tr[i][i] = 1.0;
        }
        Self::new(p2, r0, tr).expect("identity is invertible")
    }

    /// LiDAR point to rectified camera coordinates.
    pub fn velo_to_cam(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let tr = &self.tr_velo_to_cam;
        let cx = tr[0][0] * x + tr[0][1] * y + tr[0][2] * z + tr[0][3];
        let cy = tr[1][0] * x + tr[1][1] * y + tr[1][2] * z + tr[1][3];
        let cz = tr[2][0] * x + tr[2][1] * y + tr[2][2] * z + tr[2][3];
        let r = &self.r0;
        (
            r[0][0] * cx + r[0][1] * cy + r[0][2] * cz,
            r[1][0] * cx + r[1][1] * cy + r[1][2] * cz,
            r[2][0] * cx + r[2][1] * cy + r[2][2] * cz,
        )
    }

    /// Rectified camera coordinates back to the LiDAR frame.
    pub fn cam_to_velo(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let r = &self.r0_inv;
        let ux = r[0][0] * x + r[0][1] * y + r[0][2] * z;
        let uy = r[1][0] * x + r[1][1] * y + r[1][2] * z;
        let uz = r[2][0] * x + r[2][1] * y + r[2][2] * z;
        let t = &self.tr_inv;
        (
            t[0][0] * ux + t[0][1] * uy + t[0][2] * uz + t[0][3],
            t[1][0] * ux + t[1][1] * uy + t[1][2] * uz + t[1][3],
            t[2][0] * ux + t[2][1] * uy + t[2][2] * uz + t[2][3],
        )
    }

    /// Project a rectified-camera point; returns (u, v, depth).
    pub fn cam_to_image(&self, x: f64, y: f64, z: f64) -> (f64, f64, f64) {
        let p = &self.p2;
        let u = p[0][0] * x + p[0][1] * y + p[0][2] * z + p[0][3];
        let v = p[1][0] * x + p[1][1] * y + p[1][2] * z + p[1][3];
        let w = p[2][0] * x + p[2][1] * y + p[2][2] * z + p[2][3];
        (u / w, v / w, w)
    }
}

/// Parse a KITTI `calib` file (P2, R0_rect, Tr_velo_to_cam keys).
pub fn parse_calib(text: &str) -> Result<Calibration> {
    let mut p2: Option<Vec<f64>> = None;
    let mut r0: Option<Vec<f64>> = None;
    let mut tr: Option<Vec<f64>> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, rest)) = line.split_once(':') else { continue };
        let vals: Vec<f64> = rest
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>().map_err(|e| Error::Parse {
                    line: lineno + 1,
                    msg: format!("bad number {t:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        match key.trim() {
            "P2" => p2 = Some(vals),
            "R0_rect" => r0 = Some(vals),
            "Tr_velo_to_cam" => tr = Some(vals),
            _ => {}
        }
    }
    let p2 = p2.ok_or_else(|| Error::Calibration("missing P2".into()))?;
    let r0 = r0.ok_or_else(|| Error::Calibration("missing R0_rect".into()))?;
    let tr = tr.ok_or_else(|| Error::Calibration("missing Tr_velo_to_cam".into()))?;
    if p2.len() != 12 || r0.len() != 9 || tr.len() != 12 {
        return Err(Error::Calibration(format!(
            "bad matrix sizes: P2 {} (want 12), R0 {} (want 9), Tr {} (want 12)",
            p2.len(),
            r0.len(),
            tr.len()
        )));
    }
    let to34 = |v: &[f64]| {
        let mut m = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..4 {
                m[i][j] = v[i * 4 + j];
            }
        }
        m
    };
    let mut ronly = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            ronly[i][j] = r0[i * 3 + j];
        }
    }
    Calibration::new(to34(&p2), ronly, to34(&tr))
}

/// One labeled object, LiDAR frame, with KITTI difficulty metadata.
#[derive(Debug, Clone)]
pub struct LabeledBox {
    pub box3d: Box3D,
    pub class: String,
    pub truncation: f64,
    pub occlusion: i32,
    pub alpha: f64,
    /// Image-plane box (x1, y1, x2, y2).
    pub bbox2d: [f64; 4],
    pub score: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct LabelFile {
    pub boxes: Vec<LabeledBox>,
    pub dont_care: Vec<[f64; 4]>,
}

/// LiDAR yaw from the KITTI camera-frame `rotation_y`.
pub fn rotation_y_to_lidar_yaw(ry: f64) -> f64 {
    canonical_angle(-ry - std::f64::consts::FRAC_PI_2)
}

pub fn lidar_yaw_to_rotation_y(theta: f64) -> f64 {
    canonical_angle(-theta - std::f64::consts::FRAC_PI_2)
}

/// Parse a `label_2` file. Boxes come out in the LiDAR frame: the
/// camera-frame bottom-center is converted with the calibration and
/// lifted by h/2.
pub fn parse_kitti_labels(text: &str, calib: &Calibration) -> Result<LabelFile> {
    let mut out = LabelFile::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected >= 15 fields, got {}", fields.len()),
            });
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| Error::Parse {
                line: lineno + 1,
                msg: format!("field {i} ({:?}): {e}", fields[i]),
            })
        };
        let class = fields[0].to_string();
        let bbox2d = [num(4)?, num(5)?, num(6)?, num(7)?];
        if class == "DontCare" {
            out.dont_care.push(bbox2d);
            continue;
        }
        let truncation = num(1)?;
        let occlusion = num(2)? as i32;
        let alpha = num(3)?;
        let (h, w, l) = (num(8)?, num(9)?, num(10)?);
        let (cam_x, cam_y, cam_z) = (num(11)?, num(12)?, num(13)?);
        let ry = num(14)?;
        let score = if fields.len() > 15 { Some(num(15)?) } else { None };
        let (vx, vy, vz) = calib.cam_to_velo(cam_x, cam_y, cam_z);
        let box3d = Box3D::new(vx, vy, vz + h / 2.0, w, l, h, rotation_y_to_lidar_yaw(ry))
            .map_err(|e| Error::Parse { line: lineno + 1, msg: e.to_string() })?;
        out.boxes.push(LabeledBox {
            box3d,
            class,
            truncation,
            occlusion,
            alpha,
            bbox2d,
            score,
        });
    }
    Ok(out)
}

/// Render labeled boxes back to `label_2` text (6-decimal fields, score
/// column when present).
pub fn write_kitti_labels(boxes: &[LabeledBox], calib: &Calibration) -> String {
    let mut out = String::new();
    for lb in boxes {
        let b = &lb.box3d;
        let (cx, cy, cz) = calib.velo_to_cam(b.x, b.y, b.z - b.h / 2.0);
        let ry = lidar_yaw_to_rotation_y(b.theta);
        out.push_str(&format!(
            "{} {:.6} {} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            lb.class,
            lb.truncation,
            lb.occlusion,
            lb.alpha,
            lb.bbox2d[0],
            lb.bbox2d[1],
            lb.bbox2d[2],
            lb.bbox2d[3],
            b.h,
            b.w,
            b.l,
            cx,
            cy,
            cz,
            ry
        ));
        if let Some(s) = lb.score {
            out.push_str(&format!(" {s:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Keep points whose camera projection lands inside the image rectangle
/// with positive depth. Idempotent.
pub fn fov_crop(cloud: &PointCloud, calib: &Calibration, image_dims: (usize, usize)) -> PointCloud {
    let (img_w, img_h) = (image_dims.0 as f64, image_dims.1 as f64);
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            let (cx, cy, cz) = calib.velo_to_cam(p.x, p.y, p.z);
            if cz <= 0.0 {
                return false;
            }
            let (u, v, depth) = calib.cam_to_image(cx, cy, cz);
            depth > 0.0 && u >= 0.0 && u < img_w && v >= 0.0 && v < img_h
        })
        .cloned()
        .collect();
    PointCloud { points }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn velodyne_decode_single_record() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let cloud = read_velodyne_bin(&bytes).unwrap();
        assert_eq!(cloud.points.len(), 1);
        let p = cloud.points[0];
        assert_eq!((p.x, p.y, p.z, p.reflectance), (1.0, 2.0, 3.0, 0.5));
    }

    #[test]
    fn velodyne_empty_and_truncated() {
        assert!(read_velodyne_bin(&[]).unwrap().points.is_empty());
        let err = read_velodyne_bin(&[0u8; 18]).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 16),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn velodyne_roundtrip_is_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(41);
        let cloud = PointCloud {
            points: (0..1000)
                .map(|_| Point {
                    x: rng.gen::<f32>() as f64 * 100.0 - 50.0,
                    y: rng.gen::<f32>() as f64 * 100.0 - 50.0,
                    z: rng.gen::<f32>() as f64 * 4.0 - 3.0,
                    reflectance: rng.gen::<f32>() as f64,
                })
                .collect(),
        };
        // quantize to f32 first so the roundtrip is exact
        let bytes = write_velodyne_bin(&cloud);
        let cloud32 = read_velodyne_bin(&bytes).unwrap();
        let bytes2 = write_velodyne_bin(&cloud32);
        assert_eq!(bytes, bytes2);
        let cloud32b = read_velodyne_bin(&bytes2).unwrap();
        assert_eq!(cloud32, cloud32b);
    }

    #[test]
    fn label_line_identity_calibration_hand_oracle() {
        let calib = Calibration::identity();
        // h=1.5 w=1.6 l=3.9 at camera (5, 2, -1), ry = 0.3
        let text = "Car 0.10 1 0.20 10 20 30 40 1.5 1.6 3.9 5.0 2.0 -1.0 0.3\n";
        let parsed = parse_kitti_labels(text, &calib).unwrap();
        assert_eq!(parsed.boxes.len(), 1);
        let b = &parsed.boxes[0].box3d;
        // identity calib: velo == cam; z lifted by h/2
        assert!((b.x - 5.0).abs() < 1e-12);
        assert!((b.y - 2.0).abs() < 1e-12);
        assert!((b.z - (-1.0 + 0.75)).abs() < 1e-12);
        assert_eq!((b.w, b.l, b.h), (1.6, 3.9, 1.5));
        let want_theta = canonical_angle(-0.3 - std::f64::consts::FRAC_PI_2);
        assert!((b.theta - want_theta).abs() < 1e-12);
        assert_eq!(parsed.boxes[0].occlusion, 1);
        assert!((parsed.boxes[0].truncation - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dont_care_lines_are_separated() {
        let calib = Calibration::identity();
        let text = "DontCare -1 -1 -10 559.62 175.83 575.40 183.15 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    Car 0.0 0 0.0 0 0 10 10 1.5 1.6 3.9 2.0 1.0 0.0 0.1\n";
        let parsed = parse_kitti_labels(text, &calib).unwrap();
        assert_eq!(parsed.boxes.len(), 1);
        assert_eq!(parsed.dont_care.len(), 1);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let calib = Calibration::identity();
        let err = parse_kitti_labels("Car 1 2 3\n", &calib).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_writer_roundtrips_to_printed_precision() {
        let calib = Calibration::identity();
        let text = "Car 0.100000 1 0.200000 10.000000 20.000000 30.000000 40.000000 \
                    1.500000 1.600000 3.900000 5.000000 2.000000 -1.000000 0.300000 0.900000\n";
        let parsed = parse_kitti_labels(text, &calib).unwrap();
        let rendered = write_kitti_labels(&parsed.boxes, &calib);
        assert_eq!(rendered, text);
        // and it is stable under another pass
        let reparsed = parse_kitti_labels(&rendered, &calib).unwrap();
        assert_eq!(write_kitti_labels(&reparsed.boxes, &calib), rendered);
    }

    #[test]
    fn calib_parse_and_singular_rejection() {
        let text = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
        let calib = parse_calib(text).unwrap();
        // velo x-forward maps to camera z-forward
        let (cx, cy, cz) = calib.velo_to_cam(5.0, 1.0, -0.5);
        assert_eq!((cx, cy, cz), (-1.0, 0.5, 5.0));
        let (vx, vy, vz) = calib.cam_to_velo(cx, cy, cz);
        assert!((vx - 5.0).abs() < 1e-12 && (vy - 1.0).abs() < 1e-12 && (vz + 0.5).abs() < 1e-12);
        let singular = "P2: 1 0 0 0 0 1 0 0 0 0 1 0\n\
                        R0_rect: 1 0 0 0 1 0 1 0 0\n\
                        Tr_velo_to_cam: 0 0 0 0 0 0 -1 0 1 0 0 0\n";
        assert!(parse_calib(singular).is_err());
    }

    #[test]
    fn fov_crop_behavior_and_idempotence() {
        // realistic-shaped projection: velo x-forward -> cam z-forward
        let text = "P2: 700 0 600 0 0 700 200 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
        let calib = parse_calib(text).unwrap();
        let dims = (1242, 375);
        let cloud = PointCloud {
            points: vec![
                Point { x: 10.0, y: 0.0, z: -0.7, reflectance: 0.1 }, // ahead: kept
                Point { x: -10.0, y: 0.0, z: -0.7, reflectance: 0.1 }, // behind camera
                Point { x: 5.0, y: 30.0, z: -0.7, reflectance: 0.1 },  // far to the side
            ],
        };
        let cropped = fov_crop(&cloud, &calib, dims);
        assert_eq!(cropped.points.len(), 1);
        assert_eq!(cropped.points[0].x, 10.0);
        let again = fov_crop(&cropped, &calib, dims);
        assert_eq!(cropped, again);
        assert!(fov_crop(&PointCloud::default(), &calib, dims).points.is_empty());
    }

    #[test]
    fn point_projecting_to_image_center_is_kept() {
        let text = "P2: 700 0 621 0 0 700 187.5 0 0 0 1 0\n\
                    R0_rect: 1 0 0 0 1 0 0 0 1\n\
                    Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0\n";
        let calib = parse_calib(text).unwrap();
        // hand oracle: velo (10, 0, 0) -> cam (0, 0, 10) -> u = 621, v = 187.5
        let (cx, cy, cz) = calib.velo_to_cam(10.0, 0.0, 0.0);
        let (u, v, depth) = calib.cam_to_image(cx, cy, cz);
        assert!((u - 621.0).abs() < 1e-9 && (v - 187.5).abs() < 1e-9 && depth > 0.0);
        let cloud = PointCloud { points: vec![Point { x: 10.0, y: 0.0, z: 0.0, reflectance: 0.0 }] };
        assert_eq!(fov_crop(&cloud, &calib, (1242, 375)).points.len(), 1);
    }
}

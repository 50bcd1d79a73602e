//! Dataset ingestion: KITTI-format directories (point binaries, labels,
//! calibration, split files), the ground-truth database used for paste
//! augmentation, and a synthetic scene generator.

pub mod kitti;
pub mod synth;

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::encoder::{Point, PointCloud};
use crate::error::Result;
use crate::geometry::{Box3D, Detection};

pub use kitti::{
    fov_crop, parse_calib, parse_kitti_labels, read_velodyne_bin, write_kitti_labels,
    write_velodyne_bin, Calibration, LabelFile, LabeledBox,
};
pub use synth::synth_scene;

/// KITTI difficulty buckets with their published gate values
/// (min 2D box height px, max occlusion level, max truncation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub fn gates(&self) -> (f64, i32, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }

    /// Whether a ground truth with this metadata counts at this
    /// difficulty (others become ignored, not false negatives).
    pub fn admits(&self, bbox_height: f64, occlusion: i32, truncation: f64) -> bool {
        let (min_h, max_occ, max_trunc) = self.gates();
        bbox_height >= min_h && occlusion <= max_occ && truncation <= max_trunc
    }
}

/// A labeled object with the metadata KITTI difficulty filtering needs.
#[derive(Debug, Clone)]
pub struct FrameBox {
    pub box3d: Box3D,
    pub class_id: usize,
    pub bbox_height: f64,
    pub occlusion: i32,
    pub truncation: f64,
}

/// One training/evaluation sample: a point cloud and its labeled boxes.
#[derive(Debug, Clone)]
pub struct Frame {
    pub id: String,
    pub cloud: PointCloud,
    pub boxes: Vec<FrameBox>,
}

/// Ordered class-name table mapping label strings to channel indices.
#[derive(Debug, Clone)]
pub struct ClassMap(pub Vec<String>);

impl Default for ClassMap {
    fn default() -> Self {
        Self(vec!["Car".to_string()])
    }
}

impl ClassMap {
    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.0.iter().position(|c| c == name)
    }

    pub fn name_of(&self, id: usize) -> &str {
        &self.0[id]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One frame id per line.
pub fn read_split(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn dataset_paths(dir: &Path, id: &str) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    (
        dir.join("velodyne").join(format!("{id}.bin")),
        dir.join("label_2").join(format!("{id}.txt")),
        dir.join("calib").join(format!("{id}.txt")),
    )
}

/// Load one frame from a KITTI-layout directory
/// (`velodyne/`, `label_2/`, `calib/`).
pub fn load_frame(dir: &Path, id: &str, classes: &ClassMap) -> Result<Frame> {
    let (velo_path, label_path, calib_path) = dataset_paths(dir, id);
    let calib = parse_calib(&fs::read_to_string(&calib_path)?)?;
    let cloud = read_velodyne_bin(&fs::read(&velo_path)?)?;
    let labels = parse_kitti_labels(&fs::read_to_string(&label_path)?, &calib)?;
    let boxes = labels
        .boxes
        .into_iter()
        .filter_map(|lb| {
            classes.id_of(&lb.class).map(|class_id| FrameBox {
                box3d: lb.box3d,
                class_id,
                bbox_height: lb.bbox2d[3] - lb.bbox2d[1],
                occlusion: lb.occlusion,
                truncation: lb.truncation,
            })
        })
        .collect();
    Ok(Frame { id: id.to_string(), cloud, boxes })
}

/// Load the calibration of one frame.
pub fn load_calib(dir: &Path, id: &str) -> Result<Calibration> {
    let (_, _, calib_path) = dataset_paths(dir, id);
    parse_calib(&fs::read_to_string(&calib_path)?)
}

/// Write a frame as a KITTI-layout sample with the given calibration.
pub fn write_frame(dir: &Path, frame: &Frame, calib: &Calibration, classes: &ClassMap) -> Result<()> {
    let (velo_path, label_path, calib_path) = dataset_paths(dir, &frame.id);
    fs::create_dir_all(velo_path.parent().unwrap())?;
    fs::create_dir_all(label_path.parent().unwrap())?;
    fs::create_dir_all(calib_path.parent().unwrap())?;
    fs::write(&velo_path, write_velodyne_bin(&frame.cloud))?;
    let labeled: Vec<LabeledBox> = frame
        .boxes
        .iter()
        .map(|fb| {
            // image-plane box tall enough to qualify as Easy
            LabeledBox {
                box3d: fb.box3d,
                class: classes.name_of(fb.class_id).to_string(),
                truncation: fb.truncation,
                occlusion: fb.occlusion,
                alpha: 0.0,
                bbox2d: [0.0, 0.0, fb.bbox_height, fb.bbox_height],
                score: None,
            }
        })
        .collect();
    fs::write(&label_path, write_kitti_labels(&labeled, calib))?;
    let calib_text = render_calib(calib);
    fs::write(&calib_path, calib_text)?;
    Ok(())
}

fn render_calib(calib: &Calibration) -> String {
    let row = |m: &[f64]| {
        m.iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let p2: Vec<f64> = calib.p2.iter().flatten().cloned().collect();
    let r0: Vec<f64> = calib.r0.iter().flatten().cloned().collect();
    let tr: Vec<f64> = calib.tr_velo_to_cam.iter().flatten().cloned().collect();
    format!(
        "P2: {}\nR0_rect: {}\nTr_velo_to_cam: {}\n",
        row(&p2),
        row(&r0),
        row(&tr)
    )
}

/// Write per-frame detections in KITTI label format plus a score column.
pub fn write_detections(
    dir: &Path,
    id: &str,
    dets: &[Detection],
    calib: &Calibration,
    classes: &ClassMap,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let labeled: Vec<LabeledBox> = dets
        .iter()
        .map(|d| LabeledBox {
            box3d: d.box3d,
            class: classes.name_of(d.class_id).to_string(),
            truncation: 0.0,
            occlusion: 0,
            alpha: 0.0,
            bbox2d: [0.0, 0.0, 100.0, 100.0],
            score: Some(d.score),
        })
        .collect();
    fs::write(dir.join(format!("{id}.txt")), write_kitti_labels(&labeled, calib))?;
    Ok(())
}

/// Read back detections written by `write_detections`.
pub fn read_detections(path: &Path, calib: &Calibration, classes: &ClassMap) -> Result<Vec<Detection>> {
    let labels = parse_kitti_labels(&fs::read_to_string(path)?, calib)?;
    Ok(labels
        .boxes
        .into_iter()
        .filter_map(|lb| {
            classes.id_of(&lb.class).map(|class_id| Detection {
                box3d: lb.box3d,
                score: lb.score.unwrap_or(1.0),
                class_id,
            })
        })
        .collect())
}

/// One stored ground-truth object: its box, the points inside it, and
/// the frame it came from.
#[derive(Debug, Clone)]
pub struct GtEntry {
    pub box3d: Box3D,
    pub class_id: usize,
    pub points: Vec<Point>,
    pub frame_id: String,
}

/// Per-class database of ground-truth objects for paste augmentation.
#[derive(Debug, Clone, Default)]
pub struct GtDatabase {
    pub by_class: HashMap<usize, Vec<GtEntry>>,
}

impl GtDatabase {
    pub fn total_entries(&self) -> usize {
        self.by_class.values().map(Vec::len).sum()
    }
}

/// Collect every labeled box together with the points inside it.
pub fn build_gt_database(frames: &[Frame]) -> GtDatabase {
    let mut db = GtDatabase::default();
    for frame in frames {
        for fb in &frame.boxes {
            let points: Vec<Point> = frame
                .cloud
                .points
                .iter()
                .filter(|p| fb.box3d.contains_point(p.x, p.y, p.z))
                .cloned()
                .collect();
            db.by_class.entry(fb.class_id).or_default().push(GtEntry {
                box3d: fb.box3d,
                class_id: fb.class_id,
                points,
                frame_id: frame.id.clone(),
            });
        }
    }
    db
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::make_grid;
    use rand::{Rng, SeedableRng};

    #[test]
    fn gt_database_counts_and_membership() {
        let g = make_grid(0.0, 32.0, -16.0, 16.0, -3.0, 1.0, 0.25).unwrap();
        let frames: Vec<Frame> = (0..3).map(|s| synth_scene(s, 4, &g)).collect();
        let db = build_gt_database(&frames);
        assert_eq!(db.total_entries(), 12);
        for entries in db.by_class.values() {
            for e in entries {
                assert!(!e.points.is_empty());
                for p in &e.points {
                    assert!(e.box3d.contains_point(p.x, p.y, p.z));
                }
            }
        }
        let empty = build_gt_database(&[Frame {
            id: "x".into(),
            cloud: PointCloud::default(),
            boxes: vec![],
        }]);
        assert_eq!(empty.total_entries(), 0);
    }

    #[test]
    fn gt_database_point_in_box_matches_brute_force_count() {
        let b = Box3D::new(2.0, 1.0, -0.5, 2.0, 4.0, 1.5, 0.6).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // 7 points inside (sampled in the box frame), 3 outside
        let (s, c) = (0.6f64).sin_cos();
        let mut points = Vec::new();
        for _ in 0..7 {
            let u = rng.gen_range(-1.9..1.9);
            let v = rng.gen_range(-0.9..0.9);
            let t = rng.gen_range(-0.7..0.7);
            points.push(Point {
                x: 2.0 + c * u - s * v,
                y: 1.0 + s * u + c * v,
                z: -0.5 + t,
                reflectance: 0.5,
            });
        }
        for k in 0..3 {
            points.push(Point { x: 20.0 + k as f64, y: -10.0, z: 0.0, reflectance: 0.1 });
        }
        let frame = Frame {
            id: "t".into(),
            cloud: PointCloud { points: points.clone() },
            boxes: vec![FrameBox {
                box3d: b,
                class_id: 0,
                bbox_height: 50.0,
                occlusion: 0,
                truncation: 0.0,
            }],
        };
        let db = build_gt_database(&[frame]);
        let entry = &db.by_class[&0][0];
        let brute: Vec<&Point> = points
            .iter()
            .filter(|p| b.contains_point(p.x, p.y, p.z))
            .collect();
        assert_eq!(entry.points.len(), 7);
        assert_eq!(entry.points.len(), brute.len());
    }

    #[test]
    fn frame_write_read_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let g = make_grid(0.0, 32.0, -16.0, 16.0, -3.0, 1.0, 0.25).unwrap();
        let frame = synth_scene(11, 3, &g);
        let calib = Calibration::identity();
        let classes = ClassMap::default();
        write_frame(tmp.path(), &frame, &calib, &classes).unwrap();
        let loaded = load_frame(tmp.path(), &frame.id, &classes).unwrap();
        assert_eq!(loaded.boxes.len(), frame.boxes.len());
        // point cloud survives the f32 quantization roundtrip
        assert_eq!(loaded.cloud.points.len(), frame.cloud.points.len());
        for (a, b) in loaded.boxes.iter().zip(&frame.boxes) {
            assert!((a.box3d.x - b.box3d.x).abs() < 1e-5);
            assert!((a.box3d.theta - b.box3d.theta).abs() < 1e-5);
            assert_eq!(a.class_id, b.class_id);
        }
    }

    #[test]
    fn detections_write_read_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let calib = Calibration::identity();
        let classes = ClassMap::default();
        let dets = vec![Detection {
            box3d: Box3D::new(5.0, 2.0, -0.8, 1.7, 4.0, 1.5, 0.9).unwrap(),
            score: 0.87,
            class_id: 0,
        }];
        write_detections(tmp.path(), "000001", &dets, &calib, &classes).unwrap();
        let back = read_detections(&tmp.path().join("000001.txt"), &calib, &classes).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].score - 0.87).abs() < 1e-9);
        assert!((back[0].box3d.x - 5.0).abs() < 1e-5);
    }

    #[test]
    fn split_file_roundtrip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("train.txt");
        std::fs::write(&path, "000000\n000001\n\n000007\n").unwrap();
        assert_eq!(read_split(&path).unwrap(), vec!["000000", "000001", "000007"]);
    }

    #[test]
    fn difficulty_gates() {
        assert!(Difficulty::Easy.admits(45.0, 0, 0.1));
        assert!(!Difficulty::Easy.admits(30.0, 0, 0.1));
        assert!(Difficulty::Moderate.admits(30.0, 1, 0.2));
        assert!(!Difficulty::Moderate.admits(30.0, 2, 0.2));
        assert!(Difficulty::Hard.admits(26.0, 2, 0.45));
        assert!(!Difficulty::Hard.admits(26.0, 2, 0.55));
    }
}

//! Average-precision evaluation: greedy score-descending matching at a
//! fixed IoU threshold, KITTI difficulty filtering, and 40-point (or
//! 11-point) interpolated AP.

use crate::data_io::{Difficulty, FrameBox};
use crate::error::Result;
use crate::geometry::{iou_3d, iou_bev, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Bev,
    ThreeD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// 40 recall positions (1/40 .. 1), the modern KITTI protocol.
    Forty,
    /// 11 recall positions (0, 0.1 .. 1), the legacy protocol.
    Eleven,
}

#[derive(Debug, Clone)]
pub struct ApResult {
    pub ap: f64,
    /// Interpolated (recall, precision) samples; precision is
    /// non-increasing and recall non-decreasing by construction.
    pub curve: Vec<(f64, f64)>,
    pub difficulty: Option<Difficulty>,
    pub iou_threshold: f64,
    pub kind: MetricKind,
    pub valid_gt: usize,
}

fn pair_iou(kind: MetricKind, a: &Detection, b: &FrameBox) -> f64 {
    match kind {
        MetricKind::Bev => iou_bev(&a.box3d, &b.box3d),
        MetricKind::ThreeD => iou_3d(&a.box3d, &b.box3d),
    }
}

/// Evaluate one class. Ground truths failing the difficulty gate are
/// ignored: they do not count as targets, and detections matching them
/// are neither true nor false positives.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_ap(
    dets_per_frame: &[Vec<Detection>],
    gts_per_frame: &[Vec<FrameBox>],
    class_id: usize,
    iou_threshold: f64,
    difficulty: Option<Difficulty>,
    kind: MetricKind,
    interpolation: Interpolation,
) -> Result<ApResult> {
    assert_eq!(dets_per_frame.len(), gts_per_frame.len());
    let mut flags: Vec<(f64, bool)> = Vec::new(); // (score, is_tp), ignored dets skipped
    let mut total_valid = 0usize;
    for (dets, gts) in dets_per_frame.iter().zip(gts_per_frame) {
        let class_gts: Vec<&FrameBox> = gts.iter().filter(|g| g.class_id == class_id).collect();
        let valid: Vec<bool> = class_gts
            .iter()
            .map(|g| {
                difficulty
                    .map(|d| d.admits(g.bbox_height, g.occlusion, g.truncation))
                    .unwrap_or(true)
            })
            .collect();
        total_valid += valid.iter().filter(|&&v| v).count();
        let mut order: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].class_id == class_id)
            .collect();
        order.sort_by(|&i, &j| {
            dets[j]
                .score
                .partial_cmp(&dets[i].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let mut matched = vec![false; class_gts.len()];
        for &di in &order {
            let det = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in class_gts.iter().enumerate() {
                if matched[gi] {
                    continue;
                }
                let iou = pair_iou(kind, det, g);
                if iou >= iou_threshold && best.map(|(_, b)| iou > b).unwrap_or(true) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) if valid[gi] => {
                    matched[gi] = true;
                    flags.push((det.score, true));
                }
                Some((gi, _)) => {
                    // matched an ignored ground truth: drop the detection
                    matched[gi] = true;
                }
                None => flags.push((det.score, false)),
            }
        }
    }

    flags.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut pr_points: Vec<(f64, f64)> = Vec::with_capacity(flags.len()); // (recall, precision)
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, is_tp) in &flags {
        if *is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if total_valid > 0 {
            pr_points.push((
                tp as f64 / total_valid as f64,
                tp as f64 / (tp + fp) as f64,
            ));
        }
    }

    let samples: Vec<f64> = match interpolation {
        Interpolation::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
        Interpolation::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
    };
    let mut curve = Vec::with_capacity(samples.len());
    let mut acc = 0.0;
    for &r in &samples {
        let p = pr_points
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, prec)| *prec)
            .fold(0.0, f64::max);
        curve.push((r, p));
        acc += p;
    }
    let ap = if total_valid == 0 { 0.0 } else { acc / samples.len() as f64 };
    Ok(ApResult {
        ap,
        curve,
        difficulty,
        iou_threshold,
        kind,
        valid_gt: total_valid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box3D;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gt(x: f64, y: f64) -> FrameBox {
        FrameBox {
            box3d: Box3D::new(x, y, -1.0, 1.8, 4.0, 1.5, 0.3).unwrap(),
            class_id: 0,
            bbox_height: 100.0,
            occlusion: 0,
            truncation: 0.0,
        }
    }

    fn det_of(g: &FrameBox, score: f64) -> Detection {
        Detection { box3d: g.box3d, score, class_id: 0 }
    }

    #[test]
    fn perfect_detections_give_ap_one() {
        let gts = vec![vec![gt(5.0, 0.0), gt(15.0, 3.0)]];
        let dets = vec![gts[0].iter().map(|g| det_of(g, 1.0)).collect::<Vec<_>>()];
        for interp in [Interpolation::Forty, Interpolation::Eleven] {
            let r = evaluate_ap(&dets, &gts, 0, 0.7, None, MetricKind::Bev, interp).unwrap();
            assert!((r.ap - 1.0).abs() < 1e-12, "ap {}", r.ap);
        }
        let r3d = evaluate_ap(&dets, &gts, 0, 0.7, None, MetricKind::ThreeD, Interpolation::Forty)
            .unwrap();
        assert!((r3d.ap - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_detections_give_ap_zero() {
        let gts = vec![vec![gt(5.0, 0.0)]];
        let dets: Vec<Vec<Detection>> = vec![vec![]];
        let r = evaluate_ap(&dets, &gts, 0, 0.7, None, MetricKind::Bev, Interpolation::Forty)
            .unwrap();
        assert_eq!(r.ap, 0.0);
    }

    #[test]
    fn high_scoring_false_positive_costs_precision() {
        // 2 GT, one perfect match, plus a false positive at higher score
        let g1 = gt(5.0, 0.0);
        let g2 = gt(15.0, 3.0);
        let gts = vec![vec![g1.clone(), g2.clone()]];
        let far = Detection {
            box3d: Box3D::new(30.0, -8.0, -1.0, 1.8, 4.0, 1.5, 0.0).unwrap(),
            score: 0.95,
            class_id: 0,
        };
        let dets = vec![vec![det_of(&g1, 0.9), far]];
        let r = evaluate_ap(&dets, &gts, 0, 0.7, None, MetricKind::Bev, Interpolation::Eleven)
            .unwrap();
        // brute-force PR construction: thresholds at each score
        // t=0.95: tp=0 fp=1 -> (r=0, p=0); t=0.9: tp=1 fp=1 -> (0.5, 0.5)
        // 11-point: r=0.0 -> max p at rec>=0 = 0.5; r=0.1..0.5 -> 0.5; r>0.5 -> 0
        let want = (0.5 * 6.0) / 11.0;
        assert!((r.ap - want).abs() < 1e-12, "ap {} want {want}", r.ap);
    }

    #[test]
    fn curve_is_monotone() {
        let gts = vec![vec![gt(5.0, 0.0), gt(15.0, 3.0), gt(25.0, -3.0)]];
        let dets = vec![vec![
            det_of(&gts[0][0], 0.9),
            det_of(&gts[0][1], 0.7),
            Detection {
                box3d: Box3D::new(40.0, 8.0, -1.0, 1.8, 4.0, 1.5, 0.0).unwrap(),
                score: 0.8,
                class_id: 0,
            },
        ]];
        let r = evaluate_ap(&dets, &gts, 0, 0.7, None, MetricKind::Bev, Interpolation::Forty)
            .unwrap();
        for w in r.curve.windows(2) {
            assert!(w[1].0 >= w[0].0, "recall must not decrease");
            assert!(w[1].1 <= w[0].1 + 1e-12, "interpolated precision must not increase");
        }
    }

    #[test]
    fn difficulty_filter_ignores_rather_than_penalizes() {
        // one easy GT and one hard GT (low bbox height)
        let easy = gt(5.0, 0.0);
        let mut hard = gt(15.0, 3.0);
        hard.bbox_height = 30.0; // fails Easy's 40 px gate
        let gts = vec![vec![easy.clone(), hard.clone()]];
        // detections on both, the hard one scored higher
        let dets = vec![vec![det_of(&hard, 0.95), det_of(&easy, 0.9)]];
        let r = evaluate_ap(
            &dets,
            &gts,
            0,
            0.7,
            Some(Difficulty::Easy),
            MetricKind::Bev,
            Interpolation::Forty,
        )
        .unwrap();
        // the hard match is ignored entirely: 1 valid GT, 1 TP, no FP
        assert_eq!(r.valid_gt, 1);
        assert!((r.ap - 1.0).abs() < 1e-12, "ap {}", r.ap);
    }

    /// Brute-force oracle: rebuild the PR curve by re-running matching at
    /// every score threshold, then interpolate identically.
    fn ap_brute_force(
        dets: &[Vec<Detection>],
        gts: &[Vec<FrameBox>],
        iou_threshold: f64,
        kind: MetricKind,
        interpolation: Interpolation,
    ) -> f64 {
        let mut scores: Vec<f64> = dets.iter().flatten().map(|d| d.score).collect();
        scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
        scores.dedup();
        let total_valid: usize = gts.iter().map(Vec::len).sum();
        if total_valid == 0 {
            return 0.0;
        }
        let mut points = Vec::new();
        for &t in &scores {
            let (mut tp, mut fp) = (0usize, 0usize);
            for (fd, fg) in dets.iter().zip(gts) {
                let mut order: Vec<&Detection> =
                    fd.iter().filter(|d| d.score >= t).collect();
                order.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
                let mut matched = vec![false; fg.len()];
                for d in order {
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in fg.iter().enumerate() {
                        if matched[gi] {
                            continue;
                        }
                        let iou = pair_iou(kind, d, g);
                        if iou >= iou_threshold && best.map(|(_, b)| iou > b).unwrap_or(true) {
                            best = Some((gi, iou));
                        }
                    }
                    if let Some((gi, _)) = best {
                        matched[gi] = true;
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            points.push((tp as f64 / total_valid as f64, tp as f64 / (tp + fp) as f64));
        }
        let samples: Vec<f64> = match interpolation {
            Interpolation::Forty => (1..=40).map(|i| i as f64 / 40.0).collect(),
            Interpolation::Eleven => (0..=10).map(|i| i as f64 / 10.0).collect(),
        };
        samples
            .iter()
            .map(|&r| {
                points
                    .iter()
                    .filter(|(rec, _)| *rec >= r - 1e-12)
                    .map(|(_, p)| *p)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / samples.len() as f64
    }

    #[test]
    fn matches_brute_force_pr_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..40 {
            let n_frames = rng.gen_range(1..4);
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..n_frames {
                let n_gt = rng.gen_range(0..5);
                let frame_gts: Vec<FrameBox> = (0..n_gt)
                    .map(|i| gt(6.0 * i as f64 + rng.gen_range(0.0..2.0), rng.gen_range(-6.0..6.0)))
                    .collect();
                let mut frame_dets = Vec::new();
                for g in &frame_gts {
                    if rng.gen_bool(0.8) {
                        // jittered detection: may or may not clear the IoU bar
                        let jitter = rng.gen_range(-1.2..1.2);
                        frame_dets.push(Detection {
                            box3d: Box3D::new(
                                g.box3d.x + jitter,
                                g.box3d.y + rng.gen_range(-0.4..0.4),
                                g.box3d.z,
                                g.box3d.w,
                                g.box3d.l,
                                g.box3d.h,
                                g.box3d.theta,
                            )
                            .unwrap(),
                            score: rng.gen_range(0.1..1.0),
                            class_id: 0,
                        });
                    }
                }
                for _ in 0..rng.gen_range(0..3) {
                    frame_dets.push(Detection {
                        box3d: Box3D::new(
                            rng.gen_range(30.0..60.0),
                            rng.gen_range(-20.0..20.0),
                            -1.0,
                            1.8,
                            4.0,
                            1.5,
                            0.0,
                        )
                        .unwrap(),
                        score: rng.gen_range(0.1..1.0),
                        class_id: 0,
                    });
                }
                gts.push(frame_gts);
                dets.push(frame_dets);
            }
            for interp in [Interpolation::Forty, Interpolation::Eleven] {
                for kind in [MetricKind::Bev, MetricKind::ThreeD] {
                    let got =
                        evaluate_ap(&dets, &gts, 0, 0.5, None, kind, interp).unwrap().ap;
                    let want = ap_brute_force(&dets, &gts, 0.5, kind, interp);
                    assert!(
                        (got - want).abs() < 1e-12,
                        "got {got} want {want} ({interp:?}, {kind:?})"
                    );
                }
            }
        }
    }

    #[test]
    fn ap_invariant_to_detection_order() {
        let gts = vec![vec![gt(5.0, 0.0), gt(15.0, 3.0)]];
        let mut dets0 = vec![
            det_of(&gts[0][0], 0.9),
            det_of(&gts[0][1], 0.6),
            Detection {
                box3d: Box3D::new(40.0, 8.0, -1.0, 1.8, 4.0, 1.5, 0.0).unwrap(),
                score: 0.7,
                class_id: 0,
            },
        ];
        let a = evaluate_ap(
            &[dets0.clone()],
            &gts,
            0,
            0.7,
            None,
            MetricKind::Bev,
            Interpolation::Forty,
        )
        .unwrap()
        .ap;
        dets0.reverse();
        let b = evaluate_ap(&[dets0], &gts, 0, 0.7, None, MetricKind::Bev, Interpolation::Forty)
            .unwrap()
            .ap;
        assert_eq!(a, b);
    }
}

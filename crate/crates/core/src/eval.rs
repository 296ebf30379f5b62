//! Post-processing and evaluation: score filtering, box decoding,
//! rotated NMS, KITTI-style average precision, result-file dumps and a
//! BEV SVG renderer.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{anchor_grid, decode, AnchorConfig, AnchorGrid};
use crate::geom::{iou_3d, rotated_bev_iou, Box3D};
use crate::kitti::{class_name, format_label, lidar_box_to_camera, Calibration, Difficulty, LabelEntry, PointCloud};
use crate::net::Network;
use crate::voxel::voxelize;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub boxx: Box3D,
    pub score: f64,
    pub class: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostprocConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig { score_threshold: 0.3, nms_iou: 0.5, max_detections: 100 }
    }
}

/// Greedy descending-score suppression with rotated BEV IoU. Ties break
/// deterministically by input order.
pub fn nms(dets: &[Detection], iou_threshold: f64, max_keep: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].score.partial_cmp(&dets[a].score).expect("finite scores").then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|k| rotated_bev_iou(&k.boxx, &dets[i].boxx) < iou_threshold) {
            kept.push(dets[i]);
        }
    }
    kept
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Anchor grid for one head level of a network.
pub fn level_anchor_grid(net: &Network, level: usize, acfg: &AnchorConfig) -> AnchorGrid {
    let (_, ny, nx) = net.audit.levels[level];
    let stride = net.vcfg.base_size * (2usize << level) as f64;
    anchor_grid(&net.vcfg.range, stride, ny, nx, acfg)
}

/// Full inference pipeline for one cloud: voxelize all scales, forward in
/// eval mode, per-anchor sigmoid scores, score filter, decode, and one
/// NMS pass over the candidates merged from every active head level.
pub fn predict<R: Rng>(
    net: &mut Network,
    cloud: &PointCloud,
    acfg: &AnchorConfig,
    pcfg: &PostprocConfig,
    rng: &mut R,
) -> Vec<Detection> {
    let vcfg = net.vcfg.clone();
    let cropped = crate::kitti::crop_to_range(cloud, &vcfg.range);
    let sets: Vec<_> = (0..vcfg.n_scales()).map(|s| voxelize(&cropped, &vcfg, s, rng)).collect();
    let fwd = net.forward(&sets, false);

    let a_per_cell = net.cfg.anchors_per_cell;
    let n_classes = net.cfg.n_classes;
    let mut candidates = Vec::new();
    for (li, level) in fwd.levels.iter().enumerate() {
        let grid = level_anchor_grid(net, li, acfg);
        assert_eq!((grid.ny, grid.nx, grid.per_cell), (level.ny, level.nx, a_per_cell));
        let cls = fwd.graph.value(level.cls);
        let boxr = fwd.graph.value(level.boxr);
        let dir = fwd.graph.value(level.dir);
        let hw = level.ny * level.nx;
        for iy in 0..level.ny {
            for ix in 0..level.nx {
                let pos = iy * level.nx + ix;
                for a in 0..a_per_cell {
                    for k in 0..n_classes {
                        let score = sigmoid(cls.data[(a * n_classes + k) * hw + pos] as f64);
                        if score < pcfg.score_threshold {
                            continue;
                        }
                        let mut res = [0.0f64; 7];
                        for (r, v) in res.iter_mut().enumerate() {
                            *v = boxr.data[(a * 7 + r) * hw + pos] as f64;
                        }
                        let dir_bit = dir.data[(a * 2 + 1) * hw + pos]
                            > dir.data[(a * 2) * hw + pos];
                        let anchor = &grid.anchors[(iy * level.nx + ix) * a_per_cell + a];
                        candidates.push(Detection {
                            boxx: decode(&res, dir_bit, anchor),
                            score,
                            class: k as i32,
                        });
                    }
                }
            }
        }
    }
    nms(&candidates, pcfg.nms_iou, pcfg.max_detections)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Bev,
    ThreeD,
}

fn det_iou(a: &Box3D, b: &Box3D, metric: Metric) -> f64 {
    match metric {
        Metric::Bev => rotated_bev_iou(a, b),
        Metric::ThreeD => iou_3d(a, b),
    }
}

/// Precision/recall samples after each detection, plus interpolated AP.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub ap: f64,
}

/// Interpolated average precision. Detections across all frames are
/// sorted by descending score and greedily matched one-to-one (best IoU
/// first among unmatched gts at or above the threshold). `gt_counted`
/// optionally marks gts outside the difficulty bucket: uncounted gts are
/// excluded from recall, and detections matched to them are neither true
/// nor false positives. Eleven recall points {0, 0.1, ..., 1} by default;
/// `forty_point` switches to the 40-point variant.
pub fn average_precision(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    gt_counted: Option<&[Vec<bool>]>,
    iou_threshold: f64,
    metric: Metric,
    forty_point: bool,
) -> PrCurve {
    assert_eq!(dets.len(), gts.len());
    let n_gt: usize = match gt_counted {
        Some(m) => m.iter().map(|f| f.iter().filter(|&&c| c).count()).sum(),
        None => gts.iter().map(|f| f.len()).sum(),
    };

    // (score, frame, det index) over all frames, best first
    let mut flat: Vec<(f64, usize, usize)> = Vec::new();
    for (f, fd) in dets.iter().enumerate() {
        for (i, d) in fd.iter().enumerate() {
            flat.push((d.score, f, i));
        }
    }
    flat.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then((a.1, a.2).cmp(&(b.1, b.2))));

    let mut matched: Vec<Vec<bool>> = gts.iter().map(|f| vec![false; f.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(flat.len());
    let mut recall = Vec::with_capacity(flat.len());
    for &(_, f, i) in &flat {
        let d = &dets[f][i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts[f].iter().enumerate() {
            if matched[f][g] {
                continue;
            }
            let iou = det_iou(&d.boxx, gt, metric);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                matched[f][g] = true;
                let counted = gt_counted.map_or(true, |m| m[f][g]);
                if counted {
                    tp += 1;
                } else {
                    // don't-care gt: drop the detection from the tally
                    continue;
                }
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }

    let points: Vec<f64> = if forty_point {
        (1..=40).map(|i| i as f64 / 40.0).collect()
    } else {
        (0..=10).map(|i| i as f64 / 10.0).collect()
    };
    let mut ap = 0.0;
    for &r in &points {
        // max precision at recall >= r
        let p = precision
            .iter()
            .zip(&recall)
            .filter(|&(_, &rc)| rc >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0f64, f64::max);
        ap += p / points.len() as f64;
    }
    PrCurve { precision, recall, ap }
}

/// AP per KITTI difficulty bucket, BEV and 3D, at one IoU threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Indexed by Difficulty as usize: easy, moderate, hard.
    pub ap_bev: [f64; 3],
    pub ap_3d: [f64; 3],
    pub iou_threshold: f64,
}

/// Evaluate with KITTI-style cumulative difficulty buckets: the bucket
/// for difficulty d counts gts of difficulty <= d; harder and ignored
/// gts are don't-care. Pass difficulties = None to count every gt once
/// in all buckets (synthetic data).
pub fn evaluate(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    difficulties: Option<&[Vec<Difficulty>]>,
    iou_threshold: f64,
    forty_point: bool,
) -> EvalResult {
    let mut ap_bev = [0.0; 3];
    let mut ap_3d = [0.0; 3];
    for d in 0..3 {
        let mask: Option<Vec<Vec<bool>>> = difficulties.map(|diffs| {
            diffs
                .iter()
                .map(|f| f.iter().map(|&g| (g as usize) <= d && g != Difficulty::Ignored).collect())
                .collect()
        });
        let mask_ref = mask.as_deref();
        ap_bev[d] = average_precision(dets, gts, mask_ref, iou_threshold, Metric::Bev, forty_point).ap;
        ap_3d[d] = average_precision(dets, gts, mask_ref, iou_threshold, Metric::ThreeD, forty_point).ap;
    }
    EvalResult { ap_bev, ap_3d, iou_threshold }
}

/// One KITTI result file per frame: label-format rows with a trailing
/// score, boxes converted back to the camera frame.
pub fn write_kitti_results(
    dir: &Path,
    frame_id: &str,
    dets: &[Detection],
    calib: &Calibration,
) -> std::io::Result<()> {
    let entries: Vec<LabelEntry> = dets
        .iter()
        .map(|d| {
            let (size_hwl, location, ry) = lidar_box_to_camera(&d.boxx, calib);
            LabelEntry {
                class: class_name(d.class).to_string(),
                truncation: 0.0,
                occlusion: 0.0,
                alpha: 0.0,
                bbox: [0.0, 0.0, 50.0, 50.0],
                size_hwl,
                location,
                rotation_y: ry,
                score: Some(d.score),
            }
        })
        .collect();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{frame_id}.txt")), format_label(&entries))
}

/// Pixels per meter in the BEV SVG.
const SVG_SCALE: f64 = 24.0;
const SVG_MARGIN: f64 = 30.0;

/// World (x, y) to SVG pixel coordinates: x grows rightward, y upward.
pub fn svg_point(range: &crate::geom::Range3, x: f64, y: f64) -> (f64, f64) {
    (SVG_MARGIN + (x - range.x.0) * SVG_SCALE, SVG_MARGIN + (range.y.1 - y) * SVG_SCALE)
}

fn svg_polygon(out: &mut String, range: &crate::geom::Range3, b: &Box3D, style: &str) {
    let pts: Vec<String> = b
        .bev_corners()
        .iter()
        .map(|c| {
            let (px, py) = svg_point(range, c[0], c[1]);
            format!("{px:.2},{py:.2}")
        })
        .collect();
    writeln!(out, r#"<polygon points="{}" {} />"#, pts.join(" "), style).unwrap();
}

/// Top-down SVG: gray points, green ground-truth boxes, red detections
/// with score labels, meter-labeled axes.
pub fn render_bev(
    cloud: &PointCloud,
    dets: &[Detection],
    gts: &[Box3D],
    range: &crate::geom::Range3,
    path: &Path,
) -> std::io::Result<()> {
    let (ex, ey, _) = range.extent();
    let (w, h) = (ex * SVG_SCALE + 2.0 * SVG_MARGIN, ey * SVG_SCALE + 2.0 * SVG_MARGIN);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w:.0}" height="{h:.0}" fill="white" />"#).unwrap();

    // axes with meter labels at both ends
    let (x0, y0) = svg_point(range, range.x.0, range.y.0);
    let (x1, y1) = svg_point(range, range.x.1, range.y.1);
    writeln!(s, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x1:.1}" y2="{y0:.1}" stroke="black" />"#).unwrap();
    writeln!(s, r#"<line x1="{x0:.1}" y1="{y0:.1}" x2="{x0:.1}" y2="{y1:.1}" stroke="black" />"#).unwrap();
    writeln!(
        s,
        r#"<text x="{x0:.1}" y="{:.1}" font-size="10">x: {} .. {} m</text>"#,
        y0 + 14.0,
        range.x.0,
        range.x.1
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{y1:.1}" font-size="10">y: {} .. {} m</text>"#,
        x0 - 28.0,
        range.y.0,
        range.y.1
    )
    .unwrap();

    for p in &cloud.points {
        let (px, py) = svg_point(range, p[0] as f64, p[1] as f64);
        writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="0.8" fill="gray" />"#).unwrap();
    }
    for g in gts {
        svg_polygon(&mut s, range, g, r#"fill="none" stroke="green" stroke-width="1.5""#);
    }
    for d in dets {
        svg_polygon(&mut s, range, &d.boxx, r#"fill="none" stroke="red" stroke-width="1""#);
        let (px, py) = svg_point(range, d.boxx.x, d.boxx.y);
        writeln!(
            s,
            r#"<text x="{px:.1}" y="{py:.1}" font-size="8" fill="red">{:.2}</text>"#,
            d.score
        )
        .unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    std::fs::write(path, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Range3;
    use crate::net::NetworkConfig;
    use crate::voxel::VoxelConfig;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, score: f64) -> Detection {
        Detection { boxx: Box3D::new(x, y, -1.0, 1.6, 3.9, 1.56, 0.0), score, class: 0 }
    }

    #[test]
    fn nms_keeps_highest_of_duplicates() {
        let dets = vec![det(5.0, 0.0, 0.8), det(5.0, 0.0, 0.9)];
        let kept = nms(&dets, 0.5, 100);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_keeps_disjoint() {
        let dets = vec![det(5.0, 0.0, 0.8), det(15.0, 5.0, 0.9), det(10.0, -5.0, 0.7)];
        let kept = nms(&dets, 0.5, 100);
        assert_eq!(kept.len(), 3);
        // sorted by score
        assert!(kept[0].score >= kept[1].score && kept[1].score >= kept[2].score);
    }

    /// O(n^2) reference: walk detections best-first, keep those not
    /// suppressed by an already-kept box.
    fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut idx: Vec<usize> = (0..dets.len()).collect();
        idx.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<Detection> = Vec::new();
        for &i in &idx {
            if !kept.iter().any(|k| rotated_bev_iou(&k.boxx, &dets[i].boxx) >= thr) {
                kept.push(dets[i]);
            }
        }
        kept
    }

    #[test]
    fn nms_matches_brute_force_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let dets: Vec<Detection> = (0..n)
                .map(|_| Detection {
                    boxx: Box3D::new(
                        rng.gen_range(0.0..20.0),
                        rng.gen_range(-10.0..10.0),
                        -1.0,
                        rng.gen_range(1.0..2.5),
                        rng.gen_range(2.5..5.0),
                        1.5,
                        rng.gen_range(-3.1..3.1),
                    ),
                    score: rng.gen_range(0.0..1.0),
                    class: 0,
                })
                .collect();
            let got = nms(&dets, 0.5, 1000);
            let want = nms_oracle(&dets, 0.5);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a, b);
            }
            // antichain property
            for i in 0..got.len() {
                for j in (i + 1)..got.len() {
                    assert!(rotated_bev_iou(&got[i].boxx, &got[j].boxx) < 0.5);
                }
            }
        }
    }

    #[test]
    fn ap_perfect_detections() {
        let gts = vec![vec![
            Box3D::new(5.0, 0.0, -1.0, 1.6, 3.9, 1.56, 0.3),
            Box3D::new(12.0, 4.0, -1.0, 1.6, 3.9, 1.56, -0.5),
        ]];
        let dets = vec![gts[0]
            .iter()
            .map(|&b| Detection { boxx: b, score: 1.0, class: 0 })
            .collect::<Vec<_>>()];
        let pr = average_precision(&dets, &gts, None, 0.7, Metric::Bev, false);
        assert_abs_diff_eq!(pr.ap, 1.0, epsilon = 1e-12);
        let pr3 = average_precision(&dets, &gts, None, 0.7, Metric::ThreeD, false);
        assert_abs_diff_eq!(pr3.ap, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_no_detections() {
        let gts = vec![vec![Box3D::new(5.0, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0)]];
        let dets = vec![vec![]];
        let pr = average_precision(&dets, &gts, None, 0.5, Metric::Bev, false);
        assert_eq!(pr.ap, 0.0);
    }

    #[test]
    fn ap_hand_computed_fixture() {
        // 3 gts at known spots; 5 dets ordered by score:
        //   0.9 hit, 0.8 miss, 0.7 hit, 0.6 miss, 0.5 hit
        // running (precision, recall):
        //   (1, 1/3) (1/2, 1/3) (2/3, 2/3) (2/4, 2/3) (3/5, 1)
        // 11-point interpolation: p(0..0.3)=1 (4 pts), p(0.4..0.6)=2/3
        // (3 pts), p(0.7..1.0)=3/5 (4 pts)
        // AP = (4*1 + 3*2/3 + 4*3/5) / 11 = 8.4/11
        let g = |x: f64| Box3D::new(x, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0);
        let gts = vec![vec![g(5.0), g(15.0), g(25.0)]];
        let miss = |x: f64, s: f64| Detection { boxx: g(x).clone(), score: s, class: 0 };
        let dets = vec![vec![
            Detection { boxx: g(5.0), score: 0.9, class: 0 },
            miss(40.0, 0.8),
            Detection { boxx: g(15.0), score: 0.7, class: 0 },
            miss(50.0, 0.6),
            Detection { boxx: g(25.0), score: 0.5, class: 0 },
        ]];
        let pr = average_precision(&dets, &gts, None, 0.5, Metric::Bev, false);
        assert_abs_diff_eq!(pr.ap, 8.4 / 11.0, epsilon = 1e-12);
    }

    #[test]
    fn ap_monotone_in_confident_true_positive() {
        let g = |x: f64| Box3D::new(x, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0);
        let gts = vec![vec![g(5.0), g(15.0)]];
        let dets = vec![vec![
            Detection { boxx: g(5.0), score: 0.6, class: 0 },
            Detection { boxx: g(40.0), score: 0.5, class: 0 },
        ]];
        let base = average_precision(&dets, &gts, None, 0.5, Metric::Bev, false).ap;
        let mut more = dets.clone();
        more[0].push(Detection { boxx: g(15.0), score: 0.99, class: 0 });
        let better = average_precision(&more, &gts, None, 0.5, Metric::Bev, false).ap;
        assert!(better >= base);
    }

    #[test]
    fn ap_difficulty_masking() {
        let g = |x: f64| Box3D::new(x, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0);
        let gts = vec![vec![g(5.0), g(15.0)]];
        let dets = vec![vec![Detection { boxx: g(5.0), score: 0.9, class: 0 }]];
        // second gt is out of the bucket: detection on the first gives AP 1
        let mask = vec![vec![true, false]];
        let pr = average_precision(&dets, &gts, Some(&mask), 0.5, Metric::Bev, false);
        assert_abs_diff_eq!(pr.ap, 1.0, epsilon = 1e-12);
        // detection on the don't-care gt is neither TP nor FP
        let dets2 = vec![vec![
            Detection { boxx: g(15.0), score: 0.95, class: 0 },
            Detection { boxx: g(5.0), score: 0.9, class: 0 },
        ]];
        let pr2 = average_precision(&dets2, &gts, Some(&mask), 0.5, Metric::Bev, false);
        assert_abs_diff_eq!(pr2.ap, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn untrained_model_produces_no_detections() {
        let vcfg = VoxelConfig::desk();
        let frame = crate::synth::generate_frame(&crate::synth::SceneSpec {
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut net = crate::net::Network::new(NetworkConfig::default(), vcfg, &mut rng);
        let dets = predict(
            &mut net,
            &frame.cloud,
            &AnchorConfig::default(),
            &PostprocConfig::default(),
            &mut rng,
        );
        // head bias starts at -ln(99): scores near 0.01, all filtered
        assert!(dets.is_empty(), "untrained model emitted {} detections", dets.len());
    }

    #[test]
    fn predict_deterministic() {
        let vcfg = VoxelConfig::desk();
        let frame = crate::synth::generate_frame(&crate::synth::SceneSpec {
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let mut net = crate::net::Network::new(NetworkConfig::default(), vcfg, &mut rng);
        // force candidates through with a zero threshold
        let pcfg = PostprocConfig { score_threshold: 0.0, ..Default::default() };
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = predict(&mut net, &frame.cloud, &AnchorConfig::default(), &pcfg, &mut r1);
        let b = predict(&mut net, &frame.cloud, &AnchorConfig::default(), &pcfg, &mut r2);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn svg_render_and_corner_positions() {
        let range = Range3::desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.svg");
        let b = Box3D::new(8.0, 2.0, -1.0, 1.6, 3.9, 1.56, 0.6);
        let cloud = PointCloud { points: vec![[5.0, 1.0, -1.0, 0.4]] };
        render_bev(
            &cloud,
            &[Detection { boxx: b, score: 0.77, class: 0 }],
            &[b],
            &range,
            &path,
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("green") && text.contains("red") && text.contains("0.77"));
        // corner coordinates match independent trig through the affine map
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let cx = 8.0 + c * (3.9 / 2.0) - s * (1.6 / 2.0);
        let cy = 2.0 + s * (3.9 / 2.0) + c * (1.6 / 2.0);
        let (px, py) = svg_point(&range, cx, cy);
        assert!(text.contains(&format!("{px:.2},{py:.2}")), "missing corner {px:.2},{py:.2}");
        // well-formed: every opened tag closes (SVG here has no nesting
        // beyond the root, so count both bracket kinds)
        assert_eq!(text.matches("<svg").count(), 1);
        assert_eq!(text.matches("</svg>").count(), 1);
    }

    #[test]
    fn empty_scene_svg_is_valid() {
        let range = Range3::desk();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.svg");
        render_bev(&PointCloud { points: vec![] }, &[], &[], &range, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn kitti_result_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let d = Detection {
            boxx: Box3D::new(10.0, -2.0, -0.8, 1.6, 3.9, 1.56, 0.4),
            score: 0.85,
            class: 0,
        };
        write_kitti_results(dir.path(), "000042", &[d], &Calibration::identity()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("000042.txt")).unwrap();
        let entries = crate::kitti::parse_label(&text).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].class, "Car");
        assert_eq!(entries[0].score, Some(0.85));
        let back = crate::kitti::camera_box_to_lidar(&entries[0], &Calibration::identity()).unwrap();
        assert_abs_diff_eq!(back.x, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(back.yaw, 0.4, epsilon = 1e-9);
    }
}

//! Acceptance suite: one test per release criterion, each ending in a
//! single `[PASS]` line (a failed assertion is the corresponding fail
//! line). Oracles are independent re-implementations, not calls back
//! into the code under test.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pillarfpn::autodiff::fd::{check_op, fd_grad};
use pillarfpn::autodiff::{BnStats, Tensor};
use pillarfpn::codec::{decode, encode};
use pillarfpn::config::ExperimentConfig;
use pillarfpn::eval::{average_precision, nms, Detection, Metric};
use pillarfpn::geom::{rotated_bev_iou, Box3D, Range3};
use pillarfpn::kitti::PointCloud;
use pillarfpn::loss::{direction_loss, focal_loss, smooth_l1, total_loss, LossWeights};
use pillarfpn::net::{audit_shapes, Network, NetworkConfig};
use pillarfpn::synth::{
    build_gt_database, generate_frame, global_augment, gt_sample_augment, membership, SceneSpec,
};
use pillarfpn::train::{load_source_frames, Trainer};
use pillarfpn::voxel::{voxelize, VoxelConfig};

fn random_cloud(range: &Range3, n: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let points = (0..n)
        .map(|_| {
            [
                rng.gen_range(range.x.0..range.x.1) as f32,
                rng.gen_range(range.y.0..range.y.1) as f32,
                rng.gen_range(range.z.0..range.z.1) as f32,
                rng.gen_range(0.0..1.0) as f32,
            ]
        })
        .collect();
    PointCloud { points }
}

fn random_box(rng: &mut ChaCha8Rng) -> Box3D {
    Box3D::new(
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-8.0..8.0),
        rng.gen_range(-2.0..0.0),
        rng.gen_range(0.8..2.4),
        rng.gen_range(2.0..5.5),
        rng.gen_range(1.0..2.2),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

// --- criterion 1: shape conformance, every ablation row constructs ------

#[test]
fn shape_conformance_full_scale_and_all_ablation_rows() {
    let start = Instant::now();
    let vcfg = VoxelConfig::paper();

    // published pseudo-image dims, (C, ny, nx) with x innermost
    let audit = audit_shapes(&NetworkConfig { n_scales: 3, ..NetworkConfig::default() }, &vcfg)
        .unwrap();
    assert_eq!(audit.pseudo, vec![(64, 496, 432), (64, 248, 216), (64, 124, 108)]);
    assert_eq!(audit.c, [(64, 248, 216), (128, 124, 108), (256, 62, 54)]);

    // every Table 1 row constructs and completes a full-scale forward
    let rows: [(usize, bool, bool); 5] = [
        (3, false, true),
        (3, true, false),
        (1, true, true),
        (2, true, true),
        (3, true, true),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cloud = random_cloud(&vcfg.range, 20_000, &mut rng);
    let sets: Vec<_> = (0..vcfg.n_scales()).map(|s| voxelize(&cloud, &vcfg, s, &mut rng)).collect();
    for (n_scales, fpn_enabled, ssd_heads) in rows {
        let cfg = NetworkConfig { n_scales, fpn_enabled, ssd_heads, ..NetworkConfig::default() };
        let mut net = Network::new(cfg, vcfg.clone(), &mut rng);
        let fwd = net.forward(&sets, false);
        assert_eq!(fwd.levels.len(), net.audit.levels.len());
        for (lvl, &(ch, ny, nx)) in fwd.levels.iter().zip(&net.audit.levels) {
            let _ = ch;
            assert_eq!((lvl.ny, lvl.nx), (ny, nx), "level grid mismatch");
            let cls = fwd.graph.value(lvl.cls);
            assert_eq!(cls.shape, vec![2, ny, nx], "cls head shape");
            assert_eq!(fwd.graph.value(lvl.boxr).shape, vec![14, ny, nx], "box head shape");
            assert_eq!(fwd.graph.value(lvl.dir).shape, vec![4, ny, nx], "dir head shape");
            assert!(cls.data.iter().all(|v| v.is_finite()), "non-finite head output");
        }
    }
    let dt = start.elapsed();
    assert!(dt.as_secs() < 120, "shape conformance took {dt:?}, budget 2 min");
    println!("[PASS] shape conformance: full-scale pseudo-images + 5 ablation rows forward in {dt:?}");
}

// --- criterion 2: codec fidelity ----------------------------------------

#[test]
fn codec_round_trip_and_worked_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut max_err = 0.0f64;
    for _ in 0..10_000 {
        let anchor = random_box(&mut rng);
        // keep the heading residual inside the invertible arcsin branch
        let dyaw = rng.gen_range(-std::f64::consts::FRAC_PI_2 * 0.999..std::f64::consts::FRAC_PI_2 * 0.999);
        let gt = Box3D::new(
            anchor.x + rng.gen_range(-2.0..2.0),
            anchor.y + rng.gen_range(-2.0..2.0),
            anchor.z + rng.gen_range(-1.0..1.0),
            anchor.w * rng.gen_range(0.5..2.0),
            anchor.l * rng.gen_range(0.5..2.0),
            anchor.h * rng.gen_range(0.5..2.0),
            anchor.yaw + dyaw,
        );
        let t = encode(&gt, &anchor);
        let back = decode(&t.residuals, t.dir_target == 1, &anchor);
        for (a, b) in [
            (gt.x, back.x),
            (gt.y, back.y),
            (gt.z, back.z),
            (gt.w, back.w),
            (gt.l, back.l),
            (gt.h, back.h),
            (gt.yaw.sin(), back.yaw.sin()),
            (gt.yaw.cos(), back.yaw.cos()),
        ] {
            max_err = max_err.max((a - b).abs());
        }
    }
    assert!(max_err < 1e-9, "codec round-trip error {max_err:e} >= 1e-9");

    // worked example: 2 m / 1 m / 0.5 m offsets against the default
    // anchor diagonal, yaw residual sin(pi/6) = 0.5
    let anchor = Box3D::new(10.0, 5.0, -1.0, 1.6, 3.9, 1.56, 0.0);
    let gt = Box3D::new(12.0, 6.0, -0.5, 1.6, 3.9, 1.56, std::f64::consts::FRAC_PI_6);
    let t = encode(&gt, &anchor);
    assert!((t.residuals[0] - 0.47444).abs() < 1e-5, "x_t = {}", t.residuals[0]);
    assert!((t.residuals[6] - 0.5).abs() < 1e-5, "theta_t = {}", t.residuals[6]);
    println!("[PASS] codec: 10^4 round trips max err {max_err:.2e}; worked example x_t=0.47444, theta_t=0.5");
}

// --- criterion 3: gradient suite ----------------------------------------

#[test]
fn gradient_finite_difference_suite() {
    let start = Instant::now();
    const SHAPES_PER_OP: usize = 20;
    const EPS: f64 = 1e-5;
    const TOL: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let mut rand_t = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    };
    // keep relu/max inputs away from their kinks so central differences
    // stay on one branch
    let mut rand_t_off = |rng: &mut ChaCha8Rng, shape: &[usize]| {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.05..1.0);
                    if rng.gen_bool(0.5) {
                        v
                    } else {
                        -v
                    }
                })
                .collect(),
        )
    };

    for i in 0..SHAPES_PER_OP {
        let salt = i as u64;
        let r = &mut rng;

        // linear
        let (n, ci, co) = (r.gen_range(1..5usize), r.gen_range(1..5usize), r.gen_range(1..5usize));
        let inputs = [rand_t(r, &[n, ci]), rand_t(r, &[ci, co]), rand_t(r, &[co])];
        check_op(&inputs, EPS, TOL, |g, ids| g.linear(ids[0], ids[1], ids[2]))
            .unwrap_or_else(|e| panic!("linear #{salt}: {e}"));

        // conv2d, stride 1 and 2, pad 0 and 1
        let (ci, co) = (r.gen_range(1..3usize), r.gen_range(1..3usize));
        let (h, w) = (r.gen_range(3..7usize), r.gen_range(3..7usize));
        let stride = 1 + (i % 2);
        let pad = (i / 2) % 2;
        let inputs = [rand_t(r, &[ci, h, w]), rand_t(r, &[co, ci, 3, 3]), rand_t(r, &[co])];
        check_op(&inputs, EPS, TOL, |g, ids| g.conv2d(ids[0], ids[1], ids[2], stride, pad))
            .unwrap_or_else(|e| panic!("conv2d #{salt}: {e}"));

        // upsample2x + crop_hw
        let (c, h, w) = (r.gen_range(1..4usize), r.gen_range(2..5usize), r.gen_range(2..5usize));
        let inputs = [rand_t(r, &[c, h, w])];
        check_op(&inputs, EPS, TOL, |g, ids| {
            let u = g.upsample2x(ids[0]);
            g.crop_hw(u, 2 * h - 1, 2 * w - 1)
        })
        .unwrap_or_else(|e| panic!("upsample/crop #{salt}: {e}"));

        // relu (inputs biased off zero)
        let len = r.gen_range(2..30usize);
        let inputs = [rand_t_off(r, &[len])];
        check_op(&inputs, EPS, TOL, |g, ids| g.relu(ids[0]))
            .unwrap_or_else(|e| panic!("relu #{salt}: {e}"));

        // sigmoid
        let len = r.gen_range(2..30usize);
        let inputs = [rand_t(r, &[len])];
        check_op(&inputs, EPS, TOL, |g, ids| g.sigmoid(ids[0]))
            .unwrap_or_else(|e| panic!("sigmoid #{salt}: {e}"));

        // softmax
        let len = r.gen_range(2..8usize);
        let inputs = [rand_t(r, &[len])];
        check_op(&inputs, EPS, TOL, |g, ids| g.softmax(ids[0]))
            .unwrap_or_else(|e| panic!("softmax #{salt}: {e}"));

        // add + concat + reshape
        let (c, h, w) = (r.gen_range(1..4usize), r.gen_range(2..5usize), r.gen_range(2..5usize));
        let inputs = [rand_t(r, &[c, h, w]), rand_t(r, &[c, h, w]), rand_t(r, &[c + 1, h, w])];
        check_op(&inputs, EPS, TOL, |g, ids| {
            let s = g.add(ids[0], ids[1]);
            let cat = g.concat(&[s, ids[2]], 0);
            g.reshape(cat, &[(2 * c + 1) * h * w])
        })
        .unwrap_or_else(|e| panic!("add/concat/reshape #{salt}: {e}"));

        // masked max + broadcast over point slots
        let (k, np, c) = (r.gen_range(1..4usize), r.gen_range(2..6usize), r.gen_range(1..4usize));
        let counts: Vec<usize> = (0..k).map(|_| r.gen_range(1..=np)).collect();
        let inputs = [rand_t_off(r, &[k, np, c])];
        let counts2 = counts.clone();
        check_op(&inputs, EPS, TOL, move |g, ids| {
            let m = g.masked_max_points(ids[0], &counts2);
            g.broadcast_points(m, np)
        })
        .unwrap_or_else(|e| panic!("masked_max/broadcast #{salt}: {e}"));

        // batchnorm2d, training and eval normalization
        let (c, h, w) = (r.gen_range(1..4usize), r.gen_range(2..5usize), r.gen_range(2..5usize));
        let inputs =
            [rand_t(r, &[c, h, w]), rand_t_off(r, &[c]), rand_t(r, &[c])];
        for training in [true, false] {
            check_op(&inputs, EPS, TOL, move |g, ids| {
                let mut stats = BnStats::new(c, 0.9, 1e-3);
                g.batchnorm2d(ids[0], ids[1], ids[2], &mut stats, training)
            })
            .unwrap_or_else(|e| panic!("batchnorm2d(training={training}) #{salt}: {e}"));
        }

        // batchnorm over point slots
        let (k, np, c) = (r.gen_range(1..4usize), r.gen_range(2..5usize), r.gen_range(1..4usize));
        let counts: Vec<usize> = (0..k).map(|_| r.gen_range(1..=np)).collect();
        let inputs = [rand_t(r, &[k, np, c]), rand_t_off(r, &[c]), rand_t(r, &[c])];
        check_op(&inputs, EPS, TOL, move |g, ids| {
            let mut stats = BnStats::new(c, 0.9, 1e-3);
            g.batchnorm_points(ids[0], ids[1], ids[2], &counts, &mut stats, true)
        })
        .unwrap_or_else(|e| panic!("batchnorm_points #{salt}: {e}"));

        // scatter to a pseudo-image
        let (ny, nx) = (r.gen_range(2..5usize), r.gen_range(2..5usize));
        let kn = r.gen_range(1..=ny * nx);
        let mut cells: Vec<usize> = (0..ny * nx).collect();
        for j in (1..cells.len()).rev() {
            cells.swap(j, r.gen_range(0..=j));
        }
        let coords: Vec<(usize, usize)> = cells[..kn].iter().map(|&p| (p % nx, p / nx)).collect();
        let c = r.gen_range(1..4usize);
        let inputs = [rand_t(r, &[kn, c])];
        check_op(&inputs, EPS, TOL, move |g, ids| g.scatter(ids[0], &coords, ny, nx))
            .unwrap_or_else(|e| panic!("scatter #{salt}: {e}"));
    }

    // losses: analytic derivative against central differences
    let mut max_loss_err = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let d = rng.gen_range(-3.0..3.0);
        let delta = rng.gen_range(0.5..2.0);
        let (_, g) = smooth_l1(d, delta);
        let fd = fd_grad(|x| smooth_l1(x[0], delta).0, &[d], EPS)[0];
        max_loss_err = max_loss_err.max((g - fd).abs() / 1.0f64.max(g.abs()));

        let z = rng.gen_range(-4.0..4.0);
        let pos = rng.gen_bool(0.5);
        let (_, g) = focal_loss(z, pos, 0.25, 2.0);
        let fd = fd_grad(|x| focal_loss(x[0], pos, 0.25, 2.0).0, &[z], EPS)[0];
        max_loss_err = max_loss_err.max((g - fd).abs() / 1.0f64.max(g.abs()));

        let logits = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let target = rng.gen_range(0..2usize);
        let (_, g) = direction_loss(logits, target);
        let fd = fd_grad(|x| direction_loss([x[0], x[1]], target).0, &logits, EPS);
        for k in 0..2 {
            max_loss_err = max_loss_err.max((g[k] - fd[k]).abs() / 1.0f64.max(g[k].abs()));
        }

        // total loss is linear in its parts; check each coefficient
        let w = LossWeights::default();
        let parts = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
        let n_pos = rng.gen_range(1..6usize);
        let fd = fd_grad(|x| total_loss(x[0], x[1], x[2], n_pos, &w), &parts, EPS);
        let expect = [w.beta_cls, w.beta_loc / n_pos as f64, w.beta_dir / n_pos as f64];
        for k in 0..3 {
            max_loss_err = max_loss_err.max((fd[k] - expect[k]).abs() / 1.0f64.max(expect[k].abs()));
        }
    }
    assert!(max_loss_err < TOL, "loss gradient error {max_loss_err:e} >= {TOL:e}");

    let dt = start.elapsed();
    assert!(dt.as_secs() < 300, "gradient suite took {dt:?}, budget 5 min");
    println!("[PASS] gradients: every op + every loss, {SHAPES_PER_OP} shapes each, rel err < {TOL:e} in {dt:?}");
}

// --- criterion 4: geometry oracles --------------------------------------

/// Rasterization oracle for BEV IoU: count cells whose centers fall in
/// each footprint over the union bounding window.
fn raster_iou(a: &Box3D, b: &Box3D, cells: usize) -> f64 {
    let r = a.w.hypot(a.l).max(b.w.hypot(b.l)) / 2.0;
    let x0 = (a.x - r).min(b.x - r);
    let x1 = (a.x + r).max(b.x + r);
    let y0 = (a.y - r).min(b.y - r);
    let y1 = (a.y + r).max(b.y + r);
    let (mut na, mut nb, mut nab) = (0u64, 0u64, 0u64);
    for iy in 0..cells {
        let y = y0 + (y1 - y0) * (iy as f64 + 0.5) / cells as f64;
        for ix in 0..cells {
            let x = x0 + (x1 - x0) * (ix as f64 + 0.5) / cells as f64;
            let ina = a.contains_bev(x, y);
            let inb = b.contains_bev(x, y);
            na += ina as u64;
            nb += inb as u64;
            nab += (ina && inb) as u64;
        }
    }
    if na + nb == nab {
        return 0.0;
    }
    nab as f64 / (na + nb - nab) as f64
}

/// Brute-force NMS oracle: quadratic suppression table walked in score
/// order, no shortcuts.
fn brute_nms(dets: &[Detection], iou: f64, max_keep: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j].score.partial_cmp(&dets[i].score).unwrap().then(i.cmp(&j))
    });
    let mut dead = vec![false; dets.len()];
    let mut kept = Vec::new();
    for &i in &order {
        if dead[i] || kept.len() >= max_keep {
            continue;
        }
        kept.push(dets[i].clone());
        for &j in &order {
            if !dead[j] && j != i && rotated_bev_iou(&dets[i].boxx, &dets[j].boxx) > iou {
                dead[j] = true;
            }
        }
    }
    kept
}

#[test]
fn geometry_oracles_iou_nms_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    // rotated IoU vs rasterization on 10^3 random pairs
    let mut max_dev = 0.0f64;
    for _ in 0..1000 {
        let a = random_box(&mut rng);
        let mut b = random_box(&mut rng);
        // bias half the pairs towards overlap
        if rng.gen_bool(0.5) {
            b.x = a.x + rng.gen_range(-2.0..2.0);
            b.y = a.y + rng.gen_range(-2.0..2.0);
        }
        let dev = (rotated_bev_iou(&a, &b) - raster_iou(&a, &b, 400)).abs();
        max_dev = max_dev.max(dev);
    }
    assert!(max_dev < 1e-2, "IoU deviates from raster oracle by {max_dev}");

    // NMS vs brute force on 10^2 random scenes
    for scene in 0..100 {
        let n = rng.gen_range(1..40usize);
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                boxx: random_box(&mut rng),
                score: rng.gen_range(0.0..1.0),
                class: 0,
            })
            .collect();
        let iou = rng.gen_range(0.1..0.7);
        let got = nms(&dets, iou, 25);
        let want = brute_nms(&dets, iou, 25);
        assert_eq!(got.len(), want.len(), "scene {scene}: kept counts differ");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!((g.score, g.boxx), (w.score, w.boxx), "scene {scene}: kept set differs");
        }
    }

    // AP vs a hand-computed PR table: 3 gts, 5 detections scored so the
    // matches alternate TP, FP, TP, FP, TP.
    let gts = vec![vec![
        Box3D::new(0.0, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0),
        Box3D::new(8.0, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0),
        Box3D::new(-8.0, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0),
    ]];
    let dets = vec![vec![
        Detection { boxx: gts[0][0], score: 0.9, class: 0 },
        Detection { boxx: Box3D::new(0.0, 7.0, -1.0, 1.6, 3.9, 1.56, 0.0), score: 0.8, class: 0 },
        Detection { boxx: gts[0][1], score: 0.7, class: 0 },
        Detection { boxx: Box3D::new(0.0, -7.0, -1.0, 1.6, 3.9, 1.56, 0.0), score: 0.6, class: 0 },
        Detection { boxx: gts[0][2], score: 0.5, class: 0 },
    ]];
    // by hand: interpolated precision is 1 at recall <= 1/3, 2/3 up to
    // 2/3, 0.6 at 1.0 -> (4*1 + 3*(2/3) + 4*0.6) / 11
    let want = (4.0 + 2.0 + 2.4) / 11.0;
    let pr = average_precision(&dets, &gts, None, 0.5, Metric::Bev, false);
    assert!((pr.ap - want).abs() < 1e-12, "AP {} != hand-computed {want}", pr.ap);

    println!("[PASS] geometry: raster-IoU dev {max_dev:.4}, NMS == brute force on 100 scenes, AP == {want:.4}");
}

// --- criterion 5: end-to-end learnability -------------------------------

#[test]
fn end_to_end_learnability_desk_preset() {
    let start = Instant::now();
    // the desk preset's own data source: 8 seeded synthetic scenes.
    // Augmentation is disabled because the target is recovery of the
    // training scenes themselves within the step budget.
    let mut cfg = ExperimentConfig::desk();
    cfg.augment.global = false;
    cfg.augment.gt_sampling = false;
    cfg.schedule.epochs = usize::MAX / 2; // step-capped below
    assert_eq!((cfg.network.n_scales, cfg.network.fpn_enabled), (2, true));

    let frames = load_source_frames(&cfg).unwrap();
    assert_eq!(frames.len(), 8);
    let mut trainer = Trainer::new(cfg, frames.clone(), None);

    let mut best_ap = 0.0f64;
    let mut reached_at = None;
    while trainer.step < 3000 {
        trainer.train_step().unwrap();
        if trainer.step % 50 == 0 {
            let (_, result) = trainer.evaluate_frames(&frames, false);
            best_ap = best_ap.max(result.ap_bev[0]);
            if result.ap_bev[0] >= 0.90 {
                reached_at = Some(trainer.step);
                break;
            }
        }
    }
    let reached_at = reached_at
        .unwrap_or_else(|| panic!("BEV AP@0.5 only reached {best_ap:.3} within 3000 steps"));

    // the n_scales = 1 ablation must also train: loss falls to < 30% of
    // its starting level
    let mut cfg1 = ExperimentConfig::desk();
    cfg1.augment.global = false;
    cfg1.augment.gt_sampling = false;
    cfg1.network.n_scales = 1;
    let mut t1 = Trainer::new(cfg1, frames, None);
    let first: f64 = (0..10).map(|_| t1.train_step().unwrap().total).sum::<f64>() / 10.0;
    for _ in 0..180 {
        t1.train_step().unwrap();
    }
    let last: f64 = (0..10).map(|_| t1.train_step().unwrap().total).sum::<f64>() / 10.0;
    assert!(
        last < 0.3 * first,
        "n_scales=1 did not converge: loss {first:.4} -> {last:.4}"
    );

    let dt = start.elapsed();
    assert!(dt.as_secs() < 1800, "end-to-end run took {dt:?}, budget 30 min");
    println!(
        "[PASS] end-to-end: BEV AP@0.5 >= 0.90 at step {reached_at}; n_scales=1 loss {first:.3} -> {last:.3}; {dt:?}"
    );
}

// --- criterion 6: loss formula spot-check -------------------------------

#[test]
fn loss_formula_spot_checks() {
    let w = LossWeights::default();
    assert_eq!((w.beta_cls, w.beta_loc, w.beta_dir), (1.0, 2.0, 0.2));
    let total = total_loss(1.0, 1.0, 1.0, 2, &w);
    assert!((total - 2.1).abs() < 1e-12, "total_loss(1,1,1,2) = {total}, want 2.1");

    // p = 0.9 positive: alpha (1-p)^gamma * (-ln p) = -0.25 * 0.01 * ln 0.9
    let z = (0.9f64 / 0.1).ln();
    let (l, _) = focal_loss(z, true, 0.25, 2.0);
    let want = -0.25 * 0.01 * 0.9f64.ln();
    assert!(
        ((l - want) / want).abs() < 1e-4,
        "focal({z:.4}) = {l:.6e}, want {want:.6e} to 4 significant figures"
    );
    println!("[PASS] loss formulas: total_loss(1,1,1,2) = 2.1; focal(p=0.9) = {l:.4e}");
}

// --- criterion 7: voxelization throughput floor -------------------------

#[test]
fn voxelize_throughput_floor() {
    let vcfg = VoxelConfig::paper();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud = random_cloud(&vcfg.range, 20_000, &mut rng);
    // warm up allocators and caches
    for s in 0..vcfg.n_scales() {
        let _ = voxelize(&cloud, &vcfg, s, &mut rng);
    }
    let start = Instant::now();
    let mut total_voxels = 0;
    for s in 0..vcfg.n_scales() {
        total_voxels += voxelize(&cloud, &vcfg, s, &mut rng).features.len();
    }
    let dt = start.elapsed();
    assert!(total_voxels > 0);
    assert!(
        dt.as_millis() < 100,
        "voxelizing 20k points at 3 scales took {dt:?}, budget 100 ms"
    );
    println!("[PASS] throughput: 20k points x 3 scales voxelized in {dt:?} (< 100 ms)");
}

// --- criterion 8: augmentation soundness ---------------------------------

#[test]
fn augmentation_soundness_over_100_frames() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut frames = Vec::with_capacity(100);
    for seed in 0..100 {
        frames.push(generate_frame(&SceneSpec { seed, ..SceneSpec::default() }).unwrap());
    }
    let db = build_gt_database(&frames[..8]);

    for frame in &frames {
        // global flip/rotate/scale moves points and boxes rigidly
        // together: each box keeps exactly its interior point index set
        let before = membership(frame);
        let after = membership(&global_augment(frame, &mut rng));
        assert_eq!(before, after, "global augmentation changed box membership");

        // gt sampling may only place collision-free boxes
        let sampled = gt_sample_augment(frame, &db, 12, &mut rng);
        for i in 0..sampled.boxes.len() {
            for j in (i + 1)..sampled.boxes.len() {
                let iou = rotated_bev_iou(&sampled.boxes[i], &sampled.boxes[j]);
                assert_eq!(iou, 0.0, "sampled boxes {i} and {j} overlap (IoU {iou})");
            }
        }
    }
    println!("[PASS] augmentation: membership preserved and pairwise BEV IoU 0 over 100 frames");
}

//! Command-line front end: preprocess, train, infer, eval, viz, selftest.
//! Exit codes: 0 success, 1 user error, 2 internal assertion failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pillarfpn::config::ExperimentConfig;
use pillarfpn::eval::{average_precision, evaluate, render_bev, write_kitti_results, Detection, Metric};
use pillarfpn::geom::Box3D;
use pillarfpn::kitti::{self, Calibration, LabeledFrame};
use pillarfpn::net::Network;
use pillarfpn::synth::{apply_global, generate_frame, gt_sample_augment, membership, SceneSpec};
use pillarfpn::train::{
    cache_hash, checkpoint_path, load_source_frames, read_cache, write_cache, TrainLogRow, Trainer,
};
use pillarfpn::voxel::voxelize;

#[derive(Parser)]
#[command(name = "pillarfpn", about = "Multi-scale pillar detector: training and evaluation")]
struct Cli {
    /// Experiment config JSON; omit to use a preset's defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in preset (desk|paper) used when --config is absent.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Build the frame cache and ground-truth database.
    Preprocess,
    /// Train from the preprocessed cache.
    Train(TrainArgs),
    /// Run inference from a checkpoint over the cached frames.
    Infer(InferArgs),
    /// Score a detections directory against the cached ground truth.
    Eval(EvalArgs),
    /// Render one cached frame (and optional detections) as SVG.
    Viz(VizArgs),
    /// Run the built-in invariant and throughput checks.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    /// Output directory for checkpoints and the TSV log.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    /// Stop after this many optimizer steps regardless of epochs.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory receiving one KITTI-format result file per frame.
    #[arg(long, default_value = "dets")]
    out: PathBuf,
    /// Also write one BEV SVG per frame into the output directory.
    #[arg(long)]
    svg: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of KITTI-format result files (one per frame).
    #[arg(long)]
    dets: PathBuf,
    /// Machine-readable report destination.
    #[arg(long, default_value = "eval_report.json")]
    report: PathBuf,
}

#[derive(Args)]
struct VizArgs {
    /// Frame index within the cache.
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Optional detections directory to overlay.
    #[arg(long)]
    dets: Option<PathBuf>,
    #[arg(long, default_value = "scene.svg")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path),
        None => ExperimentConfig::preset(&cli.preset),
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };

    let run = std::panic::catch_unwind(move || match cli.cmd {
        Cmd::Preprocess => cmd_preprocess(&cfg),
        Cmd::Train(a) => cmd_train(&cfg, &a),
        Cmd::Infer(a) => cmd_infer(&cfg, &a),
        Cmd::Eval(a) => cmd_eval(&cfg, &a),
        Cmd::Viz(a) => cmd_viz(&cfg, &a),
        Cmd::Selftest => cmd_selftest(&cfg),
    });
    match run {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(_) => {
            eprintln!("internal assertion failure");
            ExitCode::from(2)
        }
    }
}

fn cmd_preprocess(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let frames = load_source_frames(cfg)?;
    let dir = cfg.cache_dir();
    write_cache(&dir, &frames)?;
    println!(
        "cached {} frames to {} (hash {:016x})",
        frames.len(),
        dir.display(),
        cache_hash(&dir)?
    );
    Ok(())
}

fn load_cache_or_hint(cfg: &ExperimentConfig) -> anyhow::Result<(Vec<LabeledFrame>, pillarfpn::synth::GtDatabase)> {
    let dir = cfg.cache_dir();
    read_cache(&dir).map_err(|e| {
        anyhow::anyhow!("cannot read cache at {} ({e}); run `pillarfpn preprocess` first", dir.display())
    })
}

fn cmd_train(cfg: &ExperimentConfig, args: &TrainArgs) -> anyhow::Result<()> {
    let (frames, db) = load_cache_or_hint(cfg)?;
    std::fs::create_dir_all(&args.out)?;
    let mut trainer = Trainer::new(cfg.clone(), frames, Some(db));

    let mut log = String::from(TrainLogRow::TSV_HEADER);
    log.push('\n');
    let initial = checkpoint_path(&args.out, "initial");
    trainer.net.params.save(&initial)?;
    let latest = checkpoint_path(&args.out, "latest");
    trainer.net.params.save(&latest)?;

    let total_steps = args
        .steps
        .or(cfg.schedule.max_steps)
        .unwrap_or(cfg.schedule.epochs * trainer.steps_per_epoch());
    let ckpt_every = cfg.schedule.checkpoint_every_epochs.max(1) * trainer.steps_per_epoch();
    let started = Instant::now();
    for i in 0..total_steps {
        match trainer.train_step() {
            Ok(row) => {
                log.push_str(&row.tsv());
                log.push('\n');
                if row.step % 10 == 0 || i + 1 == total_steps {
                    println!("{}", row.tsv());
                }
                if row.step % ckpt_every == 0 || i + 1 == total_steps {
                    trainer.net.params.save(&latest)?;
                    trainer
                        .net
                        .params
                        .save(&checkpoint_path(&args.out, &format!("epoch{}", trainer.epoch)))?;
                }
            }
            Err(e) => {
                // keep the last good checkpoint; internal failure
                std::fs::write(args.out.join("train.log.tsv"), &log)?;
                eprintln!("{e}");
                panic!("training aborted at step {}", trainer.step);
            }
        }
    }
    trainer.net.params.save(&latest)?;
    std::fs::write(args.out.join("train.log.tsv"), &log)?;
    println!(
        "trained {} steps ({} epochs) in {:.1}s; checkpoints in {}",
        total_steps,
        trainer.epoch,
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn cmd_infer(cfg: &ExperimentConfig, args: &InferArgs) -> anyhow::Result<()> {
    let (frames, _) = load_cache_or_hint(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(cfg.network.clone(), cfg.voxel.clone(), &mut rng);
    net.params.load(&args.checkpoint)?;
    std::fs::create_dir_all(&args.out)?;

    let calib = Calibration::identity();
    let mut total = 0.0f64;
    for (i, f) in frames.iter().enumerate() {
        let mut frame_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64));
        let t0 = Instant::now();
        let dets = pillarfpn::eval::predict(&mut net, &f.cloud, &cfg.anchor, &cfg.postproc, &mut frame_rng);
        let dt = t0.elapsed().as_secs_f64();
        total += dt;
        let id = format!("{i:06}");
        write_kitti_results(&args.out, &id, &dets, &calib)?;
        if args.svg {
            render_bev(&f.cloud, &dets, &f.boxes, &cfg.voxel.range, &args.out.join(format!("{id}.svg")))?;
        }
        println!("frame {id}: {} detections in {:.1} ms", dets.len(), dt * 1e3);
    }
    println!("aggregate: {:.2} fps ({} frames / {:.2}s forward)", frames.len() as f64 / total, frames.len(), total);
    Ok(())
}

fn read_detections(dir: &Path, n_frames: usize) -> anyhow::Result<Vec<Vec<Detection>>> {
    let calib = Calibration::identity();
    let mut all = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let path = dir.join(format!("{i:06}.txt"));
        if !path.exists() {
            anyhow::bail!("missing detections for frame {i:06} in {}", dir.display());
        }
        let text = std::fs::read_to_string(&path)?;
        let entries = kitti::parse_label(&text)
            .map_err(|(line, reason)| anyhow::anyhow!("{}:{line}: {reason}", path.display()))?;
        let mut dets = Vec::with_capacity(entries.len());
        for e in &entries {
            dets.push(Detection {
                boxx: kitti::camera_box_to_lidar(e, &calib)?,
                score: e.score.unwrap_or(1.0),
                class: pillarfpn::kitti::class_id(&e.class).unwrap_or(0),
            });
        }
        all.push(dets);
    }
    Ok(all)
}

fn cmd_eval(cfg: &ExperimentConfig, args: &EvalArgs) -> anyhow::Result<()> {
    let (frames, _) = load_cache_or_hint(cfg)?;
    let dets = read_detections(&args.dets, frames.len())?;
    let gts: Vec<Vec<Box3D>> = frames.iter().map(|f| f.boxes.clone()).collect();
    let result = evaluate(&dets, &gts, None, cfg.eval.iou_threshold, cfg.eval.forty_point);
    println!("AP@{} (all gts counted)", cfg.eval.iou_threshold);
    println!("  BEV: easy {:.4}  moderate {:.4}  hard {:.4}", result.ap_bev[0], result.ap_bev[1], result.ap_bev[2]);
    println!("  3D:  easy {:.4}  moderate {:.4}  hard {:.4}", result.ap_3d[0], result.ap_3d[1], result.ap_3d[2]);
    let report = serde_json::json!({
        "iou_threshold": result.iou_threshold,
        "ap_bev": result.ap_bev,
        "ap_3d": result.ap_3d,
    });
    std::fs::write(&args.report, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", args.report.display());
    Ok(())
}

fn cmd_viz(cfg: &ExperimentConfig, args: &VizArgs) -> anyhow::Result<()> {
    let (frames, _) = load_cache_or_hint(cfg)?;
    let frame = frames
        .get(args.frame)
        .ok_or_else(|| anyhow::anyhow!("frame {} out of range (cache holds {})", args.frame, frames.len()))?;
    let dets = match &args.dets {
        Some(dir) => read_detections(dir, frames.len())?.swap_remove(args.frame),
        None => vec![],
    };
    render_bev(&frame.cloud, &dets, &frame.boxes, &cfg.voxel.range, &args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_selftest(cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failures += 1;
        }
    };

    // shape audit for the active config
    let audit = pillarfpn::net::audit_shapes(&cfg.network, &cfg.voxel);
    check("shape audit", audit.is_ok(), format!("{:?}", audit.map(|a| a.levels)));

    // voxelization throughput: 20k-point cloud, all scales, single thread
    let paper = pillarfpn::voxel::VoxelConfig::paper();
    let spec = SceneSpec {
        n_cars: 12,
        n_clutter: 20_000,
        range: paper.range,
        seed: 99,
        ..SceneSpec::default()
    };
    let frame = generate_frame(&spec)?;
    let cloud = kitti::crop_to_range(&frame.cloud, &paper.range);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    // warm-up, then timed run
    for s in 0..paper.n_scales() {
        let _ = voxelize(&cloud, &paper, s, &mut rng);
    }
    let t0 = Instant::now();
    for s in 0..paper.n_scales() {
        let _ = voxelize(&cloud, &paper, s, &mut rng);
    }
    let ms = t0.elapsed().as_secs_f64() * 1e3;
    check(
        "voxelize throughput",
        ms < 100.0,
        format!("{} points x {} scales in {ms:.1} ms (budget 100 ms)", cloud.len(), paper.n_scales()),
    );

    // augmentation soundness on a few frames
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut aug_ok = true;
    for seed in 0..10 {
        let f = generate_frame(&SceneSpec { seed, range: cfg.voxel.range, ..SceneSpec::default() })?;
        use rand::Rng;
        let g = apply_global(
            &f,
            rng.gen_bool(0.5),
            rng.gen_range(-0.78..0.78),
            rng.gen_range(0.95..1.05),
        );
        if membership(&f) != membership(&g) {
            aug_ok = false;
        }
        let db = pillarfpn::synth::build_gt_database(std::slice::from_ref(&f));
        let pasted = gt_sample_augment(&f, &db, 12, &mut rng);
        for i in 0..pasted.boxes.len() {
            for j in (i + 1)..pasted.boxes.len() {
                if pillarfpn::geom::rotated_bev_iou(&pasted.boxes[i], &pasted.boxes[j]) > 0.0 {
                    aug_ok = false;
                }
            }
        }
    }
    check("augmentation soundness", aug_ok, "10 frames, membership + collision".into());

    // AP hand fixture
    let g = |x: f64| Box3D::new(x, 0.0, -1.0, 1.6, 3.9, 1.56, 0.0);
    let gts = vec![vec![g(5.0), g(15.0), g(25.0)]];
    let dets = vec![vec![
        Detection { boxx: g(5.0), score: 0.9, class: 0 },
        Detection { boxx: g(40.0), score: 0.8, class: 0 },
        Detection { boxx: g(15.0), score: 0.7, class: 0 },
        Detection { boxx: g(50.0), score: 0.6, class: 0 },
        Detection { boxx: g(25.0), score: 0.5, class: 0 },
    ]];
    let ap = average_precision(&dets, &gts, None, 0.5, Metric::Bev, false).ap;
    check("AP fixture", (ap - 8.4 / 11.0).abs() < 1e-12, format!("ap = {ap:.6}"));

    if failures > 0 {
        panic!("{failures} selftest check(s) failed");
    }
    Ok(())
}

//! Training: anchor target assignment, loss assembly with analytic
//! gradients injected at the head outputs, the optimizer loop, and the
//! preprocessing cache feeding it.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorId};
use crate::codec::{encode, match_anchors, AnchorConfig, AnchorGrid, MatchLabel};
use crate::config::{DataSource, ExperimentConfig};
use crate::eval::{evaluate, level_anchor_grid, predict, Detection, EvalResult};
use crate::geom::Box3D;
use crate::kitti;
use crate::kitti::{Difficulty, LabeledFrame};
use crate::loss::{
    adam_step, direction_loss, focal_loss, smooth_l1, total_loss, LossWeights, OptimizerState,
};
use crate::net::{Forward, Network};
use crate::synth::{build_gt_database, generate_frame, global_augment, gt_sample_augment, GtDatabase, SceneSpec};
use crate::voxel::voxelize;
use crate::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Kitti(#[from] crate::kitti::KittiError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("cache parse error: {0}")]
    Cache(#[from] serde_json::Error),
    #[error("non-finite gradient in {param} at step {step}; training aborted")]
    NonFinite { param: String, step: usize },
    #[error("non-finite loss at step {step}; training aborted")]
    NonFiniteLoss { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub cls: f64,
    pub loc: f64,
    pub dir: f64,
    pub total: f64,
    pub n_pos: usize,
}

/// Match every level's anchors against the frame's boxes.
pub fn frame_targets(
    grids: &[AnchorGrid],
    gts: &[Box3D],
    acfg: &AnchorConfig,
) -> Vec<Vec<MatchLabel>> {
    grids
        .iter()
        .map(|g| match_anchors(&g.anchors, gts, acfg.pos_iou, acfg.neg_iou))
        .collect()
}

/// Compute the weighted loss of one forward pass and the gradient seeds
/// to inject at each head output. `grad_scale` multiplies every seed
/// (1 / batch_size under gradient accumulation).
pub fn frame_loss(
    fwd: &Forward,
    grids: &[AnchorGrid],
    gts: &[Box3D],
    w: &LossWeights,
    acfg: &AnchorConfig,
    grad_scale: f64,
) -> (LossParts, Vec<(TensorId, Tensor)>) {
    assert_eq!(fwd.levels.len(), grids.len());
    let targets = frame_targets(grids, gts, acfg);
    let n_pos: usize = targets
        .iter()
        .flat_map(|t| t.iter())
        .filter(|m| matches!(m, MatchLabel::Positive(_)))
        .count();
    let norm = n_pos.max(1) as f64;
    let cls_coef = if w.normalize_cls { w.beta_cls / norm } else { w.beta_cls };
    let loc_coef = if n_pos > 0 { w.beta_loc / n_pos as f64 } else { 0.0 };
    let dir_coef = if n_pos > 0 { w.beta_dir / n_pos as f64 } else { 0.0 };

    let (mut cls_sum, mut loc_sum, mut dir_sum) = (0.0, 0.0, 0.0);
    let mut seeds = Vec::with_capacity(3 * fwd.levels.len());
    for (li, level) in fwd.levels.iter().enumerate() {
        let grid = &grids[li];
        let a_per_cell = grid.per_cell;
        let hw = level.ny * level.nx;
        let cls_v = fwd.graph.value(level.cls);
        let box_v = fwd.graph.value(level.boxr);
        let dir_v = fwd.graph.value(level.dir);
        // single-class heads: cls channel == anchor slot
        assert_eq!(cls_v.shape[0], a_per_cell, "multi-class losses not wired");
        let mut cls_seed = Tensor::zeros(&cls_v.shape);
        let mut box_seed = Tensor::zeros(&box_v.shape);
        let mut dir_seed = Tensor::zeros(&dir_v.shape);

        for iy in 0..level.ny {
            for ix in 0..level.nx {
                let pos = iy * level.nx + ix;
                for a in 0..a_per_cell {
                    let anchor_idx = (iy * level.nx + ix) * a_per_cell + a;
                    let label = targets[li][anchor_idx];
                    if matches!(label, MatchLabel::Ignored) {
                        continue;
                    }
                    let is_pos = matches!(label, MatchLabel::Positive(_));
                    let logit = cls_v.data[a * hw + pos] as f64;
                    let (l, g) = focal_loss(logit, is_pos, w.focal_alpha, w.focal_gamma);
                    cls_sum += l;
                    cls_seed.data[a * hw + pos] = (cls_coef * g * grad_scale) as Real;

                    if let MatchLabel::Positive(gi) = label {
                        let target = encode(&gts[gi], &grid.anchors[anchor_idx]);
                        for r in 0..7 {
                            let pred = box_v.data[(a * 7 + r) * hw + pos] as f64;
                            let (l, g) = smooth_l1(pred - target.residuals[r], w.smooth_l1_delta);
                            loc_sum += l;
                            box_seed.data[(a * 7 + r) * hw + pos] =
                                (loc_coef * g * grad_scale) as Real;
                        }
                        let logits = [
                            dir_v.data[(a * 2) * hw + pos] as f64,
                            dir_v.data[(a * 2 + 1) * hw + pos] as f64,
                        ];
                        let (l, g) = direction_loss(logits, target.dir_target as usize);
                        dir_sum += l;
                        dir_seed.data[(a * 2) * hw + pos] = (dir_coef * g[0] * grad_scale) as Real;
                        dir_seed.data[(a * 2 + 1) * hw + pos] =
                            (dir_coef * g[1] * grad_scale) as Real;
                    }
                }
            }
        }
        seeds.push((level.cls, cls_seed));
        seeds.push((level.boxr, box_seed));
        seeds.push((level.dir, dir_seed));
    }

    let cls = if w.normalize_cls { cls_sum / norm } else { cls_sum };
    let total = total_loss(cls, loc_sum, dir_sum, n_pos, w);
    (LossParts { cls, loc: loc_sum, dir: dir_sum, total, n_pos }, seeds)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub cls: f64,
    pub loc: f64,
    pub dir: f64,
    pub total: f64,
    pub n_pos: usize,
}

impl TrainLogRow {
    pub const TSV_HEADER: &'static str = "step\tepoch\tlr\tcls\tloc\tdir\ttotal\tn_pos";

    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6e}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.step, self.epoch, self.lr, self.cls, self.loc, self.dir, self.total, self.n_pos
        )
    }
}

pub struct Trainer {
    pub net: Network,
    pub cfg: ExperimentConfig,
    pub grids: Vec<AnchorGrid>,
    pub frames: Vec<LabeledFrame>,
    gt_db: GtDatabase,
    opt: OptimizerState,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub epoch: usize,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: ExperimentConfig, frames: Vec<LabeledFrame>, gt_db: Option<GtDatabase>) -> Self {
        assert!(!frames.is_empty(), "no training frames");
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.network.clone(), cfg.voxel.clone(), &mut rng);
        let grids = (0..net.audit.levels.len())
            .map(|l| level_anchor_grid(&net, l, &cfg.anchor))
            .collect();
        let opt = OptimizerState::new(&net.params.tensors);
        let gt_db = gt_db.unwrap_or_else(|| build_gt_database(&frames));
        let order: Vec<usize> = (0..frames.len()).collect();
        Trainer { net, cfg, grids, frames, gt_db, opt, rng, order, cursor: 0, epoch: 0, step: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.cfg.optimizer.lr_at_epoch(self.epoch)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.frames.len().div_ceil(self.cfg.schedule.batch_size)
    }

    fn next_frame_indices(&mut self) -> Vec<usize> {
        let bsz = self.cfg.schedule.batch_size;
        let mut batch = Vec::with_capacity(bsz);
        for _ in 0..bsz {
            if self.cursor == 0 {
                // seeded reshuffle at each epoch boundary
                use rand::seq::SliceRandom;
                self.order.shuffle(&mut self.rng);
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
            if self.cursor >= self.order.len() {
                self.cursor = 0;
                self.epoch += 1;
            }
        }
        batch
    }

    fn augmented(&mut self, idx: usize) -> LabeledFrame {
        let mut frame = self.frames[idx].clone();
        if self.cfg.augment.gt_sampling && !self.gt_db.entries.is_empty() {
            frame = gt_sample_augment(&frame, &self.gt_db, self.cfg.augment.max_new, &mut self.rng);
        }
        if self.cfg.augment.global {
            frame = global_augment(&frame, &mut self.rng);
        }
        frame
    }

    /// One optimizer step over a batch (gradient accumulation across
    /// frames). A non-finite loss or gradient aborts without mutating
    /// parameters.
    pub fn train_step(&mut self) -> Result<TrainLogRow, TrainError> {
        let batch = self.next_frame_indices();
        let bsz = batch.len();
        let grad_scale = 1.0 / bsz as f64;
        let bn_batch_stats = self
            .cfg
            .schedule
            .bn_freeze_after_epochs
            .map_or(true, |freeze| self.epoch < freeze);
        let mut acc: Vec<Option<Tensor>> = vec![None; self.net.params.len()];
        let mut parts = LossParts { cls: 0.0, loc: 0.0, dir: 0.0, total: 0.0, n_pos: 0 };

        for idx in batch {
            let frame = self.augmented(idx);
            let cropped = kitti::crop_to_range(&frame.cloud, &self.cfg.voxel.range);
            let sets: Vec<_> = (0..self.cfg.voxel.n_scales())
                .map(|s| voxelize(&cropped, &self.cfg.voxel, s, &mut self.rng))
                .collect();
            let mut fwd = self.net.forward(&sets, bn_batch_stats);
            let (p, seeds) =
                frame_loss(&fwd, &self.grids, &frame.boxes, &self.cfg.loss, &self.cfg.anchor, grad_scale);
            if !p.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: self.step });
            }
            parts.cls += p.cls / bsz as f64;
            parts.loc += p.loc / bsz as f64;
            parts.dir += p.dir / bsz as f64;
            parts.total += p.total / bsz as f64;
            parts.n_pos += p.n_pos;
            for (slot, g) in acc.iter_mut().zip(fwd.grads(seeds, &self.net.params)) {
                match (slot.as_mut(), g) {
                    (Some(s), Some(g)) => {
                        for (a, b) in s.data.iter_mut().zip(&g.data) {
                            *a += *b;
                        }
                    }
                    (None, Some(g)) => *slot = Some(g),
                    _ => {}
                }
            }
        }

        let lr = self.lr();
        adam_step(
            &self.net.params.names,
            &mut self.net.params.tensors,
            &acc,
            &mut self.opt,
            &self.cfg.optimizer,
            lr,
        )
        .map_err(|e| TrainError::NonFinite { param: e.param, step: self.step })?;
        self.step += 1;
        Ok(TrainLogRow {
            step: self.step,
            epoch: self.epoch,
            lr,
            cls: parts.cls,
            loc: parts.loc,
            dir: parts.dir,
            total: parts.total,
            n_pos: parts.n_pos,
        })
    }

    /// Predict on a set of frames and score them. Synthetic frames skip
    /// difficulty bucketing (every gt counts in all buckets).
    pub fn evaluate_frames(
        &mut self,
        frames: &[LabeledFrame],
        use_difficulty: bool,
    ) -> (Vec<Vec<Detection>>, EvalResult) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x5eed);
        let dets: Vec<Vec<Detection>> = frames
            .iter()
            .map(|f| predict(&mut self.net, &f.cloud, &self.cfg.anchor, &self.cfg.postproc, &mut rng))
            .collect();
        let gts: Vec<Vec<Box3D>> = frames.iter().map(|f| f.boxes.clone()).collect();
        let diffs: Option<Vec<Vec<Difficulty>>> = if use_difficulty {
            Some(frames.iter().map(|f| f.difficulties.clone()).collect())
        } else {
            None
        };
        let result = evaluate(
            &dets,
            &gts,
            diffs.as_deref(),
            self.cfg.eval.iou_threshold,
            self.cfg.eval.forty_point,
        );
        (dets, result)
    }
}

// --- preprocessing cache ---------------------------------------------

#[derive(Serialize, Deserialize)]
struct CachedBox {
    boxx: [f64; 7],
    class: i32,
    difficulty: u8,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    n_frames: usize,
    hash: u64,
}

fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn frame_hash(frames: &[LabeledFrame]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for f in frames {
        for p in &f.cloud.points {
            for &v in p {
                h = fnv1a(&v.to_le_bytes(), h);
            }
        }
        for b in &f.boxes {
            for v in [b.x, b.y, b.z, b.w, b.l, b.h, b.yaw] {
                h = fnv1a(&v.to_le_bytes(), h);
            }
        }
    }
    h
}

/// Materialize the training frames named by the config: seeded synthetic
/// scenes, or KITTI frames converted to LIDAR boxes (Car class only) and
/// cropped to the configured range.
pub fn load_source_frames(cfg: &ExperimentConfig) -> Result<Vec<LabeledFrame>, TrainError> {
    match &cfg.data.source {
        DataSource::Synthetic { n_frames, n_cars, base_seed } => {
            let mut frames = Vec::with_capacity(*n_frames);
            for i in 0..*n_frames {
                let spec = SceneSpec {
                    n_cars: *n_cars,
                    range: cfg.voxel.range,
                    seed: base_seed + i as u64,
                    ..SceneSpec::default()
                };
                frames.push(generate_frame(&spec)?);
            }
            Ok(frames)
        }
        DataSource::Kitti { root, train_split, .. } => {
            let ids = kitti::read_split_file(train_split)?;
            let mut frames = Vec::with_capacity(ids.len());
            for id in &ids {
                let (cloud, _) = kitti::read_velodyne(&root.join("velodyne").join(format!("{id}.bin")))?;
                let text = std::fs::read_to_string(root.join("label_2").join(format!("{id}.txt")))?;
                let labels = kitti::parse_label(&text).map_err(|(line, reason)| {
                    kitti::KittiError::MalformedLabel {
                        path: root.join("label_2").join(format!("{id}.txt")).display().to_string(),
                        line,
                        reason,
                    }
                })?;
                let calib_text = std::fs::read_to_string(root.join("calib").join(format!("{id}.txt")))?;
                let calib = kitti::parse_calib(&calib_text)?;
                let mut frame = LabeledFrame::new(kitti::crop_to_range(&cloud, &cfg.voxel.range));
                for l in &labels {
                    if l.class != "Car" {
                        continue;
                    }
                    frame.boxes.push(kitti::camera_box_to_lidar(l, &calib)?);
                    frame.classes.push(crate::kitti::CLASS_CAR);
                    frame.difficulties.push(l.difficulty());
                }
                frames.push(frame);
            }
            Ok(frames)
        }
    }
}

/// Write the frame cache: cropped clouds, labels, gt database, and a
/// content hash for idempotence checks.
pub fn write_cache(dir: &Path, frames: &[LabeledFrame]) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir.join("frames"))?;
    let mut labels: Vec<Vec<CachedBox>> = Vec::with_capacity(frames.len());
    for (i, f) in frames.iter().enumerate() {
        kitti::write_velodyne(&dir.join("frames").join(format!("{i:06}.bin")), &f.cloud)?;
        labels.push(
            f.boxes
                .iter()
                .enumerate()
                .map(|(j, b)| CachedBox {
                    boxx: [b.x, b.y, b.z, b.w, b.l, b.h, b.yaw],
                    class: f.classes[j],
                    difficulty: f.difficulties[j] as u8,
                })
                .collect(),
        );
    }
    std::fs::write(dir.join("labels.json"), serde_json::to_string_pretty(&labels)?)?;
    crate::synth::write_gt_database(&dir.join("gt_db.bin"), &build_gt_database(frames))?;
    let meta = CacheMeta { n_frames: frames.len(), hash: frame_hash(frames) };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<(Vec<LabeledFrame>, GtDatabase), TrainError> {
    let meta: CacheMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    let labels: Vec<Vec<CachedBox>> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("labels.json"))?)?;
    let mut frames = Vec::with_capacity(meta.n_frames);
    for (i, frame_labels) in labels.iter().enumerate().take(meta.n_frames) {
        let (cloud, _) = kitti::read_velodyne(&dir.join("frames").join(format!("{i:06}.bin")))?;
        let mut f = LabeledFrame::new(cloud);
        for c in frame_labels {
            let [x, y, z, w, l, h, yaw] = c.boxx;
            f.boxes.push(Box3D::new(x, y, z, w, l, h, yaw));
            f.classes.push(c.class);
            f.difficulties.push(match c.difficulty {
                0 => Difficulty::Easy,
                1 => Difficulty::Moderate,
                2 => Difficulty::Hard,
                _ => Difficulty::Ignored,
            });
        }
        frames.push(f);
    }
    let db = crate::synth::read_gt_database(&dir.join("gt_db.bin"))?;
    Ok((frames, db))
}

/// Hash recorded in the cache metadata, for idempotence checks.
pub fn cache_hash(dir: &Path) -> Result<u64, TrainError> {
    let meta: CacheMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
    Ok(meta.hash)
}

pub fn checkpoint_path(out_dir: &Path, tag: &str) -> PathBuf {
    out_dir.join(format!("ckpt_{tag}.bin"))
}

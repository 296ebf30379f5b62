//! Synthetic labeled frames for desk-scale training, plus the
//! training-time augmentations: global flip/rotate/scale and
//! ground-truth sampling from a point database.

use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize_angle, rotated_bev_iou, Box3D, Range3};
use crate::kitti::{Difficulty, LabeledFrame, PointCloud, CLASS_CAR};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not place {placed} of {requested} cars without overlap after {retries} retries")]
    Placement { requested: usize, placed: usize, retries: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_cars: usize,
    pub ground_z: f64,
    /// Mean car size (w, l, h); each dimension jittered by ±size_jitter.
    pub size_mean: [f64; 3],
    pub size_jitter: f64,
    /// Sampling density on box faces, points per square meter.
    pub surface_density: f64,
    pub n_clutter: usize,
    pub range: Range3,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            n_cars: 4,
            ground_z: -1.8,
            size_mean: [1.6, 3.9, 1.56],
            size_jitter: 0.10,
            surface_density: 12.0,
            n_clutter: 300,
            range: Range3::desk(),
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.surface_density <= 0.0 {
            return Err("surface_density must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.size_jitter) {
            return Err("size_jitter must be in [0, 1)".into());
        }
        if !self.range.ordered() {
            return Err("range bounds out of order".into());
        }
        Ok(())
    }
}

fn seeded(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Sample points on one rectangular face of a box. The face is described
/// in box-local coordinates by a fixed axis/value and two free axes;
/// samples are inset slightly from the surface and edges so containment
/// survives f32 storage.
fn sample_face<R: Rng>(
    b: &Box3D,
    fixed_axis: usize,
    fixed_frac: f64, // -1 or +1 (times half extent)
    density: f64,
    rng: &mut R,
    out: &mut Vec<[f32; 4]>,
) {
    // local axis order: x along length (heading), y along width, z up
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let free: Vec<usize> = (0..3).filter(|&a| a != fixed_axis).collect();
    let area = 4.0 * half[free[0]] * half[free[1]];
    let n = (density * area).ceil() as usize;
    const INSET: f64 = 0.995;
    for _ in 0..n {
        let mut local = [0.0f64; 3];
        local[fixed_axis] = fixed_frac * half[fixed_axis] * INSET;
        for &a in &free {
            local[a] = rng.gen_range(-half[a] * INSET..half[a] * INSET);
        }
        let w = b.local_to_world(local);
        let r = rng.gen_range(0.2..0.8);
        out.push([w[0] as f32, w[1] as f32, w[2] as f32, r as f32]);
    }
}

fn sample_box_surface<R: Rng>(b: &Box3D, density: f64, rng: &mut R, out: &mut Vec<[f32; 4]>) {
    // 4 side faces plus the roof; the underside is never visible to a
    // LIDAR above ground
    sample_face(b, 0, -1.0, density, rng, out);
    sample_face(b, 0, 1.0, density, rng, out);
    sample_face(b, 1, -1.0, density, rng, out);
    sample_face(b, 1, 1.0, density, rng, out);
    sample_face(b, 2, 1.0, density, rng, out);
}

/// Generate one labeled frame: non-overlapping cars with surface-sampled
/// points plus uniform clutter. Deterministic in spec.seed.
pub fn generate_frame(spec: &SceneSpec) -> Result<LabeledFrame, SynthError> {
    spec.validate().expect("invalid scene spec");
    let mut rng = seeded(spec.seed);
    let mut boxes: Vec<Box3D> = Vec::with_capacity(spec.n_cars);
    const RETRIES: usize = 200;

    for _ in 0..spec.n_cars {
        let mut placed = false;
        for _ in 0..RETRIES {
            let jit = |m: f64, rng: &mut rand_chacha::ChaCha8Rng| {
                m * rng.gen_range(1.0 - spec.size_jitter..1.0 + spec.size_jitter)
            };
            let w = jit(spec.size_mean[0], &mut rng);
            let l = jit(spec.size_mean[1], &mut rng);
            let h = jit(spec.size_mean[2], &mut rng);
            // keep the whole footprint inside the range
            let margin = (w * w + l * l).sqrt() / 2.0;
            if spec.range.x.1 - spec.range.x.0 <= 2.0 * margin
                || spec.range.y.1 - spec.range.y.0 <= 2.0 * margin
            {
                break;
            }
            let x = rng.gen_range(spec.range.x.0 + margin..spec.range.x.1 - margin);
            let y = rng.gen_range(spec.range.y.0 + margin..spec.range.y.1 - margin);
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let cand = Box3D::new(x, y, spec.ground_z + h / 2.0, w, l, h, yaw);
            if boxes.iter().all(|b| rotated_bev_iou(b, &cand) == 0.0) {
                boxes.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement {
                requested: spec.n_cars,
                placed: boxes.len(),
                retries: RETRIES,
            });
        }
    }

    let mut points = Vec::new();
    for b in &boxes {
        sample_box_surface(b, spec.surface_density, &mut rng, &mut points);
    }
    for _ in 0..spec.n_clutter {
        let x = rng.gen_range(spec.range.x.0..spec.range.x.1);
        let y = rng.gen_range(spec.range.y.0..spec.range.y.1);
        let z = rng.gen_range(spec.ground_z..spec.ground_z + 0.15);
        let r = rng.gen_range(0.2..0.8);
        points.push([x as f32, y as f32, z as f32, r as f32]);
    }

    let n = boxes.len();
    Ok(LabeledFrame {
        cloud: PointCloud { points },
        boxes,
        classes: vec![CLASS_CAR; n],
        difficulties: vec![Difficulty::Easy; n],
    })
}

/// Deterministic core of global_augment with explicit parameters; the
/// test hooks exercise this directly.
pub fn apply_global(frame: &LabeledFrame, flip: bool, angle: f64, scale: f64) -> LabeledFrame {
    let mut out = frame.clone();
    let (c, s) = (angle.cos(), angle.sin());
    for p in &mut out.cloud.points {
        let mut x = p[0] as f64;
        let mut y = p[1] as f64;
        let mut z = p[2] as f64;
        if flip {
            y = -y;
        }
        let (rx, ry) = (x * c - y * s, x * s + y * c);
        x = rx * scale;
        y = ry * scale;
        z *= scale;
        *p = [x as f32, y as f32, z as f32, p[3]];
    }
    for b in &mut out.boxes {
        let mut y = b.y;
        let mut yaw = b.yaw;
        if flip {
            y = -y;
            yaw = -yaw;
        }
        let (rx, ry) = (b.x * c - y * s, b.x * s + y * c);
        b.x = rx * scale;
        b.y = ry * scale;
        b.z *= scale;
        b.w *= scale;
        b.l *= scale;
        b.h *= scale;
        b.yaw = normalize_angle(yaw + angle);
    }
    out
}

/// Random global augmentation: flip with p = 0.5, then rotate about z by
/// U[-pi/4, pi/4], then scale by U[0.95, 1.05].
pub fn global_augment<R: Rng>(frame: &LabeledFrame, rng: &mut R) -> LabeledFrame {
    let flip = rng.gen_bool(0.5);
    let angle = rng.gen_range(-std::f64::consts::FRAC_PI_4..std::f64::consts::FRAC_PI_4);
    let scale = rng.gen_range(0.95..1.05);
    apply_global(frame, flip, angle, scale)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtEntry {
    pub boxx: Box3D,
    pub class: i32,
    /// Interior points in the box-local frame (x along heading after the
    /// yaw is removed), reflectance preserved.
    pub points: Vec<[f32; 4]>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtDatabase {
    pub entries: Vec<GtEntry>,
}

/// Harvest every non-ignored box and its interior points (in box-local
/// coordinates) from a set of labeled frames.
pub fn build_gt_database(frames: &[LabeledFrame]) -> GtDatabase {
    let mut entries = Vec::new();
    for f in frames {
        for (i, b) in f.boxes.iter().enumerate() {
            if f.difficulties.get(i) == Some(&Difficulty::Ignored) {
                continue;
            }
            let mut pts = Vec::new();
            for p in &f.cloud.points {
                let wp = [p[0] as f64, p[1] as f64, p[2] as f64];
                if b.contains(wp) {
                    let lp = b.world_to_local(wp);
                    pts.push([lp[0] as f32, lp[1] as f32, lp[2] as f32, p[3]]);
                }
            }
            entries.push(GtEntry { boxx: *b, class: f.classes[i], points: pts });
        }
    }
    GtDatabase { entries }
}

/// Paste up to max_new database entries into the frame at their stored
/// locations. An entry is rejected on any BEV contact (rotated IoU > 0)
/// with existing or already-pasted boxes; frame points whose BEV position
/// falls inside an accepted footprint are removed first.
pub fn gt_sample_augment<R: Rng>(
    frame: &LabeledFrame,
    db: &GtDatabase,
    max_new: usize,
    rng: &mut R,
) -> LabeledFrame {
    let mut out = frame.clone();
    if db.entries.is_empty() || max_new == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..db.entries.len()).collect();
    order.shuffle(rng);
    let mut accepted = 0usize;
    for idx in order {
        if accepted >= max_new {
            break;
        }
        let e = &db.entries[idx];
        if out.boxes.iter().any(|b| rotated_bev_iou(b, &e.boxx) > 0.0) {
            continue;
        }
        out.cloud
            .points
            .retain(|p| !e.boxx.contains_bev(p[0] as f64, p[1] as f64));
        for lp in &e.points {
            let wp = e.boxx.local_to_world([lp[0] as f64, lp[1] as f64, lp[2] as f64]);
            out.cloud.points.push([wp[0] as f32, wp[1] as f32, wp[2] as f32, lp[3]]);
        }
        out.boxes.push(e.boxx);
        out.classes.push(e.class);
        out.difficulties.push(Difficulty::Easy);
        accepted += 1;
    }
    out
}

/// Binary GT-database format, little-endian: entry count (u64), then per
/// entry the box as 7 f64 (x y z w l h yaw), class (i32), point count
/// (i32), points as 4 f32 each.
pub fn write_gt_database(path: &Path, db: &GtDatabase) -> Result<(), SynthError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_u64::<LittleEndian>(db.entries.len() as u64)?;
    for e in &db.entries {
        for v in [e.boxx.x, e.boxx.y, e.boxx.z, e.boxx.w, e.boxx.l, e.boxx.h, e.boxx.yaw] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_i32::<LittleEndian>(e.class)?;
        w.write_i32::<LittleEndian>(e.points.len() as i32)?;
        for p in &e.points {
            for &v in p {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
    }
    Ok(())
}

pub fn read_gt_database(path: &Path) -> Result<GtDatabase, SynthError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let count = r.read_u64::<LittleEndian>()?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut b = [0f64; 7];
        for v in &mut b {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let class = r.read_i32::<LittleEndian>()?;
        let n = r.read_i32::<LittleEndian>()? as usize;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let mut p = [0f32; 4];
            for v in &mut p {
                *v = r.read_f32::<LittleEndian>()?;
            }
            points.push(p);
        }
        entries.push(GtEntry {
            boxx: Box3D::new(b[0], b[1], b[2], b[3], b[4], b[5], b[6]),
            class,
            points,
        });
    }
    Ok(GtDatabase { entries })
}

/// Index of points inside each ground-truth box, by brute force.
pub fn membership(frame: &LabeledFrame) -> Vec<Vec<usize>> {
    frame
        .boxes
        .iter()
        .map(|b| {
            frame
                .cloud
                .points
                .iter()
                .enumerate()
                .filter(|(_, p)| b.contains([p[0] as f64, p[1] as f64, p[2] as f64]))
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

//! Multi-scale pillar voxelization: points are binned in the x-y plane
//! only (pillars span the full z extent), capped per pillar by random
//! sampling, and encoded as 7-channel features with mean offsets.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Range3;
use crate::kitti::PointCloud;
use crate::Real;

pub const POINT_FEATURES: usize = 7;

#[derive(Debug, Error)]
pub enum VoxelError {
    #[error("scale lists have unequal lengths: scales {scales}, max_points {max_points}, max_voxels {max_voxels}")]
    ListLengths { scales: usize, max_points: usize, max_voxels: usize },
    #[error("range extent {extent} is not an integer multiple of voxel size {size} (scale x{scale}); adjust range or base size")]
    NonIntegralGrid { extent: f64, size: f64, scale: usize },
    #[error("range bounds are not ordered")]
    UnorderedRange,
}

/// Pillar grid configuration shared by all scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelConfig {
    /// Base voxel size S in meters.
    pub base_size: f64,
    /// Scale multipliers, finest first (default [1, 2, 4]).
    pub scales: Vec<usize>,
    /// Per-scale cap on points per pillar.
    pub max_points: Vec<usize>,
    /// Per-scale cap on pillar count.
    pub max_voxels: Vec<usize>,
    pub range: Range3,
    /// Evict randomly instead of keeping first-seen pillars when over the
    /// voxel cap.
    pub random_voxel_drop: bool,
}

impl VoxelConfig {
    pub fn paper() -> Self {
        VoxelConfig {
            base_size: 0.16,
            scales: vec![1, 2, 4],
            max_points: vec![100, 200, 300],
            max_voxels: vec![12000, 8000, 6000],
            range: Range3::paper(),
            random_voxel_drop: false,
        }
    }

    pub fn desk() -> Self {
        VoxelConfig { base_size: 0.32, range: Range3::desk(), ..VoxelConfig::paper() }
    }

    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn validate(&self) -> Result<(), VoxelError> {
        if !self.range.ordered() {
            return Err(VoxelError::UnorderedRange);
        }
        if self.scales.len() != self.max_points.len() || self.scales.len() != self.max_voxels.len() {
            return Err(VoxelError::ListLengths {
                scales: self.scales.len(),
                max_points: self.max_points.len(),
                max_voxels: self.max_voxels.len(),
            });
        }
        let (ex, ey, _) = self.range.extent();
        for &scale in &self.scales {
            let size = self.base_size * scale as f64;
            for extent in [ex, ey] {
                let cells = extent / size;
                if (cells - cells.round()).abs() > 1e-6 || cells.round() < 1.0 {
                    return Err(VoxelError::NonIntegralGrid { extent, size, scale });
                }
            }
        }
        Ok(())
    }

    /// (nx, ny) cell counts at the given scale index.
    pub fn grid_dims(&self, scale_idx: usize) -> (usize, usize) {
        let size = self.base_size * self.scales[scale_idx] as f64;
        let (ex, ey, _) = self.range.extent();
        ((ex / size).round() as usize, (ey / size).round() as usize)
    }
}

/// Per-scale voxelization output. `features` is K x N_max x 7 row-major;
/// entries beyond `counts[k]` are zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelSet {
    pub features: Vec<Real>,
    pub coords: Vec<(usize, usize)>,
    pub counts: Vec<usize>,
    pub n_max: usize,
    pub grid_dims: (usize, usize),
}

impl VoxelSet {
    pub fn n_voxels(&self) -> usize {
        self.coords.len()
    }

    pub fn feature(&self, k: usize, n: usize, c: usize) -> Real {
        self.features[(k * self.n_max + n) * POINT_FEATURES + c]
    }
}

/// Group a cropped cloud into pillars at the given scale.
///
/// Pillar index is floor((x - x0)/s), floor((y - y0)/s); per-pillar points
/// over the cap are uniformly sampled without replacement; pillars over
/// the voxel cap are dropped keeping first-seen order (or randomly, per
/// config). Per-point feature: (x, y, z, r, x - mean_x, y - mean_y,
/// z - mean_z) with the mean taken over the pillar's kept points.
pub fn voxelize<R: Rng>(cloud: &PointCloud, cfg: &VoxelConfig, scale_idx: usize, rng: &mut R) -> VoxelSet {
    let size = cfg.base_size * cfg.scales[scale_idx] as f64;
    let (nx, ny) = cfg.grid_dims(scale_idx);
    let n_max = cfg.max_points[scale_idx];
    let max_voxels = cfg.max_voxels[scale_idx];

    // first-seen pillar order, all member point indices
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut coords: Vec<(usize, usize)> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (pi, p) in cloud.points.iter().enumerate() {
        let ix = ((p[0] as f64 - cfg.range.x.0) / size).floor();
        let iy = ((p[1] as f64 - cfg.range.y.0) / size).floor();
        if ix < 0.0 || iy < 0.0 {
            continue;
        }
        let (ix, iy) = (ix as usize, iy as usize);
        if ix >= nx || iy >= ny {
            continue;
        }
        let k = *index.entry((ix, iy)).or_insert_with(|| {
            coords.push((ix, iy));
            members.push(Vec::new());
            coords.len() - 1
        });
        members[k].push(pi);
    }

    let keep: Vec<usize> = if coords.len() > max_voxels {
        if cfg.random_voxel_drop {
            let mut sel = sample(rng, coords.len(), max_voxels).into_vec();
            sel.sort_unstable();
            sel
        } else {
            (0..max_voxels).collect()
        }
    } else {
        (0..coords.len()).collect()
    };

    let kn = keep.len();
    // padded width: the cap, or the largest actual occupancy if smaller
    let n_max = keep
        .iter()
        .map(|&k| members[k].len().min(n_max))
        .max()
        .unwrap_or(0)
        .max(1)
        .min(n_max.max(1));
    let mut out = VoxelSet {
        features: vec![0.0; kn * n_max * POINT_FEATURES],
        coords: Vec::with_capacity(kn),
        counts: Vec::with_capacity(kn),
        n_max,
        grid_dims: (nx, ny),
    };
    for (slot, &k) in keep.iter().enumerate() {
        out.coords.push(coords[k]);
        let mut pts: Vec<usize> = members[k].clone();
        if pts.len() > n_max {
            let sel = sample(rng, pts.len(), n_max);
            pts = sel.iter().map(|i| pts[i]).collect();
        }
        let count = pts.len();
        out.counts.push(count);
        let mut mean = [0.0f64; 3];
        for &pi in &pts {
            for d in 0..3 {
                mean[d] += cloud.points[pi][d] as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
        for (ni, &pi) in pts.iter().enumerate() {
            let p = cloud.points[pi];
            let base = (slot * n_max + ni) * POINT_FEATURES;
            out.features[base] = p[0] as Real;
            out.features[base + 1] = p[1] as Real;
            out.features[base + 2] = p[2] as Real;
            out.features[base + 3] = p[3] as Real;
            out.features[base + 4] = (p[0] as f64 - mean[0]) as Real;
            out.features[base + 5] = (p[1] as f64 - mean[1]) as Real;
            out.features[base + 6] = (p[2] as f64 - mean[2]) as Real;
        }
    }
    out
}

/// Debug dump: voxel count (u64), then per voxel coords (u32 x2),
/// count (i32), and the kept points as f32 x4 (x, y, z, r).
pub fn dump_voxelset(path: &Path, vs: &VoxelSet) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_u64::<LittleEndian>(vs.n_voxels() as u64)?;
    for k in 0..vs.n_voxels() {
        w.write_u32::<LittleEndian>(vs.coords[k].0 as u32)?;
        w.write_u32::<LittleEndian>(vs.coords[k].1 as u32)?;
        w.write_i32::<LittleEndian>(vs.counts[k] as i32)?;
        for n in 0..vs.counts[k] {
            for c in 0..4 {
                w.write_f32::<LittleEndian>(vs.feature(k, n, c) as f32)?;
            }
        }
    }
    w.flush()
}

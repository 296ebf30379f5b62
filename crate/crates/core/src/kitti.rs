//! KITTI-format I/O: velodyne `.bin` scans, `label_2` object labels,
//! calibration files, range cropping and camera/LIDAR box conversion.

#[allow(unused_imports)]
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{normalize_angle, Box3D, Range3};

#[derive(Debug, Error)]
pub enum KittiError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated velodyne file {path}: {size} bytes is not a multiple of 16")]
    Truncated { path: String, size: u64 },
    #[error("malformed label line {line} in {path}: {reason}")]
    MalformedLabel { path: String, line: usize, reason: String },
    #[error("calibration key {0} missing")]
    MissingCalibKey(String),
    #[error("calibration matrix for {0} is malformed")]
    MalformedCalib(String),
    #[error("calibration transform is singular")]
    SingularTransform,
    #[error("split file {path} references id {id} not present in the dataset")]
    UnknownSplitId { path: String, id: String },
}

fn io_err(path: &Path, source: std::io::Error) -> KittiError {
    KittiError::Io { path: path.display().to_string(), source }
}

/// A LIDAR scan: one record per return, (x, y, z, reflectance).
///
/// Stored as f32 to match the on-disk format bit-exactly; reflectance is
/// clamped to [0, 1] at parse time.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f32; 4]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
    Ignored,
}

/// A scan plus its ground-truth annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub cloud: PointCloud,
    pub boxes: Vec<Box3D>,
    pub classes: Vec<i32>,
    pub difficulties: Vec<Difficulty>,
}

impl LabeledFrame {
    pub fn new(cloud: PointCloud) -> Self {
        LabeledFrame { cloud, boxes: Vec::new(), classes: Vec::new(), difficulties: Vec::new() }
    }
}

pub const CLASS_CAR: i32 = 0;
pub const CLASS_PEDESTRIAN: i32 = 1;
pub const CLASS_CYCLIST: i32 = 2;

pub fn class_id(name: &str) -> Option<i32> {
    match name {
        "Car" => Some(CLASS_CAR),
        "Pedestrian" => Some(CLASS_PEDESTRIAN),
        "Cyclist" => Some(CLASS_CYCLIST),
        _ => None,
    }
}

pub fn class_name(id: i32) -> &'static str {
    match id {
        CLASS_CAR => "Car",
        CLASS_PEDESTRIAN => "Pedestrian",
        CLASS_CYCLIST => "Cyclist",
        _ => "DontCare",
    }
}

/// Camera projection and the velodyne-to-camera chain from a calib file.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub p2: Matrix3x4<f64>,
    pub r0: Matrix3<f64>,
    pub tr_velo_to_cam: Matrix3x4<f64>,
}

impl Calibration {
    pub fn identity() -> Self {
        let mut tr = Matrix3x4::zeros();
        tr.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
        Calibration { p2: tr, r0: Matrix3::identity(), tr_velo_to_cam: tr }
    }

    fn rotation(&self) -> Matrix3<f64> {
        self.tr_velo_to_cam.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn is_valid(&self) -> bool {
        let r = self.rotation();
        let finite = self.p2.iter().chain(self.r0.iter()).chain(self.tr_velo_to_cam.iter()).all(|v| v.is_finite());
        finite && (r * r.transpose() - Matrix3::identity()).abs().max() < 1e-3
    }

    /// velodyne point -> rectified camera frame.
    pub fn velo_to_cam(&self, p: Vector3<f64>) -> Vector3<f64> {
        self.r0 * (self.rotation() * p + self.tr_velo_to_cam.column(3))
    }

    /// rectified camera frame -> velodyne.
    pub fn cam_to_velo(&self, p: Vector3<f64>) -> Result<Vector3<f64>, KittiError> {
        let m = self.r0 * self.rotation();
        let t = self.r0 * self.tr_velo_to_cam.column(3);
        let inv = m.try_inverse().ok_or(KittiError::SingularTransform)?;
        Ok(inv * (p - t))
    }
}

/// One parsed label line, camera-frame box kept verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEntry {
    pub class: String,
    pub truncation: f64,
    pub occlusion: f64,
    pub alpha: f64,
    pub bbox: [f64; 4],
    /// (h, w, l) in KITTI label order.
    pub size_hwl: [f64; 3],
    /// Camera-frame location of the box bottom center.
    pub location: [f64; 3],
    pub rotation_y: f64,
    pub score: Option<f64>,
}

impl LabelEntry {
    pub fn is_ignored(&self) -> bool {
        self.class == "DontCare" || class_id(&self.class).is_none()
    }

    /// KITTI difficulty from bbox height, occlusion and truncation.
    pub fn difficulty(&self) -> Difficulty {
        if self.is_ignored() {
            return Difficulty::Ignored;
        }
        let height = self.bbox[3] - self.bbox[1];
        if height >= 40.0 && self.occlusion <= 0.0 && self.truncation <= 0.15 {
            Difficulty::Easy
        } else if height >= 25.0 && self.occlusion <= 1.0 && self.truncation <= 0.3 {
            Difficulty::Moderate
        } else if height >= 25.0 && self.occlusion <= 2.0 && self.truncation <= 0.5 {
            Difficulty::Hard
        } else {
            Difficulty::Ignored
        }
    }
}

/// Parse a velodyne scan: packed little-endian f32 x4 per point.
///
/// Returns the cloud plus the number of records dropped for containing
/// non-finite values. Reflectance is clamped to [0, 1].
pub fn read_velodyne(path: &Path) -> Result<(PointCloud, usize), KittiError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    parse_velodyne(&bytes).map_err(|size| KittiError::Truncated { path: path.display().to_string(), size })
}

/// Parse velodyne bytes; `Err(size)` if the length is not a multiple of 16.
pub fn parse_velodyne(bytes: &[u8]) -> Result<(PointCloud, usize), u64> {
    if bytes.len() % 16 != 0 {
        return Err(bytes.len() as u64);
    }
    let mut cursor = std::io::Cursor::new(bytes);
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut dropped = 0usize;
    for _ in 0..bytes.len() / 16 {
        let mut rec = [0f32; 4];
        for v in rec.iter_mut() {
            *v = cursor.read_f32::<LittleEndian>().unwrap();
        }
        if rec.iter().all(|v| v.is_finite()) {
            rec[3] = rec[3].clamp(0.0, 1.0);
            points.push(rec);
        } else {
            dropped += 1;
        }
    }
    Ok((PointCloud { points }, dropped))
}

pub fn write_velodyne(path: &Path, cloud: &PointCloud) -> Result<(), KittiError> {
    let mut buf = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in p {
            buf.write_f32::<LittleEndian>(*v).unwrap();
        }
    }
    std::fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Parse a KITTI `label_2` file. 'DontCare' entries are kept but marked
/// ignored by `LabelEntry::is_ignored`.
pub fn read_label(path: &Path) -> Result<Vec<LabelEntry>, KittiError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_label(&text).map_err(|(line, reason)| KittiError::MalformedLabel {
        path: path.display().to_string(),
        line,
        reason,
    })
}

pub fn parse_label(text: &str) -> Result<Vec<LabelEntry>, (usize, String)> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 15 {
            return Err((idx + 1, format!("expected >= 15 fields, got {}", fields.len())));
        }
        let num = |i: usize| -> Result<f64, (usize, String)> {
            fields[i].parse::<f64>().map_err(|_| (idx + 1, format!("field {} is not a number: {:?}", i, fields[i])))
        };
        out.push(LabelEntry {
            class: fields[0].to_string(),
            truncation: num(1)?,
            occlusion: num(2)?,
            alpha: num(3)?,
            bbox: [num(4)?, num(5)?, num(6)?, num(7)?],
            size_hwl: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
            score: if fields.len() > 15 { Some(num(15)?) } else { None },
        });
    }
    Ok(out)
}

pub fn format_label(entries: &[LabelEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            e.class,
            e.truncation,
            e.occlusion,
            e.alpha,
            e.bbox[0],
            e.bbox[1],
            e.bbox[2],
            e.bbox[3],
            e.size_hwl[0],
            e.size_hwl[1],
            e.size_hwl[2],
            e.location[0],
            e.location[1],
            e.location[2],
            e.rotation_y
        ));
        if let Some(score) = e.score {
            s.push_str(&format!(" {}", score));
        }
        s.push('\n');
    }
    s
}

pub fn write_label(path: &Path, entries: &[LabelEntry]) -> Result<(), KittiError> {
    std::fs::write(path, format_label(entries)).map_err(|e| io_err(path, e))
}

/// Parse a calib file with `P2:`, `R0_rect:` and `Tr_velo_to_cam:` rows.
pub fn read_calib(path: &Path) -> Result<Calibration, KittiError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_calib(&text)
}

pub fn parse_calib(text: &str) -> Result<Calibration, KittiError> {
    let mut rows = std::collections::HashMap::new();
    for line in text.lines() {
        if let Some((key, rest)) = line.split_once(':') {
            let vals: Result<Vec<f64>, _> = rest.split_whitespace().map(|t| t.parse::<f64>()).collect();
            if let Ok(vals) = vals {
                rows.insert(key.trim().to_string(), vals);
            }
        }
    }
    let take = |key: &str, n: usize| -> Result<Vec<f64>, KittiError> {
        let v = rows.get(key).ok_or_else(|| KittiError::MissingCalibKey(key.to_string()))?;
        if v.len() != n {
            return Err(KittiError::MalformedCalib(key.to_string()));
        }
        Ok(v.clone())
    };
    let p2 = take("P2", 12)?;
    let r0 = take("R0_rect", 9)?;
    let tr = take("Tr_velo_to_cam", 12)?;
    Ok(Calibration {
        p2: Matrix3x4::from_row_slice(&p2),
        r0: Matrix3::from_row_slice(&r0),
        tr_velo_to_cam: Matrix3x4::from_row_slice(&tr),
    })
}

/// Camera-frame label box -> LIDAR-frame Box3D.
///
/// The label location is the bottom-face center; z is lifted by h/2 to
/// the geometric center. Yaw converts as theta = -ry - pi/2.
pub fn camera_box_to_lidar(entry: &LabelEntry, calib: &Calibration) -> Result<Box3D, KittiError> {
    let [h, w, l] = entry.size_hwl;
    let cam = Vector3::new(entry.location[0], entry.location[1], entry.location[2]);
    let velo = calib.cam_to_velo(cam)?;
    Ok(Box3D::new(
        velo.x,
        velo.y,
        velo.z + h / 2.0,
        w,
        l,
        h,
        normalize_angle(-entry.rotation_y - std::f64::consts::FRAC_PI_2),
    ))
}

/// Inverse of `camera_box_to_lidar`; the returned location is the
/// bottom-face center in the rectified camera frame.
pub fn lidar_box_to_camera(b: &Box3D, calib: &Calibration) -> ([f64; 3], [f64; 3], f64) {
    let bottom = Vector3::new(b.x, b.y, b.z - b.h / 2.0);
    let cam = calib.velo_to_cam(bottom);
    let ry = normalize_angle(-b.yaw - std::f64::consts::FRAC_PI_2);
    ([b.h, b.w, b.l], [cam.x, cam.y, cam.z], ry)
}

/// Retain points inside the half-open range [min, max) on each axis.
/// Bounds are compared in f32, the precision the points are stored at,
/// so that points exactly on a lower bound are retained.
pub fn crop_to_range(cloud: &PointCloud, range: &Range3) -> PointCloud {
    let lo = [range.x.0 as f32, range.y.0 as f32, range.z.0 as f32];
    let hi = [range.x.1 as f32, range.y.1 as f32, range.z.1 as f32];
    PointCloud {
        points: cloud
            .points
            .iter()
            .copied()
            .filter(|p| (0..3).all(|i| p[i] >= lo[i] && p[i] < hi[i]))
            .collect(),
    }
}

/// Read a split file: one 6-digit zero-padded frame id per line.
pub fn read_split_file(path: &Path) -> Result<Vec<String>, KittiError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect())
}

/// Partition frame ids into (train, val) according to the standard split
/// files. Every id named by a split file must exist in `all_ids`.
pub fn split_dataset(
    all_ids: &[String],
    train_path: &Path,
    val_path: &Path,
) -> Result<(Vec<String>, Vec<String>), KittiError> {
    let available: std::collections::HashSet<&String> = all_ids.iter().collect();
    let check = |ids: Vec<String>, path: &Path| -> Result<Vec<String>, KittiError> {
        for id in &ids {
            if !available.contains(id) {
                return Err(KittiError::UnknownSplitId { path: path.display().to_string(), id: id.clone() });
            }
        }
        Ok(ids)
    };
    let train = check(read_split_file(train_path)?, train_path)?;
    let val = check(read_split_file(val_path)?, val_path)?;
    Ok((train, val))
}

//! Anchor grids, anchor-to-ground-truth matching, and the residual
//! encoding between boxes and anchors (with the direction bit resolving
//! the sin-encoding's pi ambiguity).

use serde::{Deserialize, Serialize};

use crate::geom::{normalize_angle, rotated_bev_iou, Box3D, Range3};

/// Anchor shape and matching thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// (w, l, h) of the default box.
    pub size: (f64, f64, f64),
    /// Anchor center height.
    pub z_center: f64,
    /// Yaws per cell; the anchor count per cell A is this list's length.
    pub yaws: Vec<f64>,
    /// Rotated-BEV IoU at or above which an anchor is positive.
    pub pos_iou: f64,
    /// Below this the anchor is negative; in between it is ignored.
    pub neg_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            size: (1.6, 3.9, 1.56),
            z_center: -1.0,
            yaws: vec![0.0, std::f64::consts::FRAC_PI_2],
            pos_iou: 0.60,
            neg_iou: 0.45,
        }
    }
}

/// Anchors for one pyramid level, row-major over (iy, ix, a) to match the
/// head output layout.
#[derive(Debug, Clone)]
pub struct AnchorGrid {
    pub anchors: Vec<Box3D>,
    /// Meters per feature-map cell at this level.
    pub stride: f64,
    pub ny: usize,
    pub nx: usize,
    pub per_cell: usize,
}

/// Build the level's anchor grid; centers sit at cell centers:
/// x = x0 + (ix + 0.5) * stride.
pub fn anchor_grid(range: &Range3, stride: f64, ny: usize, nx: usize, cfg: &AnchorConfig) -> AnchorGrid {
    let (w, l, h) = cfg.size;
    let mut anchors = Vec::with_capacity(ny * nx * cfg.yaws.len());
    for iy in 0..ny {
        for ix in 0..nx {
            let x = range.x.0 + (ix as f64 + 0.5) * stride;
            let y = range.y.0 + (iy as f64 + 0.5) * stride;
            for &yaw in &cfg.yaws {
                anchors.push(Box3D::new(x, y, cfg.z_center, w, l, h, yaw));
            }
        }
    }
    AnchorGrid { anchors, stride, ny, nx, per_cell: cfg.yaws.len() }
}

/// Dimensionless regression residuals plus the direction bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionTarget {
    /// (x_t, y_t, z_t, w_t, l_t, h_t, theta_t)
    pub residuals: [f64; 7],
    /// 1 when the box points opposite the anchor (cos of the yaw delta
    /// is negative).
    pub dir_target: u8,
}

/// Encode a ground-truth box against an anchor:
/// x_t = (x_g - x_a)/d_a, y_t likewise, z_t = (z_g - z_a)/h_a,
/// size residuals are log ratios, theta_t = sin(theta_g - theta_a),
/// with d_a = sqrt(l_a^2 + w_a^2).
pub fn encode(gt: &Box3D, anchor: &Box3D) -> RegressionTarget {
    assert!(anchor.w > 0.0 && anchor.l > 0.0 && anchor.h > 0.0, "anchor sizes must be positive");
    assert!(gt.w > 0.0 && gt.l > 0.0 && gt.h > 0.0, "ground-truth sizes must be positive");
    let d_a = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    let dtheta = gt.yaw - anchor.yaw;
    RegressionTarget {
        residuals: [
            (gt.x - anchor.x) / d_a,
            (gt.y - anchor.y) / d_a,
            (gt.z - anchor.z) / anchor.h,
            (gt.w / anchor.w).ln(),
            (gt.l / anchor.l).ln(),
            (gt.h / anchor.h).ln(),
            dtheta.sin(),
        ],
        dir_target: if dtheta.cos() < 0.0 { 1 } else { 0 },
    }
}

/// Invert the residual encoding. theta_t is clamped to [-1, 1] so
/// unconstrained regression outputs always decode; the direction bit adds
/// pi, and the yaw is renormalized to [-pi, pi).
pub fn decode(residuals: &[f64; 7], dir_bit: bool, anchor: &Box3D) -> Box3D {
    let d_a = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    let asin = residuals[6].clamp(-1.0, 1.0).asin();
    // the dir bit marks cos(dyaw) < 0, where the inverse branch is
    // pi - asin rather than asin + pi
    let yaw = if dir_bit { anchor.yaw + std::f64::consts::PI - asin } else { anchor.yaw + asin };
    Box3D::new(
        anchor.x + residuals[0] * d_a,
        anchor.y + residuals[1] * d_a,
        anchor.z + residuals[2] * anchor.h,
        anchor.w * residuals[3].exp(),
        anchor.l * residuals[4].exp(),
        anchor.h * residuals[5].exp(),
        normalize_angle(yaw),
    )
}

/// Per-anchor match outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    /// Regress toward the given ground-truth index.
    Positive(usize),
    Negative,
    Ignored,
}

/// Rotated-BEV IoU matching: positive at IoU >= pos_iou toward the
/// argmax-IoU ground truth, negative below neg_iou, otherwise ignored.
/// Each ground truth's best-IoU anchor is additionally forced positive
/// (when the IoU is nonzero), so no overlapped box goes unmatched.
pub fn match_anchors(anchors: &[Box3D], gts: &[Box3D], pos_iou: f64, neg_iou: f64) -> Vec<MatchLabel> {
    let mut labels = vec![MatchLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    let mut best_anchor: Vec<(usize, f64)> = vec![(0, 0.0); gts.len()];
    for (ai, anchor) in anchors.iter().enumerate() {
        let mut best_gt = 0usize;
        let mut best = 0.0f64;
        for (gi, gt) in gts.iter().enumerate() {
            let iou = rotated_bev_iou(anchor, gt);
            if iou > best {
                best = iou;
                best_gt = gi;
            }
            if iou > best_anchor[gi].1 {
                best_anchor[gi] = (ai, iou);
            }
        }
        labels[ai] = if best >= pos_iou {
            MatchLabel::Positive(best_gt)
        } else if best < neg_iou {
            MatchLabel::Negative
        } else {
            MatchLabel::Ignored
        };
    }
    for (gi, &(ai, iou)) in best_anchor.iter().enumerate() {
        if iou > 0.0 {
            labels[ai] = MatchLabel::Positive(gi);
        }
    }
    labels
}

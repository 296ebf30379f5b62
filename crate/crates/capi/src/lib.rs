//! C ABI for the detector: opaque handle, status codes, flat structs.
//! Every function catches panics at the boundary and reports them as
//! `PFPN_STATUS_INTERNAL`; details are retrievable per handle via
//! `pfpn_last_error`.

use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pillarfpn::config::ExperimentConfig;
use pillarfpn::eval::predict;
use pillarfpn::kitti::PointCloud;
use pillarfpn::net::Network;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfpnStatus {
    Ok = 0,
    InvalidArgument = 1,
    IoError = 2,
    Internal = 3,
}

/// One detection in the LIDAR frame. Sizes are full extents in meters,
/// yaw in radians about +z.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct PfpnDetection {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub yaw: f64,
    pub score: f64,
    pub class_id: i32,
}

/// Opaque detector handle.
pub struct PfpnDetector {
    cfg: ExperimentConfig,
    net: Network,
    rng: ChaCha8Rng,
    last_error: Option<CString>,
}

fn set_error(d: &mut PfpnDetector, msg: String) {
    d.last_error = CString::new(msg.replace('\0', " ")).ok();
}

/// Create a detector. `config_json` may be null (desk preset defaults) or
/// point to a NUL-terminated experiment-config JSON document. On success
/// writes the handle to `out` and returns Ok.
///
/// # Safety
/// `out` must be a valid pointer; `config_json`, when non-null, must be a
/// valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pfpn_detector_new(
    config_json: *const c_char,
    out: *mut *mut PfpnDetector,
) -> PfpnStatus {
    if out.is_null() {
        return PfpnStatus::InvalidArgument;
    }
    *out = ptr::null_mut();
    let cfg = if config_json.is_null() {
        Ok(ExperimentConfig::desk())
    } else {
        match CStr::from_ptr(config_json).to_str() {
            Ok(text) => serde_json::from_str::<ExperimentConfig>(text)
                .map_err(|e| format!("config parse: {e}"))
                .and_then(|c| c.validate().map(|_| c).map_err(|e| format!("{e}"))),
            Err(_) => Err("config is not valid UTF-8".into()),
        }
    };
    let cfg = match cfg {
        Ok(c) => c,
        Err(_) => return PfpnStatus::InvalidArgument,
    };
    let built = catch_unwind(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let net = Network::new(cfg.network.clone(), cfg.voxel.clone(), &mut rng);
        PfpnDetector { cfg, net, rng, last_error: None }
    });
    match built {
        Ok(d) => {
            *out = Box::into_raw(Box::new(d));
            PfpnStatus::Ok
        }
        Err(_) => PfpnStatus::Internal,
    }
}

/// Load checkpoint weights into the detector.
///
/// # Safety
/// `detector` must come from `pfpn_detector_new`; `path` must be a valid
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pfpn_detector_load_checkpoint(
    detector: *mut PfpnDetector,
    path: *const c_char,
) -> PfpnStatus {
    let Some(d) = detector.as_mut() else { return PfpnStatus::InvalidArgument };
    if path.is_null() {
        set_error(d, "null checkpoint path".into());
        return PfpnStatus::InvalidArgument;
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        set_error(d, "path is not valid UTF-8".into());
        return PfpnStatus::InvalidArgument;
    };
    let result = catch_unwind(AssertUnwindSafe(|| d.net.params.load(Path::new(path))));
    match result {
        Ok(Ok(())) => PfpnStatus::Ok,
        Ok(Err(e)) => {
            set_error(d, format!("checkpoint load: {e}"));
            PfpnStatus::IoError
        }
        Err(_) => {
            set_error(d, "checkpoint shape mismatch".into());
            PfpnStatus::Internal
        }
    }
}

/// Run inference over a packed (x, y, z, reflectance) f32 point array.
/// At most `capacity` detections are written to `detections`; the total
/// produced is stored in `n_out` (callers can re-invoke with a larger
/// buffer if `*n_out > capacity`).
///
/// # Safety
/// `points` must hold `4 * n_points` f32 values; `detections` must hold
/// `capacity` entries; `n_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pfpn_detector_infer(
    detector: *mut PfpnDetector,
    points: *const f32,
    n_points: usize,
    detections: *mut PfpnDetection,
    capacity: usize,
    n_out: *mut usize,
) -> PfpnStatus {
    let Some(d) = detector.as_mut() else { return PfpnStatus::InvalidArgument };
    if n_out.is_null() || (points.is_null() && n_points > 0) || (detections.is_null() && capacity > 0) {
        set_error(d, "null buffer argument".into());
        return PfpnStatus::InvalidArgument;
    }
    *n_out = 0;
    let raw = std::slice::from_raw_parts(points, 4 * n_points);
    let cloud = PointCloud {
        points: raw.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
    };
    let result = catch_unwind(AssertUnwindSafe(|| {
        predict(&mut d.net, &cloud, &d.cfg.anchor, &d.cfg.postproc, &mut d.rng)
    }));
    match result {
        Ok(dets) => {
            *n_out = dets.len();
            for (i, det) in dets.iter().take(capacity).enumerate() {
                let b = det.boxx;
                *detections.add(i) = PfpnDetection {
                    x: b.x,
                    y: b.y,
                    z: b.z,
                    w: b.w,
                    l: b.l,
                    h: b.h,
                    yaw: b.yaw,
                    score: det.score,
                    class_id: det.class,
                };
            }
            PfpnStatus::Ok
        }
        Err(_) => {
            set_error(d, "inference panicked".into());
            PfpnStatus::Internal
        }
    }
}

/// Last error message recorded on this handle, or null. The pointer is
/// valid until the next failing call on the same handle.
///
/// # Safety
/// `detector` must come from `pfpn_detector_new`.
#[no_mangle]
pub unsafe extern "C" fn pfpn_last_error(detector: *const PfpnDetector) -> *const c_char {
    match detector.as_ref().and_then(|d| d.last_error.as_ref()) {
        Some(s) => s.as_ptr(),
        None => ptr::null(),
    }
}

/// Destroy a detector handle. Null is a no-op.
///
/// # Safety
/// `detector` must come from `pfpn_detector_new` and not be used after.
#[no_mangle]
pub unsafe extern "C" fn pfpn_detector_free(detector: *mut PfpnDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

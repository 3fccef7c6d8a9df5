//! C ABI over `bev2d`.
//!
//! Every function returns a [`Bev2dStatus`]. On failure a description is
//! kept per thread and can be read with [`bev2d_last_error`]. Objects that
//! own memory (datasets, depth maps) are opaque handles released with their
//! `_free` function. No function unwinds across the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use bev2d::depth::{box_depth_from_map, load_depth_map, DepthError, DepthMap};
use bev2d::finetune::{finetune, ToyDetector, TrainConfig};
use bev2d::geometry::{
    project_box_jacobian, Box2D, Box3D, Camera, GeometryError, Intrinsics, Mat3, RigidTransform, Vec3,
};
use bev2d::losses::{focal_loss, giou, FocalParams};
use bev2d::matching::{hungarian, CostMatrix};
use bev2d::metrics::{nds, MetricConfig, TPErrors};
use bev2d::scenegen::{read_dataset, Dataset, NoiseConfig, SceneError};

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bev2dStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// The box projects outside the image or behind the camera.
    NotVisible = 3,
    /// No finite depth under the queried box.
    NoDepth = 4,
    Io = 5,
    Format = 6,
    ChecksumMismatch = 7,
    UnsupportedVersion = 8,
    /// A buffer supplied by the caller is too small.
    BufferTooSmall = 9,
    Internal = 10,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let mut msg = msg.into();
    msg.retain(|c| c != '\0');
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: Bev2dStatus, msg: impl Into<String>) -> Bev2dStatus {
    set_error(msg);
    status
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> Bev2dStatus) -> Bev2dStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(Bev2dStatus::Internal, format!("internal error: {msg}"))
        }
    }
}

fn geometry_status(e: GeometryError) -> Bev2dStatus {
    let status = match e {
        GeometryError::NotVisible | GeometryError::BehindCamera(_) => Bev2dStatus::NotVisible,
        _ => Bev2dStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn depth_status(e: DepthError) -> Bev2dStatus {
    let status = match e {
        DepthError::NoDepth => Bev2dStatus::NoDepth,
        DepthError::Io { .. } => Bev2dStatus::Io,
        DepthError::Format { .. } | DepthError::InvalidValue { .. } => Bev2dStatus::Format,
        DepthError::DimensionMismatch { .. } => Bev2dStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn scene_status(e: SceneError) -> Bev2dStatus {
    let status = match &e {
        SceneError::Io { .. } => Bev2dStatus::Io,
        SceneError::Format { .. } => Bev2dStatus::Format,
        SceneError::ChecksumMismatch { .. } => Bev2dStatus::ChecksumMismatch,
        SceneError::UnsupportedVersion { .. } => Bev2dStatus::UnsupportedVersion,
        SceneError::Depth(DepthError::Io { .. }) => Bev2dStatus::Io,
        SceneError::Depth(_) => Bev2dStatus::Format,
        _ => Bev2dStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

/// Message of the last failed call on this thread; empty if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bev2d_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Pinhole camera: `ego_to_cam` maps ego-frame points into the camera frame
/// (x right, y down, z forward) as `rotation * p + translation`, with
/// `rotation` row-major.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Bev2dCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

/// Ego-frame box; `dims` is (length, width, height).
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct Bev2dBox3D {
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
}

/// Image box by center and size, plus camera-frame depth.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct Bev2dBox2D {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub depth: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct Bev2dTpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
    pub aae: f64,
}

/// Evaluation before and after a fine-tuning run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct Bev2dFinetuneSummary {
    pub initial_map: f64,
    pub initial_nds: f64,
    pub initial_median_center_error: f64,
    pub final_map: f64,
    pub final_nds: f64,
    pub final_median_center_error: f64,
    pub final_aoe: f64,
    pub steps: u64,
}

fn to_camera(c: &Bev2dCamera) -> Result<Camera, GeometryError> {
    let r = &c.rotation;
    let rotation = Mat3([[r[0], r[1], r[2]], [r[3], r[4], r[5]], [r[6], r[7], r[8]]]);
    let t = Vec3::new(c.translation[0], c.translation[1], c.translation[2]);
    Camera::new(
        "ffi",
        Intrinsics::new(c.fx, c.fy, c.cx, c.cy)?,
        RigidTransform::new(rotation, t),
        c.width,
        c.height,
    )
}

fn to_box3d(b: &Bev2dBox3D) -> Result<Box3D, GeometryError> {
    let out = Box3D::new(Vec3::new(b.center[0], b.center[1], b.center[2]), b.dims, b.yaw);
    out.validate()?;
    Ok(out)
}

fn from_box2d(b: &Box2D) -> Bev2dBox2D {
    Bev2dBox2D {
        x: b.x,
        y: b.y,
        w: b.w,
        h: b.h,
        depth: b.depth,
    }
}

fn to_box2d(b: &Bev2dBox2D) -> Result<Box2D, GeometryError> {
    Box2D::new(b.x, b.y, b.w, b.h, b.depth)
}

/// Projects `bbox` into `camera`. When `jacobian` is not null it receives
/// the 5x7 row-major sensitivity of (x, y, w, h, depth) to (cx, cy, cz, l,
/// w, h, yaw).
#[no_mangle]
pub unsafe extern "C" fn bev2d_project_box(
    camera: *const Bev2dCamera,
    bbox: *const Bev2dBox3D,
    out: *mut Bev2dBox2D,
    jacobian: *mut f64,
) -> Bev2dStatus {
    guard(|| {
        if camera.is_null() || bbox.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null camera, box or output");
        }
        let cam = match to_camera(&*camera) {
            Ok(c) => c,
            Err(e) => return geometry_status(e),
        };
        let b = match to_box3d(&*bbox) {
            Ok(b) => b,
            Err(e) => return geometry_status(e),
        };
        match project_box_jacobian(&cam, &b) {
            Ok((p, j)) => {
                *out = from_box2d(&p);
                if !jacobian.is_null() {
                    let flat: Vec<f64> = j.iter().flatten().copied().collect();
                    ptr::copy_nonoverlapping(flat.as_ptr(), jacobian, flat.len());
                }
                Bev2dStatus::Ok
            }
            Err(e) => geometry_status(e),
        }
    })
}

/// Generalized IoU of two boxes, in [-1, 1].
#[no_mangle]
pub unsafe extern "C" fn bev2d_giou(a: *const Bev2dBox2D, b: *const Bev2dBox2D, out: *mut f64) -> Bev2dStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null box or output");
        }
        match (to_box2d(&*a), to_box2d(&*b)) {
            (Ok(a), Ok(b)) => {
                *out = giou(&a, &b);
                Bev2dStatus::Ok
            }
            (Err(e), _) | (_, Err(e)) => geometry_status(e),
        }
    })
}

/// Focal loss of probability `p` for the true class.
#[no_mangle]
pub unsafe extern "C" fn bev2d_focal_loss(p: f64, alpha: f64, gamma: f64, out: *mut f64) -> Bev2dStatus {
    guard(|| {
        if out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null output");
        }
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&alpha) || !(gamma >= 0.0) {
            return fail(
                Bev2dStatus::InvalidArgument,
                format!("need p, alpha in [0, 1] and gamma >= 0, got {p}, {alpha}, {gamma}"),
            );
        }
        *out = focal_loss(p, &FocalParams { alpha, gamma });
        Bev2dStatus::Ok
    })
}

/// Detection score from mAP and the five mean TP errors.
#[no_mangle]
pub unsafe extern "C" fn bev2d_nds(map: f64, tp: *const Bev2dTpErrors, out: *mut f64) -> Bev2dStatus {
    guard(|| {
        if tp.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null errors or output");
        }
        let t = &*tp;
        let errs = [map, t.ate, t.ase, t.aoe, t.ave, t.aae];
        if errs.iter().any(|v| !v.is_finite() || *v < 0.0) || map > 1.0 {
            return fail(Bev2dStatus::InvalidArgument, "mAP must lie in [0, 1] and errors be finite and >= 0");
        }
        *out = nds(
            map,
            &TPErrors {
                ate: t.ate,
                ase: t.ase,
                aoe: t.aoe,
                ave: t.ave,
                aae: t.aae,
            },
        );
        Bev2dStatus::Ok
    })
}

/// Minimum-cost assignment over a `rows` x `cols` row-major matrix.
/// `pred_to_gt` (length `rows`) receives the matched column or -1.
#[no_mangle]
pub unsafe extern "C" fn bev2d_hungarian(
    costs: *const f64,
    rows: usize,
    cols: usize,
    pred_to_gt: *mut i64,
    total_cost: *mut f64,
) -> Bev2dStatus {
    guard(|| {
        if (costs.is_null() && rows * cols > 0) || (pred_to_gt.is_null() && rows > 0) || total_cost.is_null() {
            return fail(Bev2dStatus::NullPointer, "null costs or outputs");
        }
        let data = if rows * cols == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(costs, rows * cols).to_vec()
        };
        let m = match CostMatrix::new(rows, cols, data) {
            Ok(m) => m,
            Err(e) => return fail(Bev2dStatus::InvalidArgument, e.to_string()),
        };
        let a = hungarian(&m);
        for i in 0..rows {
            *pred_to_gt.add(i) = a.gt_for(i).map_or(-1, |j| j as i64);
        }
        *total_cost = a.total_cost;
        Bev2dStatus::Ok
    })
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, Bev2dStatus> {
    if path.is_null() {
        return Err(fail(Bev2dStatus::NullPointer, "null path"));
    }
    CStr::from_ptr(path)
        .to_str()
        .map(Path::new)
        .map_err(|_| fail(Bev2dStatus::InvalidArgument, "path is not UTF-8"))
}

/// A dataset directory loaded and checksum-verified.
pub struct Bev2dDataset {
    inner: Dataset,
    ids: Vec<CString>,
}

/// Opens the dataset directory at `path`.
#[no_mangle]
pub unsafe extern "C" fn bev2d_dataset_open(path: *const c_char, out: *mut *mut Bev2dDataset) -> Bev2dStatus {
    guard(|| {
        if out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null output");
        }
        *out = ptr::null_mut();
        let dir = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match read_dataset(dir) {
            Ok(ds) => {
                let ids = ds
                    .scenes
                    .iter()
                    .map(|s| CString::new(s.id.clone()).unwrap_or_default())
                    .collect();
                *out = Box::into_raw(Box::new(Bev2dDataset { inner: ds, ids }));
                Bev2dStatus::Ok
            }
            Err(e) => scene_status(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn bev2d_dataset_free(dataset: *mut Bev2dDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

#[no_mangle]
pub unsafe extern "C" fn bev2d_dataset_scene_count(dataset: *const Bev2dDataset, out: *mut usize) -> Bev2dStatus {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null dataset or output");
        }
        *out = (*dataset).inner.scenes.len();
        Bev2dStatus::Ok
    })
}

/// Id of scene `index`, valid while the dataset lives.
#[no_mangle]
pub unsafe extern "C" fn bev2d_dataset_scene_id(
    dataset: *const Bev2dDataset,
    index: usize,
    out: *mut *const c_char,
) -> Bev2dStatus {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null dataset or output");
        }
        let ids = &(*dataset).ids;
        match ids.get(index) {
            Some(id) => {
                *out = id.as_ptr();
                Bev2dStatus::Ok
            }
            None => fail(Bev2dStatus::InvalidArgument, format!("scene index {index} out of range")),
        }
    })
}

/// Fine-tunes a detector initialized with the default noise model on the
/// dataset, with default training settings except the given ones, and
/// reports the evaluation before and after.
#[no_mangle]
pub unsafe extern "C" fn bev2d_finetune(
    dataset: *const Bev2dDataset,
    epochs: u32,
    mix_ratio: f64,
    seed: u64,
    out: *mut Bev2dFinetuneSummary,
) -> Bev2dStatus {
    guard(|| {
        if dataset.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null dataset or output");
        }
        let ds = &(*dataset).inner;
        let cfg = TrainConfig {
            epochs: epochs as usize,
            mix_ratio,
            seed,
            ..TrainConfig::default()
        };
        if let Err(e) = cfg.validate() {
            return fail(Bev2dStatus::InvalidArgument, e.to_string());
        }
        let mut det = match ToyDetector::from_dataset(ds, &NoiseConfig::default(), seed) {
            Ok(d) => d,
            Err(e) => return fail(Bev2dStatus::Internal, e.to_string()),
        };
        match finetune(&mut det, ds, &cfg, &MetricConfig::default()) {
            Ok(h) => {
                let (a, b) = (h.first(), h.last());
                *out = Bev2dFinetuneSummary {
                    initial_map: a.report.map,
                    initial_nds: a.report.nds,
                    initial_median_center_error: a.median_center_error,
                    final_map: b.report.map,
                    final_nds: b.report.nds,
                    final_median_center_error: b.median_center_error,
                    final_aoe: b.report.tp.aoe,
                    steps: det.steps as u64,
                };
                Bev2dStatus::Ok
            }
            Err(e) => fail(Bev2dStatus::Internal, e.to_string()),
        }
    })
}

/// A depth map loaded from a `.dpm` file.
pub struct Bev2dDepthMap {
    inner: DepthMap,
}

#[no_mangle]
pub unsafe extern "C" fn bev2d_depth_map_load(path: *const c_char, out: *mut *mut Bev2dDepthMap) -> Bev2dStatus {
    guard(|| {
        if out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null output");
        }
        *out = ptr::null_mut();
        let p = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_depth_map(p) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(Bev2dDepthMap { inner: m }));
                Bev2dStatus::Ok
            }
            Err(e) => depth_status(e),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn bev2d_depth_map_free(map: *mut Bev2dDepthMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

#[no_mangle]
pub unsafe extern "C" fn bev2d_depth_map_size(
    map: *const Bev2dDepthMap,
    width: *mut u32,
    height: *mut u32,
) -> Bev2dStatus {
    guard(|| {
        if map.is_null() || width.is_null() || height.is_null() {
            return fail(Bev2dStatus::NullPointer, "null map or output");
        }
        *width = (*map).inner.width();
        *height = (*map).inner.height();
        Bev2dStatus::Ok
    })
}

/// Median finite depth under `bbox`.
#[no_mangle]
pub unsafe extern "C" fn bev2d_depth_map_box_depth(
    map: *const Bev2dDepthMap,
    bbox: *const Bev2dBox2D,
    out: *mut f64,
) -> Bev2dStatus {
    guard(|| {
        if map.is_null() || bbox.is_null() || out.is_null() {
            return fail(Bev2dStatus::NullPointer, "null map, box or output");
        }
        let b = match to_box2d(&*bbox) {
            Ok(b) => b,
            Err(e) => return geometry_status(e),
        };
        match box_depth_from_map(&(*map).inner, &b) {
            Ok(d) => {
                *out = d;
                Bev2dStatus::Ok
            }
            Err(e) => depth_status(e),
        }
    })
}

/// Copies `bev2d_last_error()` into `buf` including the terminator.
/// Returns `BufferTooSmall` and writes the required size to `needed` when
/// `cap` is too small.
#[no_mangle]
pub unsafe extern "C" fn bev2d_copy_last_error(buf: *mut c_char, cap: usize, needed: *mut usize) -> Bev2dStatus {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes_with_nul();
        if !needed.is_null() {
            *needed = bytes.len();
        }
        if buf.is_null() {
            return Bev2dStatus::NullPointer;
        }
        if cap < bytes.len() {
            return Bev2dStatus::BufferTooSmall;
        }
        ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, bytes.len());
        Bev2dStatus::Ok
    })
}

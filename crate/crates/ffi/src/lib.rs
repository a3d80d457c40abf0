//! C ABI over the voxel map, the pair evaluator, and report aggregation.
//!
//! Every fallible call returns an [`RpStatus`]; on failure the message is
//! available from [`rp_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Poses are
//! camera-to-world 4×4 matrices, row-major.

#![allow(clippy::too_many_arguments)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use repeatability::detectors::{normalize_frame_confidence, DetectionSet};
use repeatability::evaluator::{
    self, aggregate, cap_detections, evaluate_pair, DistanceHistogram, EvalParams, FrameView,
};
use repeatability::geometry::{CameraIntrinsics, DepthMap, Detection, Mat3, Pose, Ray, Vec3};
use repeatability::voxelmap::VoxelMap;
use repeatability::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    /// Malformed file contents.
    Format = 4,
    /// Nothing to compute (no histograms, empty mesh).
    Empty = 5,
    /// A ray missed every occupied cell.
    Miss = 6,
    /// Internal failure; the library state is unchanged.
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RpIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RpDetection {
    pub x: u32,
    pub y: u32,
    pub confidence: f64,
}

/// Evaluation settings; [`rp_eval_params_default`] fills the published
/// defaults.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct RpEvalParams {
    pub eps_floor_m: f64,
    pub eps_rel: f64,
    pub max_detections: u32,
    pub nms_radius: f64,
    pub max_distance: u32,
}

/// Sparse painted voxel map.
pub struct RpVoxelMap(VoxelMap);

/// Pair evaluator bound to one camera.
pub struct RpEvaluator {
    intrinsics: CameraIntrinsics,
    params: EvalParams,
}

/// Running collection of pair histograms.
pub struct RpAggregator {
    max_distance: usize,
    histograms: Vec<DistanceHistogram>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> RpStatus {
    match e {
        Error::Io { .. } => RpStatus::Io,
        Error::Format { .. } | Error::Parse { .. } => RpStatus::Format,
        Error::Empty(_) | Error::EmptyMesh => RpStatus::Empty,
        _ => RpStatus::InvalidArgument,
    }
}

struct Fail(RpStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(RpStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            RpStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            RpStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref()
        .ok_or_else(|| Fail(RpStatus::NullPointer, format!("{what} is null")))
}

unsafe fn non_null_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(RpStatus::NullPointer, format!("{what} is null")))
}

/// Slice from a pointer and length; a null pointer is allowed for length 0.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail(RpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail(RpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn c_path(p: *const c_char) -> Result<PathBuf, Fail> {
    let s = non_null(p, "path")?;
    let s = CStr::from_ptr(s)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn intrinsics(i: &RpIntrinsics) -> Result<CameraIntrinsics, Fail> {
    Ok(CameraIntrinsics::new(
        i.fx,
        i.fy,
        i.cx,
        i.cy,
        i.width as usize,
        i.height as usize,
    )?)
}

unsafe fn c_pose(m: *const f64) -> Result<Pose, Fail> {
    let m = slice(m, 16, "pose")?;
    if m[12..16] != [0.0, 0.0, 0.0, 1.0] {
        return Err(invalid("pose: last row must be 0 0 0 1"));
    }
    let r = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    Ok(Pose::new(r, Vec3::new(m[3], m[7], m[11]))?)
}

unsafe fn detections(p: *const RpDetection, n: usize) -> Result<Vec<Detection>, Fail> {
    Ok(slice(p, n, "detections")?
        .iter()
        .map(|d| Detection::new(d.x, d.y, d.confidence))
        .collect())
}

unsafe fn depth(p: *const f32, intr: &CameraIntrinsics) -> Result<DepthMap, Fail> {
    let (w, h) = intr.dims();
    Ok(DepthMap::new(w, h, slice(p, w * h, "depth")?.to_vec())?)
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn rp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

// --- voxel map -------------------------------------------------------------

/// Loads an `R3DV` snapshot.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_load(
    path: *const c_char,
    out: *mut *mut RpVoxelMap,
) -> RpStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let map = VoxelMap::load(&c_path(path)?)?;
        *out = Box::into_raw(Box::new(RpVoxelMap(map)));
        Ok(())
    })
}

/// Builds a map with the given occupied cells (`3 * count` integers).
///
/// # Safety
/// `cells` must hold `3 * count` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_from_cells(
    resolution: f64,
    cells: *const i32,
    count: usize,
    out: *mut *mut RpVoxelMap,
) -> RpStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let c = slice(cells, count * 3, "cells")?;
        let map = VoxelMap::from_cells(resolution, c.chunks_exact(3).map(|v| [v[0], v[1], v[2]]))?;
        *out = Box::into_raw(Box::new(RpVoxelMap(map)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_save(
    map: *const RpVoxelMap,
    path: *const c_char,
) -> RpStatus {
    guard(|| {
        let map = non_null(map, "map")?;
        Ok(map.0.save(&c_path(path)?)?)
    })
}

/// # Safety
/// `map` must come from this library and not have been freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_free(map: *mut RpVoxelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Number of occupied cells; 0 for null.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_len(map: *const RpVoxelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.len())
}

/// Sum of painted confidence over all cells.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_total_score(map: *const RpVoxelMap) -> f64 {
    map.as_ref().map_or(0.0, |m| m.0.total_score())
}

/// Paints one frame-detector set. Confidences are replaced by `1/count`
/// before painting. Either output pointer may be null.
///
/// # Safety
/// `pose` must hold 16 values and `dets` `count` entries.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_paint(
    map: *const RpVoxelMap,
    intr: *const RpIntrinsics,
    pose: *const f64,
    dets: *const RpDetection,
    count: usize,
    max_range: f64,
    painted: *mut usize,
    missed: *mut usize,
) -> RpStatus {
    guard(|| {
        let map = non_null(map, "map")?;
        let intr = intrinsics(non_null(intr, "intrinsics")?)?;
        let pose = c_pose(pose)?;
        let set =
            normalize_frame_confidence(&DetectionSet::new(0, "ffi", detections(dets, count)?));
        let stats = map.0.paint_frame(&intr, &pose, &set, max_range);
        if let Some(p) = painted.as_mut() {
            *p = stats.painted;
        }
        if let Some(m) = missed.as_mut() {
            *m = stats.missed;
        }
        Ok(())
    })
}

/// Counts one view for every distinct cell seen by every `stride`-th pixel.
///
/// # Safety
/// `pose` must hold 16 values.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_observe(
    map: *const RpVoxelMap,
    intr: *const RpIntrinsics,
    pose: *const f64,
    max_range: f64,
    stride: u32,
) -> RpStatus {
    guard(|| {
        let map = non_null(map, "map")?;
        let intr = intrinsics(non_null(intr, "intrinsics")?)?;
        map.0
            .visibility_pass(&intr, &c_pose(pose)?, max_range, stride as usize);
        Ok(())
    })
}

/// Score and view count of the first occupied cell along a ray; `Miss`
/// when nothing is hit.
///
/// # Safety
/// `origin` and `direction` must hold 3 values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_voxel_map_query(
    map: *const RpVoxelMap,
    origin: *const f64,
    direction: *const f64,
    max_range: f64,
    score: *mut f64,
    views: *mut u32,
) -> RpStatus {
    guard(|| {
        let map = non_null(map, "map")?;
        let (o, d) = (
            slice(origin, 3, "origin")?,
            slice(direction, 3, "direction")?,
        );
        let dir = Vec3::new(d[0], d[1], d[2]);
        if !dir.iter().all(|v| v.is_finite()) || dir.norm() == 0.0 {
            return Err(invalid("direction must be finite and nonzero"));
        }
        let (score, views) = (non_null_mut(score, "score")?, non_null_mut(views, "views")?);
        match map
            .0
            .query(&Ray::new(Vec3::new(o[0], o[1], o[2]), dir), max_range)
        {
            Some((s, v)) => {
                *score = s;
                *views = v;
                Ok(())
            }
            None => Err(Fail(RpStatus::Miss, "ray hits no occupied cell".into())),
        }
    })
}

// --- evaluation ------------------------------------------------------------

#[no_mangle]
pub extern "C" fn rp_eval_params_default() -> RpEvalParams {
    let p = EvalParams::default();
    RpEvalParams {
        eps_floor_m: p.eps_floor_m,
        eps_rel: p.eps_rel,
        max_detections: p.max_detections as u32,
        nms_radius: p.nms_radius,
        max_distance: p.max_distance as u32,
    }
}

/// # Safety
/// `intr` and `params` must be readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_evaluator_new(
    intr: *const RpIntrinsics,
    params: *const RpEvalParams,
    out: *mut *mut RpEvaluator,
) -> RpStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        let intrinsics = intrinsics(non_null(intr, "intrinsics")?)?;
        let p = non_null(params, "params")?;
        let params = EvalParams {
            eps_floor_m: p.eps_floor_m,
            eps_rel: p.eps_rel,
            max_detections: p.max_detections as usize,
            nms_radius: p.nms_radius,
            max_distance: p.max_distance as usize,
            ..EvalParams::default()
        };
        params.validate()?;
        *out = Box::into_raw(Box::new(RpEvaluator { intrinsics, params }));
        Ok(())
    })
}

/// # Safety
/// `ev` must come from this library and not have been freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rp_evaluator_free(ev: *mut RpEvaluator) {
    if !ev.is_null() {
        drop(Box::from_raw(ev));
    }
}

/// Histogram of one (query, candidate) pair. Both detection lists are
/// suppressed and capped first. `bins` receives `max_distance + 1` counts,
/// the last being the unmatched bin; `visible` the number of visible
/// queries.
///
/// # Safety
/// Poses hold 16 values, depth maps `width * height` values (meters, 0 =
/// invalid), detection arrays their counts, `bins` `max_distance + 1` slots.
#[no_mangle]
pub unsafe extern "C" fn rp_evaluator_pair(
    ev: *const RpEvaluator,
    query_pose: *const f64,
    query_depth: *const f32,
    query_dets: *const RpDetection,
    query_count: usize,
    candidate_pose: *const f64,
    candidate_depth: *const f32,
    candidate_dets: *const RpDetection,
    candidate_count: usize,
    bins: *mut u64,
    visible: *mut u64,
) -> RpStatus {
    guard(|| {
        let ev = non_null(ev, "evaluator")?;
        let out = slice_mut(bins, ev.params.max_distance + 1, "bins")?;
        let visible = non_null_mut(visible, "visible")?;
        let (qp, cp) = (c_pose(query_pose)?, c_pose(candidate_pose)?);
        let (qd, cd) = (
            depth(query_depth, &ev.intrinsics)?,
            depth(candidate_depth, &ev.intrinsics)?,
        );
        let qs = cap_detections(&detections(query_dets, query_count)?, &ev.params);
        let cs = cap_detections(&detections(candidate_dets, candidate_count)?, &ev.params);
        let view = |index, pose, depth| FrameView { index, pose, depth };
        let h = evaluate_pair(
            view(0, &qp, &qd),
            &qs,
            view(1, &cp, &cd),
            &cs,
            &ev.intrinsics,
            &ev.params,
        );
        out[..h.bins.len()].copy_from_slice(&h.bins);
        out[h.bins.len()] = h.unmatched;
        *visible = h.visible_queries;
        Ok(())
    })
}

/// Per-pixel rounded distance to the nearest candidate, capped at `max_r`,
/// written row-major into `out` (`width * height` bytes).
///
/// # Safety
/// `xs` and `ys` hold `count` values; `out` has `width * height` bytes.
#[no_mangle]
pub unsafe extern "C" fn rp_distance_map(
    xs: *const u32,
    ys: *const u32,
    count: usize,
    width: u32,
    height: u32,
    max_r: u8,
    out: *mut u8,
) -> RpStatus {
    guard(|| {
        let (w, h) = (width as usize, height as usize);
        let (xs, ys) = (slice(xs, count, "xs")?, slice(ys, count, "ys")?);
        let out = slice_mut(out, w * h, "out")?;
        if let Some(k) = xs
            .iter()
            .zip(ys)
            .position(|(&x, &y)| x as usize >= w || y as usize >= h)
        {
            return Err(invalid(format!("candidate {k} lies outside {w}x{h}")));
        }
        let c: Vec<(usize, usize)> = xs
            .iter()
            .zip(ys)
            .map(|(&x, &y)| (x as usize, y as usize))
            .collect();
        out.copy_from_slice(evaluator::distance_map(&c, w, h, max_r).as_slice());
        Ok(())
    })
}

// --- aggregation -----------------------------------------------------------

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_aggregator_new(
    max_distance: u32,
    out: *mut *mut RpAggregator,
) -> RpStatus {
    guard(|| {
        let out = non_null_mut(out, "out")?;
        if max_distance == 0 {
            return Err(invalid("max_distance must be positive"));
        }
        *out = Box::into_raw(Box::new(RpAggregator {
            max_distance: max_distance as usize,
            histograms: Vec::new(),
        }));
        Ok(())
    })
}

/// # Safety
/// `agg` must come from this library and not have been freed; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn rp_aggregator_free(agg: *mut RpAggregator) {
    if !agg.is_null() {
        drop(Box::from_raw(agg));
    }
}

/// Adds one pair histogram (`max_distance + 1` bins as produced by
/// [`rp_evaluator_pair`]). Rejects histograms whose bins do not sum to
/// `visible`.
///
/// # Safety
/// `bins` holds `max_distance + 1` values.
#[no_mangle]
pub unsafe extern "C" fn rp_aggregator_add(
    agg: *mut RpAggregator,
    bins: *const u64,
    visible: u64,
) -> RpStatus {
    guard(|| {
        let agg = non_null_mut(agg, "aggregator")?;
        let b = slice(bins, agg.max_distance + 1, "bins")?;
        let h = DistanceHistogram {
            bins: b[..agg.max_distance].to_vec(),
            unmatched: b[agg.max_distance],
            visible_queries: visible,
        };
        if !h.is_conserved() {
            return Err(invalid("bins do not sum to the visible query count"));
        }
        agg.histograms.push(h);
        Ok(())
    })
}

/// Number of histograms added so far; 0 for null.
///
/// # Safety
/// `agg` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_aggregator_len(agg: *const RpAggregator) -> usize {
    agg.as_ref().map_or(0, |a| a.histograms.len())
}

/// Mean count and mean percentage per bin (`max_distance + 1` each, last
/// is unmatched). Either output may be null.
///
/// # Safety
/// Non-null outputs hold `max_distance + 1` values.
#[no_mangle]
pub unsafe extern "C" fn rp_aggregator_report(
    agg: *const RpAggregator,
    mean_count: *mut f64,
    mean_percent: *mut f64,
) -> RpStatus {
    guard(|| {
        let agg = non_null(agg, "aggregator")?;
        let report = aggregate(&agg.histograms)?;
        let n = agg.max_distance + 1;
        if !mean_count.is_null() {
            slice_mut(mean_count, n, "mean_count")?.copy_from_slice(&report.mean_count);
        }
        if !mean_percent.is_null() {
            slice_mut(mean_percent, n, "mean_percent")?.copy_from_slice(&report.mean_percent);
        }
        Ok(())
    })
}

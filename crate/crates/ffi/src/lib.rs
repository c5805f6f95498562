//! C interface: an opaque tracker handle plus a few pure helpers.
//!
//! Every function returns an [`NtStatus`]. On failure a message is kept
//! per thread and can be read with [`nt_last_error_message`]. Panics never
//! cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nighttrack::curriculum::{sampling_ratios, DatasetMeta, Domain};
use nighttrack::eval::{compute_metrics, TrackState, Tracker};
use nighttrack::frame::Frame;
use nighttrack::head::hanning_penalty;
use nighttrack::losses::{adb_loss, omega_weight, AdbInputs, LogBase};
use nighttrack::train::load_tracker;
use nighttrack::{BBox, Error};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Runtime = 4,
    Panic = 5,
}

/// Box as center and size.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NtBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<NtBox> for BBox {
    fn from(b: NtBox) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

impl From<BBox> for NtBox {
    fn from(b: BBox) -> Self {
        NtBox { cx: b.cx, cy: b.cy, w: b.w, h: b.h }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NtMetrics {
    pub precision: f64,
    pub norm_precision: f64,
    pub success: f64,
    pub mean_iou: f64,
}

/// Opaque tracker: weights plus the state of the sequence being tracked.
pub struct NtTracker {
    tracker: Tracker,
    state: Option<TrackState>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> NtStatus {
    match e {
        Error::Io { .. } => NtStatus::Io,
        e if e.is_validation() => NtStatus::InvalidArgument,
        Error::Shape { .. } => NtStatus::InvalidArgument,
        _ => NtStatus::Runtime,
    }
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (NtStatus, String)>) -> NtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NtStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            NtStatus::Panic
        }
    }
}

fn fail(e: Error) -> (NtStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (NtStatus, String) {
    (NtStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (NtStatus, String) {
    (NtStatus::InvalidArgument, msg.into())
}

/// # Safety
/// `ptr` must be null or point to `len` readable values.
unsafe fn view<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], (NtStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts(ptr, len) })
}

/// # Safety
/// `ptr` must be null or point to `len` writable values.
unsafe fn view_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], (NtStatus, String)> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(unsafe { slice::from_raw_parts_mut(ptr, len) })
}

/// Copies the calling thread's last error message into `buf` (always NUL
/// terminated when `len > 0`). Returns the full message length in bytes,
/// excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nt_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Loads a tracker from a directory written by training (`checkpoint/`
/// or the run directory that contains it).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nt_tracker_load(path: *const c_char, out: *mut *mut NtTracker) -> NtStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { CStr::from_ptr(path) }.to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let dir = Path::new(path);
        let dir = if dir.join("checkpoint").is_dir() { dir.join("checkpoint") } else { dir.to_path_buf() };
        let tracker = load_tracker(&dir).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(NtTracker { tracker, state: None })) };
        Ok(())
    })
}

/// Releases a tracker. Null is ignored.
///
/// # Safety
/// `tracker` must come from [`nt_tracker_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn nt_tracker_free(tracker: *mut NtTracker) {
    if !tracker.is_null() {
        drop(unsafe { Box::from_raw(tracker) });
    }
}

/// # Safety
/// `data` must point to `3 * height * width` floats.
unsafe fn frame_from(data: *const f32, height: usize, width: usize) -> Result<Frame, (NtStatus, String)> {
    if height == 0 || width == 0 {
        return Err(invalid("frame extent must be positive"));
    }
    let n = height.checked_mul(width).and_then(|v| v.checked_mul(3)).ok_or_else(|| invalid("frame too large"))?;
    let pixels = unsafe { view(data, n, "frame") }?;
    Frame::new(height, width, pixels.to_vec()).map_err(fail)
}

/// Starts a sequence. `frame` is planar RGB (`3 × height × width`, values
/// in `[0, 1]`); `init` is the target box in pixels.
///
/// # Safety
/// `tracker` must be live; `frame` must hold `3 * height * width` floats.
#[no_mangle]
pub unsafe extern "C" fn nt_tracker_start(tracker: *mut NtTracker, frame: *const f32, height: usize, width: usize, init: NtBox) -> NtStatus {
    guard(|| {
        let t = unsafe { tracker.as_mut() }.ok_or_else(|| null("tracker"))?;
        let f = unsafe { frame_from(frame, height, width) }?;
        t.state = Some(t.tracker.start(&f, init.into()).map_err(fail)?);
        Ok(())
    })
}

/// Tracks one more frame and writes the box (pixels) to `out`.
///
/// # Safety
/// As for [`nt_tracker_start`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nt_tracker_update(tracker: *mut NtTracker, frame: *const f32, height: usize, width: usize, out: *mut NtBox) -> NtStatus {
    guard(|| {
        let t = unsafe { tracker.as_mut() }.ok_or_else(|| null("tracker"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let f = unsafe { frame_from(frame, height, width) }?;
        let state = t.state.as_mut().ok_or_else(|| invalid("nt_tracker_start has not been called"))?;
        let b = t.tracker.update(state, &f).map_err(fail)?;
        unsafe { *out = b.into() };
        Ok(())
    })
}

/// Curriculum sampling ratios for `count` datasets at `epoch`.
/// `is_night[i] != 0` marks night datasets.
///
/// # Safety
/// `sizes`, `is_night` and `out` must each hold `count` values.
#[no_mangle]
pub unsafe extern "C" fn nt_sampling_ratios(
    sizes: *const u64,
    is_night: *const u8,
    count: usize,
    epoch: usize,
    theta: f64,
    out: *mut f64,
) -> NtStatus {
    guard(|| {
        let sizes = unsafe { view(sizes, count, "sizes") }?;
        let night = unsafe { view(is_night, count, "is_night") }?;
        let out = unsafe { view_mut(out, count, "out") }?;
        let metas: Vec<DatasetMeta> = (0..count)
            .map(|i| DatasetMeta::new(format!("d{i}"), if night[i] != 0 { Domain::Night } else { Domain::Day }, sizes[i] as usize, i))
            .collect();
        let r = sampling_ratios(&metas, epoch, theta, false).map_err(fail)?;
        out.copy_from_slice(&r);
        Ok(())
    })
}

/// `ω = ln(N_max / N_j) + 0.5`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nt_omega_weight(n_max: u64, n_j: u64, out: *mut f64) -> NtStatus {
    guard(|| {
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        *out = omega_weight(n_max, n_j, LogBase::E).map_err(fail)?;
        Ok(())
    })
}

/// Mean ADB loss over `n` samples.
///
/// # Safety
/// `u` and `omega` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nt_adb_loss(u: *const f64, omega: *const f64, n: usize, out: *mut f64) -> NtStatus {
    guard(|| {
        let u = unsafe { view(u, n, "u") }?;
        let omega = unsafe { view(omega, n, "omega") }?;
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        let inputs = AdbInputs::new(u.to_vec(), omega.to_vec()).map_err(fail)?;
        *out = adb_loss(&inputs);
        Ok(())
    })
}

/// Precision@20px, normalized precision and success for one trajectory.
/// Boxes are normalized to a `width × height` frame.
///
/// # Safety
/// `pred` and `gt` must hold `n` boxes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nt_compute_metrics(pred: *const NtBox, gt: *const NtBox, n: usize, width: f64, height: f64, out: *mut NtMetrics) -> NtStatus {
    guard(|| {
        let pred: Vec<BBox> = unsafe { view(pred, n, "pred") }?.iter().map(|&b| b.into()).collect();
        let gt: Vec<BBox> = unsafe { view(gt, n, "gt") }?.iter().map(|&b| b.into()).collect();
        let out = unsafe { out.as_mut() }.ok_or_else(|| null("out"))?;
        if n == 0 {
            return Err(invalid("empty trajectory"));
        }
        let m = compute_metrics(&pred, &gt, (width, height)).map_err(fail)?;
        *out = NtMetrics { precision: m.precision, norm_precision: m.norm_precision, success: m.success, mean_iou: m.mean_iou };
        Ok(())
    })
}

/// Multiplies an `s × s` score map by the separable Hanning window.
///
/// # Safety
/// `cls` and `out` must hold `s * s` values.
#[no_mangle]
pub unsafe extern "C" fn nt_hanning_penalty(cls: *const f64, s: usize, out: *mut f64) -> NtStatus {
    guard(|| {
        let n = s.checked_mul(s).ok_or_else(|| invalid("map too large"))?;
        let cls = unsafe { view(cls, n, "cls") }?;
        let out = unsafe { view_mut(out, n, "out") }?;
        out.copy_from_slice(&hanning_penalty(cls, s).map_err(fail)?);
        Ok(())
    })
}

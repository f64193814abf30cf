//! C ABI over `hqm-core`.
//!
//! Every fallible function returns an [`HqmStatus`]. On failure the message
//! is kept per thread and can be read with [`hqm_last_error_message`] until
//! the next failing call on the same thread. Models are opaque handles owned
//! by the caller and released with [`hqm_model_free`]; strings returned by the
//! library are released with [`hqm_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hqm_core::geometry::{giou, iou, shift_box, BBox, ShiftConfig};
use hqm_core::harness::{detections_from, evaluate, predict_scene, EvalConfig};
use hqm_core::hqm::{amm_mask, AmmConfig};
use hqm_core::matching::{hungarian, CostMatrix};
use hqm_core::model::Checkpoint;
use hqm_core::numerics::Tensor;
use hqm_core::scenes::{encode_scene, Dataset, Scene};
use hqm_core::HqmError;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HqmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Shape = 4,
    Contract = 5,
    Sampling = 6,
    Format = 7,
    Numeric = 8,
    Io = 9,
    Panic = 10,
}

/// Center-size box in normalized image coordinates.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HqmBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<HqmBox> for BBox {
    fn from(b: HqmBox) -> Self {
        BBox::new(b.cx, b.cy, b.w, b.h)
    }
}

impl From<BBox> for HqmBox {
    fn from(b: BBox) -> Self {
        HqmBox {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
        }
    }
}

/// A loaded checkpoint.
pub struct HqmModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(HqmStatus, String);

impl From<HqmError> for Failure {
    fn from(e: HqmError) -> Self {
        let status = match e {
            HqmError::Config(_) => HqmStatus::Config,
            HqmError::Shape(_) => HqmStatus::Shape,
            HqmError::Contract(_) => HqmStatus::Contract,
            HqmError::Sampling { .. } => HqmStatus::Sampling,
            HqmError::Format(_) | HqmError::Json(_) | HqmError::Csv(_) => HqmStatus::Format,
            HqmError::Numeric(_) => HqmStatus::Numeric,
            HqmError::Io(_) => HqmStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(HqmStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(HqmStatus::InvalidArgument, msg.into())
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HqmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HqmStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside hqm".into());
            HqmStatus::Panic
        }
    }
}

unsafe fn read<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn write<T>(p: *mut T, what: &str, value: T) -> Result<(), Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(value);
    Ok(())
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn to_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| invalid("output contains a nul byte"))
}

/// Message of the last failed call on this thread, or null if none failed.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hqm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn hqm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `a`, `b` and `out` must be valid pointers or null.
#[no_mangle]
pub unsafe extern "C" fn hqm_box_iou(a: *const HqmBox, b: *const HqmBox, out: *mut f64) -> HqmStatus {
    guard(|| {
        let v = iou((*read(a, "a")?).into(), (*read(b, "b")?).into());
        write(out, "out", v)
    })
}

/// # Safety
/// `a`, `b` and `out` must be valid pointers or null.
#[no_mangle]
pub unsafe extern "C" fn hqm_box_giou(a: *const HqmBox, b: *const HqmBox, out: *mut f64) -> HqmStatus {
    guard(|| {
        let v = giou((*read(a, "a")?).into(), (*read(b, "b")?).into());
        write(out, "out", v)
    })
}

/// Draws a box whose IoU with `gt` lies in `[iou_lo, iou_hi]`, using a
/// generator seeded with `seed`. Fails with `Sampling` after `max_attempts`.
///
/// # Safety
/// `gt` and `out` must be valid pointers or null.
#[no_mangle]
pub unsafe extern "C" fn hqm_shift_box(
    gt: *const HqmBox,
    iou_lo: f64,
    iou_hi: f64,
    max_attempts: usize,
    seed: u64,
    out: *mut HqmBox,
) -> HqmStatus {
    guard(|| {
        let gt: BBox = (*read(gt, "gt")?).into();
        if !gt.is_valid() {
            return Err(invalid("gt box has non-positive size"));
        }
        let cfg = ShiftConfig {
            iou_lo,
            iou_hi,
            max_attempts,
            ..ShiftConfig::default()
        };
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shifted = shift_box(gt, &cfg, &mut rng)?;
        write(out, "out", shifted.into())
    })
}

/// Minimum-cost assignment of `targets` columns to distinct `queries` rows.
///
/// `cost` is row-major `queries × targets` with `targets <= queries`.
/// `out_query_for_target[t]` receives the query assigned to target `t`.
///
/// # Safety
/// `cost` must point to `queries * targets` values and
/// `out_query_for_target` to `targets` writable slots.
#[no_mangle]
pub unsafe extern "C" fn hqm_hungarian(
    cost: *const f64,
    queries: usize,
    targets: usize,
    out_query_for_target: *mut usize,
    out_total_cost: *mut f64,
) -> HqmStatus {
    guard(|| {
        let n = queries
            .checked_mul(targets)
            .ok_or_else(|| invalid("cost matrix size overflows"))?;
        let values = slice(cost, n, "cost")?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("cost matrix has non-finite entries"));
        }
        let out = slice_mut(out_query_for_target, targets, "out_query_for_target")?;
        let matrix = CostMatrix::new(Tensor::new(vec![queries, targets], values.to_vec())?)?;
        let assignment = hungarian(&matrix);
        for &(q, t) in &assignment.pairs {
            out[t] = q;
        }
        if !out_total_cost.is_null() {
            *out_total_cost = assignment.total_cost(&matrix);
        }
        Ok(())
    })
}

/// Zeroes a random `gamma` share of the `k` positions where `reference` is
/// largest, writing the masked copy of `attention` to `out`. The other
/// positions are copied bit for bit.
///
/// # Safety
/// `attention`, `reference` and `out` must each hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn hqm_amm_mask(
    attention: *const f64,
    reference: *const f64,
    len: usize,
    k: usize,
    gamma: f64,
    seed: u64,
    out: *mut f64,
) -> HqmStatus {
    guard(|| {
        let attention = slice(attention, len, "attention")?;
        let reference = slice(reference, len, "reference")?;
        let out = slice_mut(out, len, "out")?;
        let cfg = AmmConfig {
            k,
            gamma,
            ..AmmConfig::default()
        };
        cfg.validate(len)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        out.copy_from_slice(&amm_mask(attention, reference, &cfg, &mut rng)?);
        Ok(())
    })
}

/// Loads a checkpoint manifest written by `hqm train`.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hqm_model_load(path: *const c_char, out: *mut *mut HqmModel) -> HqmStatus {
    guard(|| {
        let path = read_str(path, "path")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(HqmModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`hqm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hqm_model_free(model: *mut HqmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mean average precision of the model on a dataset file, with the default
/// evaluation settings.
///
/// # Safety
/// `model` must be a live handle, `dataset_path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hqm_model_evaluate(
    model: *const HqmModel,
    dataset_path: *const c_char,
    out_map: *mut f64,
) -> HqmStatus {
    guard(|| {
        let model = read(model, "model")?;
        let text = std::fs::read_to_string(read_str(dataset_path, "dataset_path")?).map_err(HqmError::from)?;
        let dataset = Dataset::from_json(&text)?;
        let report = evaluate(&model.checkpoint, &dataset, &EvalConfig::default())?;
        write(out_map, "out_map", report.map)
    })
}

/// Detections for one scene given as JSON, returned as a JSON array.
/// Release the result with [`hqm_string_free`].
///
/// # Safety
/// `model` must be a live handle, `scene_json` a nul-terminated string and
/// `out_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hqm_model_predict_json(
    model: *const HqmModel,
    scene_json: *const c_char,
    out_json: *mut *mut c_char,
) -> HqmStatus {
    guard(|| {
        let model = read(model, "model")?;
        let scene: Scene = serde_json::from_str(read_str(scene_json, "scene_json")?).map_err(HqmError::from)?;
        if out_json.is_null() {
            return Err(null("out_json"));
        }
        let ckpt = &model.checkpoint;
        let grid = encode_scene(&scene, &ckpt.class_table)?;
        let dets = detections_from(&predict_scene(&ckpt.params, &grid)?);
        *out_json = to_c_string(serde_json::to_string(&dets).map_err(HqmError::from)?)?;
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hqm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

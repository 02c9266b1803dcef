//! C ABI over the recommender core.
//!
//! Every fallible function returns a [`TpgStatus`]; on failure the message
//! is kept per thread and read with [`tpg_last_error`]. Models are opaque
//! handles released with [`tpg_model_free`]. Panics never cross the
//! boundary: they become `TPG_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tpg::cli::Bundle;
use tpg::data::CheckIn;
use tpg::error::Error;
use tpg::eval::{ndcg_at_k, recall_at_k};
use tpg::geocode::{haversine_km, quadkey_of, GeoPoint};
use tpg::model::{time_slot, Predictor, Tpg};
use tpg::numcore::ParamStore;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpgStatus {
    Ok = 0,
    InvalidArgument = 1,
    Data = 2,
    Numeric = 3,
    Checkpoint = 4,
    /// Output buffer too small; nothing was written.
    BufferTooSmall = 5,
    Panic = 6,
}

/// Loaded checkpoint: vocabulary, architecture and parameters.
pub struct TpgModel {
    bundle: Bundle,
    model: Tpg,
    store: ParamStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> TpgStatus {
    match e {
        Error::InvalidInput(_) | Error::Index { .. } | Error::Vocabulary { .. } => TpgStatus::InvalidArgument,
        Error::Numeric(_) | Error::UndefinedMetric(_) => TpgStatus::Numeric,
        Error::Checkpoint(_) => TpgStatus::Checkpoint,
        Error::Format(_) | Error::Io(_) => TpgStatus::Data,
    }
}

/// Runs `f`, recording errors and panics for `tpg_last_error`.
fn guard(f: impl FnOnce() -> Result<(), (TpgStatus, String)>) -> TpgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            TpgStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            TpgStatus::Panic
        }
    }
}

fn core(e: Error) -> (TpgStatus, String) {
    (status_of(&e), e.to_string())
}

fn invalid(msg: &str) -> (TpgStatus, String) {
    (TpgStatus::InvalidArgument, msg.to_string())
}

unsafe fn c_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, (TpgStatus, String)> {
    if s.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (TpgStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

/// Copies `s` NUL-terminated into `buf` of `cap` bytes.
unsafe fn write_str(s: &str, buf: *mut c_char, cap: usize) -> Result<(), (TpgStatus, String)> {
    if buf.is_null() {
        return Err(invalid("output buffer is null"));
    }
    if s.len() + 1 > cap {
        return Err((TpgStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1)));
    }
    ptr::copy_nonoverlapping(s.as_ptr().cast::<c_char>(), buf, s.len());
    *buf.add(s.len()) = 0;
    Ok(())
}

/// Message of the last failure on this thread, or null after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn tpg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Writes the quadkey of a point at `level` (1..=23) into `buf`.
///
/// # Safety
/// `buf` must point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tpg_quadkey_of(lat: f64, lon: f64, level: u8, buf: *mut c_char, cap: usize) -> TpgStatus {
    guard(|| {
        let p = GeoPoint::new(lat, lon).map_err(core)?;
        let q = quadkey_of(p, level).map_err(core)?;
        write_str(q.as_str(), buf, cap)
    })
}

/// Hour-of-week slot of a Unix timestamp, Monday 00:00 UTC = 0.
#[no_mangle]
pub extern "C" fn tpg_time_slot(unix_seconds: i64) -> u32 {
    time_slot(unix_seconds) as u32
}

/// Great-circle distance in kilometres; NaN for invalid coordinates.
#[no_mangle]
pub extern "C" fn tpg_haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    match (GeoPoint::new(lat1, lon1), GeoPoint::new(lat2, lon2)) {
        (Ok(a), Ok(b)) => haversine_km(a, b),
        _ => f64::NAN,
    }
}

/// # Safety
/// `ranks` must point to `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpg_recall_at_k(ranks: *const usize, n: usize, k: usize, out: *mut f64) -> TpgStatus {
    guard(|| {
        let v = recall_at_k(slice(ranks, n, "ranks")?, k).map_err(core)?;
        out.as_mut().map(|o| *o = v).ok_or_else(|| invalid("out is null"))
    })
}

/// # Safety
/// `ranks` must point to `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tpg_ndcg_at_k(ranks: *const usize, n: usize, k: usize, out: *mut f64) -> TpgStatus {
    guard(|| {
        let v = ndcg_at_k(slice(ranks, n, "ranks")?, k).map_err(core)?;
        out.as_mut().map(|o| *o = v).ok_or_else(|| invalid("out is null"))
    })
}

/// Loads a checkpoint directory written by `tpg train`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_load(dir: *const c_char, out: *mut *mut TpgModel) -> TpgStatus {
    guard(|| {
        if out.is_null() {
            return Err(invalid("out is null"));
        }
        let dir = c_str(dir, "dir")?;
        let (bundle, model, store) = Bundle::load(Path::new(dir)).map_err(core)?;
        *out = Box::into_raw(Box::new(TpgModel { bundle, model, store }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from `tpg_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_free(model: *mut TpgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of POIs in the model's vocabulary; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_num_pois(model: *const TpgModel) -> usize {
    model.as_ref().map_or(0, |m| m.bundle.poi_ids.len())
}

/// Number of users in the model's vocabulary; 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_num_users(model: *const TpgModel) -> usize {
    model.as_ref().map_or(0, |m| m.bundle.user_ids.len())
}

unsafe fn lookup(ids: &[String], id: *const c_char, what: &str, out: *mut usize) -> Result<(), (TpgStatus, String)> {
    let id = c_str(id, what)?;
    let i = ids
        .iter()
        .position(|x| x == id)
        .ok_or_else(|| invalid(&format!("unknown {what} {id:?}")))?;
    out.as_mut().map(|o| *o = i).ok_or_else(|| invalid("out is null"))
}

/// Dense index of an original POI id.
///
/// # Safety
/// `model` must be a live handle, `poi_id` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_poi_index(model: *const TpgModel, poi_id: *const c_char, out: *mut usize) -> TpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        lookup(&m.bundle.poi_ids, poi_id, "poi", out)
    })
}

/// Dense index of an original user id.
///
/// # Safety
/// `model` must be a live handle, `user_id` NUL-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_user_index(
    model: *const TpgModel,
    user_id: *const c_char,
    out: *mut usize,
) -> TpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        lookup(&m.bundle.user_ids, user_id, "user", out)
    })
}

/// Writes the original id of dense POI `index` into `buf`.
///
/// # Safety
/// `model` must be a live handle and `buf` point to `cap` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_poi_id(model: *const TpgModel, index: usize, buf: *mut c_char, cap: usize) -> TpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        let id = m
            .bundle
            .poi_ids
            .get(index)
            .ok_or_else(|| invalid(&format!("poi index {index} out of range")))?;
        write_str(id, buf, cap)
    })
}

/// Ranks every POI for `user` at time `prompt` given a time-ordered history
/// of dense POI indices and Unix timestamps. The best `k` are written to
/// `out_pois`/`out_scores` (each of capacity `k`), best first, and their
/// count to `out_len`.
///
/// # Safety
/// Pointers must reference `n` history entries, `k` output slots each and a
/// writable `out_len`; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn tpg_model_predict(
    model: *const TpgModel,
    user: usize,
    history_pois: *const usize,
    history_times: *const i64,
    n: usize,
    prompt: i64,
    k: usize,
    out_pois: *mut usize,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> TpgStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| invalid("model is null"))?;
        if out_len.is_null() || (k > 0 && (out_pois.is_null() || out_scores.is_null())) {
            return Err(invalid("output pointer is null"));
        }
        let pois = slice(history_pois, n, "history_pois")?;
        let times = slice(history_times, n, "history_times")?;
        let history: Vec<CheckIn> = pois
            .iter()
            .zip(times)
            .map(|(&poi, &time)| CheckIn { user, time, poi })
            .collect();
        let history = &history[history.len().saturating_sub(m.model.cfg.max_len)..];
        let predictor = Predictor::new(&m.model, &m.store).map_err(core)?;
        let ranked = predictor.top_k(user, history, &[prompt], k).map_err(core)?;
        let list = &ranked[0];
        for (i, &(poi, score)) in list.iter().enumerate() {
            *out_pois.add(i) = poi;
            *out_scores.add(i) = score;
        }
        *out_len = list.len();
        Ok(())
    })
}

//! C ABI over `dnode-core`.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `*_free`. Every fallible call returns a [`DnodeStatus`]
//! and, on failure, stores a message retrievable with [`dnode_last_error`]
//! on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use dnode_core::cli::{forecast_years, CliError};
use dnode_core::data::{self, IndicatorPanel, TimeScale};
use dnode_core::model::{ModelMeta, PovertyModel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DnodeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Data = 4,
    Model = 5,
    Solver = 6,
    InvalidArgument = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A validated indicator panel.
pub struct DnodePanel {
    panel: IndicatorPanel,
}

/// A trained model with its stored metadata.
pub struct DnodeModel {
    model: PovertyModel,
    meta: ModelMeta,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    let c = CString::new(msg).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: DnodeStatus, msg: impl Into<String>) -> DnodeStatus {
    set_error(msg);
    status
}

fn status_of(e: &CliError) -> DnodeStatus {
    match e.code() {
        "io" => DnodeStatus::Io,
        "data" => DnodeStatus::Data,
        "solver" => DnodeStatus::Solver,
        "usage" => DnodeStatus::InvalidArgument,
        _ => DnodeStatus::Model,
    }
}

fn from_cli(e: CliError) -> DnodeStatus {
    fail(status_of(&e), e.to_string())
}

/// Runs `body`, converting panics into [`DnodeStatus::Panic`].
fn guard(body: impl FnOnce() -> DnodeStatus) -> DnodeStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(DnodeStatus::Panic, "internal panic"),
    }
}

unsafe fn path_arg<'a>(path: *const c_char) -> Result<&'a Path, DnodeStatus> {
    if path.is_null() {
        return Err(fail(DnodeStatus::NullPointer, "path is null"));
    }
    let s = unsafe { CStr::from_ptr(path) }
        .to_str()
        .map_err(|_| fail(DnodeStatus::InvalidUtf8, "path is not valid UTF-8"))?;
    Ok(Path::new(s))
}

fn boxed_out<T>(out: *mut *mut T, value: T) -> DnodeStatus {
    unsafe { *out = Box::into_raw(Box::new(value)) };
    DnodeStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dnode_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next `dnode_*` call on the same thread.
#[no_mangle]
pub extern "C" fn dnode_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Normalized model time of a calendar year (2007 ↦ 0, 2020 ↦ 1).
#[no_mangle]
pub extern "C" fn dnode_normalize_year(year: f64) -> f64 {
    data::normalize_year(&TimeScale::default(), year)
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dnode_panel_load(
    path: *const c_char,
    out: *mut *mut DnodePanel,
) -> DnodeStatus {
    guard(|| {
        if out.is_null() {
            return fail(DnodeStatus::NullPointer, "out is null");
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match data::load_panel(path) {
            Ok(panel) => boxed_out(out, DnodePanel { panel }),
            Err(e) => from_cli(e.into()),
        }
    })
}

/// The synthetic logistic panel with `n_districts` districts.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dnode_panel_synthetic(
    n_districts: usize,
    seed: u64,
    out: *mut *mut DnodePanel,
) -> DnodeStatus {
    guard(|| {
        if out.is_null() {
            return fail(DnodeStatus::NullPointer, "out is null");
        }
        if n_districts == 0 {
            return fail(DnodeStatus::InvalidArgument, "n_districts must be positive");
        }
        let panel = data::synthetic_panel(n_districts, seed);
        boxed_out(out, DnodePanel { panel })
    })
}

/// # Safety
/// `panel` must come from a `dnode_panel_*` constructor and not be freed
/// twice. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dnode_panel_free(panel: *mut DnodePanel) {
    if !panel.is_null() {
        drop(unsafe { Box::from_raw(panel) });
    }
}

/// # Safety
/// `panel` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dnode_panel_shape(
    panel: *const DnodePanel,
    districts: *mut usize,
    times: *mut usize,
    indicators: *mut usize,
) -> DnodeStatus {
    guard(|| {
        if panel.is_null() || districts.is_null() || times.is_null() || indicators.is_null() {
            return fail(DnodeStatus::NullPointer, "null argument");
        }
        let p = unsafe { &(*panel).panel };
        unsafe {
            *districts = p.n_districts();
            *times = p.n_times();
            *indicators = p.n_indicators();
        }
        DnodeStatus::Ok
    })
}

/// Copies the name of district `index` into `buf` with a trailing NUL.
/// `needed` receives the required size including the NUL.
///
/// # Safety
/// `panel` must be a live handle, `buf` valid for `buf_len` bytes (or null
/// with `buf_len` 0) and `needed` valid or null.
#[no_mangle]
pub unsafe extern "C" fn dnode_panel_district_name(
    panel: *const DnodePanel,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> DnodeStatus {
    guard(|| {
        if panel.is_null() {
            return fail(DnodeStatus::NullPointer, "panel is null");
        }
        let names = unsafe { (*panel).panel.district_names() };
        let Some(name) = names.get(index) else {
            return fail(
                DnodeStatus::InvalidArgument,
                format!("district {index} out of range for {}", names.len()),
            );
        };
        let bytes = name.as_bytes();
        if !needed.is_null() {
            unsafe { *needed = bytes.len() + 1 };
        }
        if buf.is_null() || buf_len < bytes.len() + 1 {
            return fail(
                DnodeStatus::BufferTooSmall,
                format!("need {} bytes", bytes.len() + 1),
            );
        }
        unsafe {
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, bytes.len());
            *buf.add(bytes.len()) = 0;
        }
        DnodeStatus::Ok
    })
}

/// Loads a checkpoint and its `.config.json` sidecar.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dnode_model_load(
    path: *const c_char,
    out: *mut *mut DnodeModel,
) -> DnodeStatus {
    guard(|| {
        if out.is_null() {
            return fail(DnodeStatus::NullPointer, "out is null");
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(s) => return s,
        };
        match PovertyModel::load(path) {
            Ok((model, meta)) => boxed_out(out, DnodeModel { model, meta }),
            Err(e) => from_cli(e.into()),
        }
    })
}

/// # Safety
/// `model` must come from [`dnode_model_load`] and not be freed twice.
/// Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dnode_model_free(model: *mut DnodeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// # Safety
/// `model` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dnode_model_n_districts(
    model: *const DnodeModel,
    out: *mut usize,
) -> DnodeStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            return fail(DnodeStatus::NullPointer, "null argument");
        }
        unsafe { *out = (*model).model.config().n_districts };
        DnodeStatus::Ok
    })
}

/// Forecasts every district of `panel` at calendar `year`, writing
/// `districts × indicators` values row-major into `out`.
///
/// # Safety
/// `model` and `panel` must be live handles and `out` valid for `out_len`
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn dnode_forecast(
    model: *const DnodeModel,
    panel: *const DnodePanel,
    year: u32,
    out: *mut f64,
    out_len: usize,
) -> DnodeStatus {
    guard(|| {
        if model.is_null() || panel.is_null() || out.is_null() {
            return fail(DnodeStatus::NullPointer, "null argument");
        }
        let (m, p) = unsafe { (&*model, &(*panel).panel) };
        let need = p.n_districts() * p.n_indicators();
        if out_len < need {
            return fail(
                DnodeStatus::BufferTooSmall,
                format!("need {need} values, got {out_len}"),
            );
        }
        if m.meta.district_names != p.district_names() {
            return fail(DnodeStatus::Model, "checkpoint districts do not match the panel");
        }
        let forecast = match forecast_years(&m.model, p, &m.meta.time_scale, &[year], &m.meta.solver)
        {
            Ok(mut f) => f.remove(0),
            Err(e) => return from_cli(e),
        };
        let dst = unsafe { std::slice::from_raw_parts_mut(out, need) };
        for (chunk, row) in dst.chunks_mut(p.n_indicators()).zip(&forecast.values) {
            chunk.copy_from_slice(row);
        }
        DnodeStatus::Ok
    })
}

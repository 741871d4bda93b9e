//! C interface to `stec-core`.
//!
//! Every function returns a [`StecStatus`]. On failure the message is kept
//! per thread and read with [`stec_last_error`]. Datasets and checkpoints
//! are opaque handles released with their `_free` functions.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use stec_core::actions::{bin_action, crop_matrix, ego_action, BinningSpec};
use stec_core::datasets::{self, Dataset};
use stec_core::harness::{dataset_for, train_ssl, ExperimentCfg, TrainOptions};
use stec_core::imaging::{CropParams, TransformRecord};
use stec_core::models::{encode_frozen, Checkpoint};
use stec_core::verify::{self, Suite};
use stec_core::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StecStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    /// Checksum, format or version problem in a file.
    Corrupt = 5,
    NonFinite = 6,
    /// A verification suite ran and failed.
    CheckFailed = 7,
    /// Buffer too small; the required length was written.
    BufferTooSmall = 8,
    Internal = 9,
}

/// Opaque dataset handle.
pub struct StecDataset(Dataset);

/// Opaque checkpoint handle.
pub struct StecCheckpoint(Checkpoint);

/// Crop and mirror of one view on a `source_width × source_height` canvas.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct StecCrop {
    pub source_width: usize,
    pub source_height: usize,
    pub left: usize,
    pub top: usize,
    pub width: usize,
    pub height: usize,
    pub mirrored: bool,
}

/// Verification suite selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StecSuite {
    Decomposition = 0,
    Bound = 1,
    Recovery = 2,
    Gradients = 3,
    Affine = 4,
    All = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> StecStatus {
    match e {
        Error::Config(_) => StecStatus::Config,
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Grad(_) | Error::Singular(_) => StecStatus::InvalidArgument,
        Error::Io { .. } => StecStatus::Io,
        Error::Checksum { .. } | Error::Format { .. } | Error::Version { .. } | Error::Json(_) | Error::Csv(_) => {
            StecStatus::Corrupt
        }
        Error::NonFinite(_) => StecStatus::NonFinite,
    }
}

/// Runs `f`, turning errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<StecStatus, (StecStatus, String)>) -> StecStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            StecStatus::Internal
        }
    }
}

fn fail(e: Error) -> (StecStatus, String) {
    (status_of(&e), e.to_string())
}

fn null() -> (StecStatus, String) {
    (StecStatus::NullPointer, "null pointer argument".into())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (StecStatus, String)> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| (StecStatus::InvalidArgument, "path is not UTF-8".into()))
}

/// Message of the last failed call on this thread; empty when none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn stec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Generates a synthetic dataset.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn stec_dataset_generate(
    n: usize,
    classes: usize,
    resolution: usize,
    seed: u64,
    out: *mut *mut StecDataset,
) -> StecStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let ds = datasets::gen_synthetic(n, classes, resolution, seed).map_err(fail)?;
        *out = Box::into_raw(Box::new(StecDataset(ds)));
        Ok(StecStatus::Ok)
    })
}

/// Loads a dataset directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stec_dataset_load(dir: *const c_char, out: *mut *mut StecDataset) -> StecStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        if out.is_null() {
            return Err(null());
        }
        let ds = datasets::load(&dir).map_err(fail)?;
        *out = Box::into_raw(Box::new(StecDataset(ds)));
        Ok(StecStatus::Ok)
    })
}

/// Writes a dataset directory.
///
/// # Safety
/// `ds` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn stec_dataset_save(ds: *const StecDataset, dir: *const c_char) -> StecStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        let ds = ds.as_ref().ok_or_else(null)?;
        datasets::save(&ds.0, &dir).map_err(fail)?;
        Ok(StecStatus::Ok)
    })
}

/// Number of images, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stec_dataset_len(ds: *const StecDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// Copies the labels into `labels`, which holds `capacity` entries.
///
/// # Safety
/// `ds` must be a live handle and `labels` valid for `capacity` writes.
#[no_mangle]
pub unsafe extern "C" fn stec_dataset_labels(
    ds: *const StecDataset,
    labels: *mut u32,
    capacity: usize,
    written: *mut usize,
) -> StecStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(null)?;
        if labels.is_null() || written.is_null() {
            return Err(null());
        }
        let src = ds.0.labels();
        *written = src.len();
        if capacity < src.len() {
            return Err((StecStatus::BufferTooSmall, format!("need {} labels", src.len())));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), labels, src.len());
        Ok(StecStatus::Ok)
    })
}

/// Releases a dataset handle; null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stec_dataset_free(ds: *mut StecDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn stec_checkpoint_load(dir: *const c_char, out: *mut *mut StecCheckpoint) -> StecStatus {
    guard(|| {
        let dir = path_arg(dir)?;
        if out.is_null() {
            return Err(null());
        }
        let c = Checkpoint::load(&dir).map_err(fail)?;
        *out = Box::into_raw(Box::new(StecCheckpoint(c)));
        Ok(StecStatus::Ok)
    })
}

/// Encoder feature dimension, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stec_checkpoint_feature_dim(ckpt: *const StecCheckpoint) -> usize {
    ckpt.as_ref().map_or(0, |c| c.0.model.encoder.feature_dim)
}

/// Training step at which the checkpoint was written, or 0 for a null handle.
///
/// # Safety
/// `ckpt` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn stec_checkpoint_step(ckpt: *const StecCheckpoint) -> u64 {
    ckpt.as_ref().map_or(0, |c| c.0.step)
}

/// Releases a checkpoint handle; null is ignored.
///
/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stec_checkpoint_free(ckpt: *mut StecCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Eval-mode encoder features of every image, row-major `N × D`, into
/// `features` of `capacity` doubles. `written` receives `N·D`.
///
/// # Safety
/// Handles must be live, `features` valid for `capacity` writes, `written` writable.
#[no_mangle]
pub unsafe extern "C" fn stec_encode(
    ckpt: *const StecCheckpoint,
    ds: *const StecDataset,
    features: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> StecStatus {
    guard(|| {
        let (c, d) = (ckpt.as_ref().ok_or_else(null)?, ds.as_ref().ok_or_else(null)?);
        if features.is_null() || written.is_null() {
            return Err(null());
        }
        let need = d.0.len() * c.0.model.encoder.feature_dim;
        *written = need;
        if capacity < need {
            return Err((StecStatus::BufferTooSmall, format!("need {need} doubles")));
        }
        let idx: Vec<usize> = (0..d.0.len()).collect();
        let mut at = 0;
        for chunk in idx.chunks(256) {
            let f = encode_frozen(&c.0.store, &c.0.model, d.0.rows(chunk)).map_err(fail)?;
            ptr::copy_nonoverlapping(f.data().as_ptr(), features.add(at), f.len());
            at += f.len();
        }
        Ok(StecStatus::Ok)
    })
}

/// Trains from a TOML config; `out_dir` overrides the config's when non-null.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `out_dir` null or one.
#[no_mangle]
pub unsafe extern "C" fn stec_train(config_path: *const c_char, out_dir: *const c_char) -> StecStatus {
    guard(|| {
        let path = path_arg(config_path)?;
        let mut cfg = ExperimentCfg::load(&path).map_err(fail)?;
        if !out_dir.is_null() {
            cfg.out_dir = path_arg(out_dir)?.to_string_lossy().into_owned();
        }
        let ds = dataset_for(&cfg).map_err(fail)?;
        let opts = TrainOptions {
            out_dir: Some(cfg.out_path()),
            ..Default::default()
        };
        train_ssl(&cfg, &ds, &opts).map_err(fail)?;
        Ok(StecStatus::Ok)
    })
}

/// Runs a verification suite. Returns `CheckFailed` when any check fails.
#[no_mangle]
pub extern "C" fn stec_verify(suite: StecSuite, trials: usize, seed: u64) -> StecStatus {
    guard(|| {
        let suite = match suite {
            StecSuite::Decomposition => Suite::Decomposition,
            StecSuite::Bound => Suite::Bound,
            StecSuite::Recovery => Suite::Recovery,
            StecSuite::Gradients => Suite::Gradients,
            StecSuite::Affine => Suite::Affine,
            StecSuite::All => Suite::All,
        };
        let reports = verify::run(suite, trials, seed).map_err(fail)?;
        match reports.iter().find(|r| !r.passed) {
            Some(r) => Err((StecStatus::CheckFailed, r.to_string())),
            None => Ok(StecStatus::Ok),
        }
    })
}

fn record(c: &StecCrop) -> TransformRecord {
    TransformRecord {
        crop: CropParams {
            left: c.left,
            top: c.top,
            width: c.width,
            height: c.height,
        },
        mirrored: c.mirrored,
        ..TransformRecord::identity(c.source_width, c.source_height)
    }
}

/// Egocentric action from view `x` to view `x_prime` (6 doubles) and its
/// labels under the default binning with `bins` bins (6 entries).
///
/// # Safety
/// `x` and `x_prime` must be readable; `action` and `labels` valid for 6 writes each.
#[no_mangle]
pub unsafe extern "C" fn stec_ego_action(
    x: *const StecCrop,
    x_prime: *const StecCrop,
    bins: usize,
    action: *mut f64,
    labels: *mut usize,
) -> StecStatus {
    guard(|| {
        let (a, b) = (x.as_ref().ok_or_else(null)?, x_prime.as_ref().ok_or_else(null)?);
        if action.is_null() || labels.is_null() {
            return Err(null());
        }
        let (ra, rb) = (record(a), record(b));
        let ma = crop_matrix(&ra, a.source_width, a.source_height).map_err(fail)?;
        let mb = crop_matrix(&rb, b.source_width, b.source_height).map_err(fail)?;
        let act = ego_action(&ma, &mb).map_err(fail)?;
        let spec = BinningSpec {
            bins,
            ..BinningSpec::default()
        };
        spec.validate().map_err(fail)?;
        let lab = bin_action(&act, &spec);
        ptr::copy_nonoverlapping(act.as_ptr(), action, 6);
        ptr::copy_nonoverlapping(lab.as_ptr(), labels, 6);
        Ok(StecStatus::Ok)
    })
}

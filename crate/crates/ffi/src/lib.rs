//! C ABI over `clusterharm`.
//!
//! Every function returns a [`ChStatus`]; on failure the message is available
//! from [`ch_last_error`] on the same thread. Handles are opaque and must be
//! released with their `_free` function. Matrices are row-major `double`
//! buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use clusterharm::cluster::KMeansOptions;
use clusterharm::data::{load_csv, Dataset, Schema};
use clusterharm::eval::Algorithm;
use clusterharm::model_io::{fit_model, FitConfig, ModelDocument};
use clusterharm::numerics::Matrix;
use clusterharm::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Numerical = 4,
    Io = 5,
    Parse = 6,
    ModelMismatch = 7,
    Protocol = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChAlgorithm {
    Combat = 1,
    ClusterCombat = 2,
    DistCombat = 3,
    DistClusterCombat = 4,
}

fn algorithm_of(code: i32) -> Result<Algorithm, Fail> {
    Ok(match code {
        c if c == ChAlgorithm::Combat as i32 => Algorithm::Combat,
        c if c == ChAlgorithm::ClusterCombat as i32 => Algorithm::ClusterCombat,
        c if c == ChAlgorithm::DistCombat as i32 => Algorithm::DistCombat,
        c if c == ChAlgorithm::DistClusterCombat as i32 => Algorithm::DistClusterCombat,
        c => return Err(Fail(ChStatus::InvalidArgument, format!("unknown algorithm code {c}"))),
    })
}

/// Options for [`ch_model_fit`]. Start from [`ch_fit_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct ChFitOptions {
    /// A `ChAlgorithm` value.
    pub algorithm: i32,
    pub n_clusters: usize,
    pub seed: u64,
    pub kmeans_restarts: usize,
    /// Nonzero floors zero residual variances instead of failing.
    pub variance_floor: i32,
    pub cluster_standardized: i32,
    pub weight_by_samples: i32,
    pub standardize_params: i32,
}

/// Opaque dataset handle.
pub struct ChDataset(Dataset);

/// Opaque model handle.
pub struct ChModel(ModelDocument);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> ChStatus {
    match e {
        Error::MissingColumn { .. }
        | Error::Schema(_)
        | Error::Parse { .. }
        | Error::NonFinite { .. }
        | Error::MissingValue { .. }
        | Error::Csv(_)
        | Error::Json(_) => ChStatus::Parse,
        Error::InvalidDataset(_) | Error::InvalidArgument(_) => ChStatus::InvalidArgument,
        Error::DimensionMismatch(_) => ChStatus::DimensionMismatch,
        Error::RankDeficient
        | Error::UnderDetermined(_)
        | Error::DegenerateFeature { .. }
        | Error::GroupTooSmall { .. }
        | Error::NotConverged { .. }
        | Error::UnknownGroup(_) => ChStatus::Numerical,
        Error::ModelMismatch(_) => ChStatus::ModelMismatch,
        Error::Protocol(_) | Error::RoundTimeout { .. } => ChStatus::Protocol,
        Error::Io { .. } => ChStatus::Io,
    }
}

struct Fail(ChStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ChStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ChStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ChStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(ChStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ChStatus::InvalidArgument, format!("`{what}` is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn ch_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ch_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a dataset from row-major `features` (n×g), `covariates` (n×p, may
/// be null when p = 0) and `n` NUL-terminated site ids.
///
/// # Safety
/// Pointers must reference buffers of the stated sizes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ch_dataset_new(
    features: *const f64,
    n: usize,
    g: usize,
    covariates: *const f64,
    p: usize,
    site_ids: *const *const c_char,
    out: *mut *mut ChDataset,
) -> ChStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let f = slice_arg(features, n * g, "features")?;
        let x = slice_arg(covariates, n * p, "covariates")?;
        if site_ids.is_null() && n > 0 {
            return Err(null("site_ids"));
        }
        let sites = (0..n)
            .map(|i| str_arg(*site_ids.add(i), "site_ids[i]").map(str::to_string))
            .collect::<Result<Vec<_>, _>>()?;
        let ds = Dataset::new(Matrix::from_vec(n, g, f.to_vec())?, Matrix::from_vec(n, p, x.to_vec())?, sites)?;
        put(out, ChDataset(ds));
        Ok(())
    })
}

/// Loads a CSV file; `schema_json` is `{"site": .., "features": [..], "covariates": [..]}`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ch_dataset_load_csv(
    path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut ChDataset,
) -> ChStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        let schema: Schema = serde_json::from_str(str_arg(schema_json, "schema_json")?).map_err(Error::from)?;
        put(out, ChDataset(load_csv(Path::new(path), &schema)?));
        Ok(())
    })
}

/// Writes the row, feature, covariate and site counts; any pointer may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn ch_dataset_shape(
    ds: *const ChDataset,
    n: *mut usize,
    g: *mut usize,
    p: *mut usize,
    sites: *mut usize,
) -> ChStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.0;
        for (ptr, v) in [(n, ds.n_samples()), (g, ds.n_features()), (p, ds.n_covariates()), (sites, ds.n_sites())] {
            if !ptr.is_null() {
                *ptr = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ch_dataset_free(ds: *mut ChDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

#[no_mangle]
pub extern "C" fn ch_fit_options_default() -> ChFitOptions {
    let d = FitConfig::default();
    ChFitOptions {
        algorithm: ChAlgorithm::Combat as i32,
        n_clusters: d.n_clusters,
        seed: d.seed,
        kmeans_restarts: d.kmeans.restarts,
        variance_floor: 0,
        cluster_standardized: 0,
        weight_by_samples: 0,
        standardize_params: 0,
    }
}

/// Fits a model on `ds`.
///
/// # Safety
/// `ds` must be a live handle, `opts` readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_model_fit(
    ds: *const ChDataset,
    opts: *const ChFitOptions,
    out: *mut *mut ChModel,
) -> ChStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.0;
        let o = *handle(opts, "opts")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let mut cfg = FitConfig {
            algorithm: algorithm_of(o.algorithm)?,
            n_clusters: o.n_clusters,
            seed: o.seed,
            kmeans: KMeansOptions {
                restarts: o.kmeans_restarts,
                ..KMeansOptions::default()
            },
            cluster_standardized: o.cluster_standardized != 0,
            standardize_params: o.standardize_params != 0,
            ..FitConfig::default()
        };
        cfg.combat.fit.variance_floor = o.variance_floor != 0;
        if o.weight_by_samples != 0 {
            cfg.weighting = clusterharm::federated::Weighting::BySamples;
        }
        put(out, ChModel(fit_model(ds, &cfg)?));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_model_load(path: *const c_char, out: *mut *mut ChModel) -> ChStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = str_arg(path, "path")?;
        put(out, ChModel(ModelDocument::load(Path::new(path))?));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ch_model_save(model: *const ChModel, path: *const c_char) -> ChStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        m.save(Path::new(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Serializes the model; release the string with [`ch_string_free`].
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ch_model_to_json(model: *const ChModel, out: *mut *mut c_char) -> ChStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CString::new(m.to_json()?).map_err(|e| Fail(ChStatus::Parse, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library.
#[no_mangle]
pub unsafe extern "C" fn ch_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

unsafe fn write_matrix(m: &Matrix, out: *mut f64, len: usize) -> Result<(), Fail> {
    let data = m.as_slice();
    if out.is_null() {
        return Err(null("out"));
    }
    if len < data.len() {
        return Err(Fail(
            ChStatus::BufferTooSmall,
            format!("output holds {len} values, {} needed", data.len()),
        ));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

/// Harmonizes rows of sites seen at fit time into `out` (n×g, row-major).
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ch_model_harmonize(
    model: *const ChModel,
    ds: *const ChDataset,
    out: *mut f64,
    len: usize,
) -> ChStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ds = &handle(ds, "ds")?.0;
        write_matrix(&m.harmonize(ds)?.features, out, len)
    })
}

/// Harmonizes rows of unseen sites without modifying the model. Only the
/// cluster variants support this.
///
/// # Safety
/// Handles must be live; `out` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn ch_model_onboard(
    model: *const ChModel,
    ds: *const ChDataset,
    out: *mut f64,
    len: usize,
) -> ChStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let ds = &handle(ds, "ds")?.0;
        write_matrix(&m.onboard(ds)?.features, out, len)
    })
}

/// # Safety
/// `model` must be null or a handle from this library, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ch_model_free(model: *mut ChModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

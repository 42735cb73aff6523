//! C ABI over the `bulkdiff` estimators.
//!
//! Fields and caches are opaque heap handles released with their `*_free`
//! function. Every fallible call returns a [`BdStatus`]; on failure the
//! message is kept per thread and read back with
//! [`bd_last_error_message`]. Panics never cross the boundary.
//!
//! The header `include/bulkdiff.h` is generated from this file at build time.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::sync::Arc;

use bulkdiff::conductance::{Conductance, ConstantField, CrowdingField, SmoothPairField};
use bulkdiff::config::RunConfig;
use bulkdiff::corrector_cache::CorrectorCache;
use bulkdiff::estimator::{DeltaMethod, Estimator, ExteriorMode, McEstimate, McSettings};
use bulkdiff::report::{csv_string, run_estimate};
use bulkdiff::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    InvalidInput = 2,
    InvariantViolation = 3,
    /// Solver, truncation or extrapolation did not converge.
    Unconverged = 4,
    /// The grid exceeds the unknown budget.
    Budget = 5,
    Io = 6,
    /// An internal panic was caught.
    Internal = 7,
}

/// How the exterior of the box is integrated.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdExterior {
    Sampled = 0,
    Quadrature = 1,
    Empty = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BdDeltaMethod {
    Definition = 0,
    Representation = 1,
}

/// Estimation settings; start from [`bd_settings_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BdSettings {
    pub n_outer: usize,
    /// Particle-count truncation; 0 picks it from `tail_tol`.
    pub n_max: usize,
    pub h: f64,
    pub tol: f64,
    pub seed: u64,
    pub tail_tol: f64,
    /// Nonzero enables Richardson extrapolation in `h`.
    pub richardson: i32,
    pub exterior: BdExterior,
    /// Quadrature nodes per collar side (quadrature exteriors only).
    pub nodes_per_side: usize,
    /// Largest exterior point count (quadrature exteriors only).
    pub max_count: usize,
    pub unknown_budget: usize,
    pub collar_nodes: usize,
}

/// A scalar estimate with provenance.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BdEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_outer: usize,
    pub n_max: usize,
    pub tail: f64,
    pub h: f64,
    pub seed: u64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BdCacheStats {
    pub hits: u64,
    pub misses: u64,
    pub bytes: u64,
    pub entries: u64,
}

/// Opaque conductance field.
pub struct BdField {
    inner: Arc<dyn Conductance>,
}

/// Opaque corrector cache; safe to share between threads.
pub struct BdCache {
    inner: CorrectorCache,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls were replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BdStatus {
    match e {
        Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::Config(_) | Error::MissingSubset(_) => {
            BdStatus::InvalidInput
        }
        Error::InvariantViolation(_) => BdStatus::InvariantViolation,
        Error::SolverDidNotConverge { .. } | Error::TruncationTail { .. } | Error::Unconverged(_) => BdStatus::Unconverged,
        Error::MemoryBudget { .. } => BdStatus::Budget,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::CorruptEntry { .. } => BdStatus::Io,
    }
}

struct Fail(BdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BdStatus::NullArgument, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            BdStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len == 0 || len > 3 {
        return Err(Fail(BdStatus::InvalidInput, format!("{what} must have 1 to 3 entries, got {len}")));
    }
    // SAFETY: caller guarantees `p` points to `len` readable doubles
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

unsafe fn handles<'a>(field: *const BdField, cache: *const BdCache) -> Result<(&'a BdField, &'a BdCache), Fail> {
    // SAFETY: non-null handles come from the matching constructors
    let f = unsafe { field.as_ref() }.ok_or_else(|| null("field"))?;
    let c = unsafe { cache.as_ref() }.ok_or_else(|| null("cache"))?;
    Ok((f, c))
}

unsafe fn settings(s: *const BdSettings) -> Result<McSettings, Fail> {
    // SAFETY: caller passes a valid settings struct or null
    let s = unsafe { s.as_ref() }.ok_or_else(|| null("settings"))?;
    let exterior = match s.exterior {
        BdExterior::Sampled => ExteriorMode::Sampled,
        BdExterior::Empty => ExteriorMode::Empty,
        BdExterior::Quadrature => ExteriorMode::Quadrature { nodes_per_side: s.nodes_per_side, max_count: s.max_count },
    };
    if !(s.h > 0.0 && s.h <= 0.5) || s.n_outer == 0 || s.collar_nodes == 0 {
        return Err(Fail(BdStatus::InvalidInput, format!("settings out of range: h={}, n_outer={}", s.h, s.n_outer)));
    }
    Ok(McSettings {
        n_outer: s.n_outer,
        n_max: (s.n_max > 0).then_some(s.n_max),
        h: s.h,
        tol: s.tol,
        seed: s.seed,
        tail_tol: s.tail_tol,
        richardson: s.richardson != 0,
        exterior,
        unknown_budget: s.unknown_budget,
        collar_nodes: s.collar_nodes,
    })
}

fn write_estimate(out: *mut BdEstimate, e: &McEstimate) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    let v = BdEstimate { value: e.value, stderr: e.stderr, n_outer: e.n_outer, n_max: e.n_max, tail: e.tail, h: e.h, seed: e.seed };
    // SAFETY: checked non-null; caller provides writable storage
    unsafe { out.write(v) };
    Ok(())
}

fn put_handle<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    // SAFETY: checked non-null
    unsafe { out.write(Box::into_raw(Box::new(value))) };
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes, 0 if none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn bd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            // SAFETY: caller guarantees `len` writable bytes at `buf`
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr().cast::<c_char>(), buf, n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Fills `out` with the library defaults.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_settings_default(out: *mut BdSettings) -> BdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let d = McSettings::default();
        let s = BdSettings {
            n_outer: d.n_outer,
            n_max: d.n_max.unwrap_or(0),
            h: d.h,
            tol: d.tol,
            seed: d.seed,
            tail_tol: d.tail_tol,
            richardson: d.richardson as i32,
            exterior: BdExterior::Sampled,
            nodes_per_side: 4,
            max_count: 2,
            unknown_budget: d.unknown_budget,
            collar_nodes: d.collar_nodes,
        };
        // SAFETY: checked non-null
        unsafe { out.write(s) };
        Ok(())
    })
}

/// `a = c Id` with ellipticity bound `lambda`.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_field_constant(c: f64, lambda: f64, out: *mut *mut BdField) -> BdStatus {
    guard(|| put_handle(out, BdField { inner: Arc::new(ConstantField::new(c, lambda)?) }))
}

/// Conductance `lambda` when another particle is within `r`, else 1.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_field_crowding(lambda: f64, r: f64, out: *mut *mut BdField) -> BdStatus {
    guard(|| put_handle(out, BdField { inner: Arc::new(CrowdingField::new(lambda, r)?) }))
}

/// Smooth pair-interaction field with bound `lambda`.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_field_smooth_pair(lambda: f64, out: *mut *mut BdField) -> BdStatus {
    guard(|| put_handle(out, BdField { inner: Arc::new(SmoothPairField::new(lambda)?) }))
}

/// # Safety
/// `field` must be null or a handle from a `bd_field_*` constructor, freed once.
#[no_mangle]
pub unsafe extern "C" fn bd_field_free(field: *mut BdField) {
    if !field.is_null() {
        // SAFETY: handle came from Box::into_raw
        drop(unsafe { Box::from_raw(field) });
    }
}

/// In-memory cache with an LRU byte budget.
///
/// # Safety
/// `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_cache_new(budget_bytes: usize, out: *mut *mut BdCache) -> BdStatus {
    guard(|| put_handle(out, BdCache { inner: CorrectorCache::in_memory(budget_bytes) }))
}

/// Cache persisted under directory `dir` (UTF-8 path).
///
/// # Safety
/// `dir` must be null or a NUL-terminated string; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_cache_open(dir: *const c_char, budget_bytes: usize, out: *mut *mut BdCache) -> BdStatus {
    guard(|| {
        if dir.is_null() {
            return Err(null("dir"));
        }
        // SAFETY: caller passes a NUL-terminated string
        let dir = unsafe { CStr::from_ptr(dir) }
            .to_str()
            .map_err(|_| Fail(BdStatus::InvalidInput, "dir is not UTF-8".into()))?;
        put_handle(out, BdCache { inner: CorrectorCache::with_dir(dir, budget_bytes)? })
    })
}

/// # Safety
/// `cache` must be null or a handle from `bd_cache_new`/`bd_cache_open`, freed once.
#[no_mangle]
pub unsafe extern "C" fn bd_cache_free(cache: *mut BdCache) {
    if !cache.is_null() {
        // SAFETY: handle came from Box::into_raw
        drop(unsafe { Box::from_raw(cache) });
    }
}

/// # Safety
/// `cache` must be a live handle; `out` null or writable.
#[no_mangle]
pub unsafe extern "C" fn bd_cache_stats(cache: *const BdCache, out: *mut BdCacheStats) -> BdStatus {
    guard(|| {
        // SAFETY: live handle or null
        let c = unsafe { cache.as_ref() }.ok_or_else(|| null("cache"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = c.inner.stats();
        // SAFETY: checked non-null
        unsafe { out.write(BdCacheStats { hits: s.hits, misses: s.misses, bytes: s.bytes, entries: s.entries }) };
        Ok(())
    })
}

/// Dual quantity `ν*(q)` on the cube of level `m`; `q` has `d` entries.
///
/// # Safety
/// Handles must be live; `q` must point to `d` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_nu_star(
    field: *const BdField,
    cache: *const BdCache,
    m: u32,
    q: *const f64,
    d: usize,
    rho0: f64,
    settings_ptr: *const BdSettings,
    out: *mut BdEstimate,
) -> BdStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantees
        let (f, c) = unsafe { handles(field, cache) }?;
        let q = unsafe { slice(q, d, "q") }?;
        let mc = unsafe { settings(settings_ptr) }?;
        let e = Estimator::new(f.inner.clone(), &c.inner).nu_star(m, q, rho0, &mc)?;
        write_estimate(out, &e)
    })
}

/// Primal quantity `ν(p)`.
///
/// # Safety
/// As for [`bd_nu_star`].
#[no_mangle]
pub unsafe extern "C" fn bd_nu(
    field: *const BdField,
    cache: *const BdCache,
    m: u32,
    p: *const f64,
    d: usize,
    rho0: f64,
    settings_ptr: *const BdSettings,
    out: *mut BdEstimate,
) -> BdStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantees
        let (f, c) = unsafe { handles(field, cache) }?;
        let p = unsafe { slice(p, d, "p") }?;
        let mc = unsafe { settings(settings_ptr) }?;
        let e = Estimator::new(f.inner.clone(), &c.inner).nu(m, p, rho0, &mc)?;
        write_estimate(out, &e)
    })
}

/// `ā` and `ā*` as row-major `d × d` matrices, with standard errors.
///
/// # Safety
/// Handles must be live; each output must hold `d * d` doubles.
#[no_mangle]
pub unsafe extern "C" fn bd_abar(
    field: *const BdField,
    cache: *const BdCache,
    d: usize,
    m: u32,
    rho0: f64,
    settings_ptr: *const BdSettings,
    abar: *mut f64,
    abar_star: *mut f64,
    abar_err: *mut f64,
    abar_star_err: *mut f64,
) -> BdStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantees
        let (f, c) = unsafe { handles(field, cache) }?;
        let mc = unsafe { settings(settings_ptr) }?;
        if !(1..=3).contains(&d) {
            return Err(Fail(BdStatus::InvalidInput, format!("d must be 1, 2 or 3, got {d}")));
        }
        let outs = [abar, abar_star, abar_err, abar_star_err];
        if outs.iter().any(|p| p.is_null()) {
            return Err(null("matrix output"));
        }
        let (a, s) = Estimator::new(f.inner.clone(), &c.inner).abar_matrices(d, m, rho0, &mc)?;
        for (dst, mat) in outs.into_iter().zip([&a.value, &s.value, &a.stderr, &s.stderr]) {
            for i in 0..d {
                for j in 0..d {
                    // SAFETY: caller provides d*d doubles at each output
                    unsafe { *dst.add(i * d + j) = mat.get(i.min(j), i.max(j)) };
                }
            }
        }
        Ok(())
    })
}

/// `Δ^ρ_m = q·((ā*_{ρ₀+ρ})⁻¹ - (ā*_{ρ₀})⁻¹)q` (d = 1).
///
/// # Safety
/// As for [`bd_nu_star`].
#[no_mangle]
pub unsafe extern "C" fn bd_delta_rho(
    field: *const BdField,
    cache: *const BdCache,
    m: u32,
    q: *const f64,
    d: usize,
    rho0: f64,
    rho: f64,
    method: BdDeltaMethod,
    settings_ptr: *const BdSettings,
    out: *mut BdEstimate,
) -> BdStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantees
        let (f, c) = unsafe { handles(field, cache) }?;
        let q = unsafe { slice(q, d, "q") }?;
        let mc = unsafe { settings(settings_ptr) }?;
        let method = match method {
            BdDeltaMethod::Definition => DeltaMethod::Definition,
            BdDeltaMethod::Representation => DeltaMethod::Representation,
        };
        let e = Estimator::new(f.inner.clone(), &c.inner).delta_rho(m, q, rho0, rho, method, &mc)?;
        write_estimate(out, &e)
    })
}

/// Expansion coefficient `c_{k,m}` for `1 ≤ k ≤ 3` (d = 1).
///
/// # Safety
/// As for [`bd_nu_star`].
#[no_mangle]
pub unsafe extern "C" fn bd_c_km(
    field: *const BdField,
    cache: *const BdCache,
    m: u32,
    q: *const f64,
    d: usize,
    rho0: f64,
    k: usize,
    settings_ptr: *const BdSettings,
    out: *mut BdEstimate,
) -> BdStatus {
    guard(|| {
        // SAFETY: forwarded caller guarantees
        let (f, c) = unsafe { handles(field, cache) }?;
        let q = unsafe { slice(q, d, "q") }?;
        let mc = unsafe { settings(settings_ptr) }?;
        let r = Estimator::new(f.inner.clone(), &c.inner).c_km(m, q, rho0, k, &mc)?;
        write_estimate(out, &r.value)
    })
}

/// Runs a TOML run config and returns the CSV report in `*csv_out`, to be
/// released with [`bd_string_free`].
///
/// # Safety
/// `config_toml` must be a NUL-terminated string; `cache` live; `csv_out` writable.
#[no_mangle]
pub unsafe extern "C" fn bd_run_config(config_toml: *const c_char, cache: *const BdCache, csv_out: *mut *mut c_char) -> BdStatus {
    guard(|| {
        if config_toml.is_null() {
            return Err(null("config_toml"));
        }
        if csv_out.is_null() {
            return Err(null("csv_out"));
        }
        // SAFETY: live handle or null
        let c = unsafe { cache.as_ref() }.ok_or_else(|| null("cache"))?;
        // SAFETY: NUL-terminated per contract
        let text = unsafe { CStr::from_ptr(config_toml) }
            .to_str()
            .map_err(|_| Fail(BdStatus::InvalidInput, "config is not UTF-8".into()))?;
        let cfg = RunConfig::from_toml(text)?;
        let out = run_estimate(&cfg, &c.inner)?;
        let csv = csv_string(&out.rows)?;
        let s = CString::new(csv).map_err(|_| Fail(BdStatus::Internal, "CSV contains a NUL byte".into()))?;
        // SAFETY: checked non-null
        unsafe { csv_out.write(s.into_raw()) };
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn bd_string_free(s: *mut c_char) {
    if !s.is_null() {
        // SAFETY: came from CString::into_raw
        drop(unsafe { CString::from_raw(s) });
    }
}

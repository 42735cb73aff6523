use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use bulkdiff_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { bd_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0, "an error message is set");
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

fn settings() -> BdSettings {
    let mut s = std::mem::MaybeUninit::<BdSettings>::uninit();
    assert_eq!(unsafe { bd_settings_default(s.as_mut_ptr()) }, BdStatus::Ok);
    let mut s = unsafe { s.assume_init() };
    s.h = 0.25;
    s
}

struct Handles {
    field: *mut BdField,
    cache: *mut BdCache,
}

impl Handles {
    fn constant(c: f64) -> Self {
        let mut field = ptr::null_mut();
        let mut cache = ptr::null_mut();
        assert_eq!(unsafe { bd_field_constant(c, 2.0, &mut field) }, BdStatus::Ok);
        assert_eq!(unsafe { bd_cache_new(1 << 26, &mut cache) }, BdStatus::Ok);
        Self { field, cache }
    }
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            bd_field_free(self.field);
            bd_cache_free(self.cache);
        }
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(bd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn constant_field_nu_star_is_exact() {
    let h = Handles::constant(2.0);
    let s = settings();
    let q = [1.0];
    let mut out = BdEstimate::default();
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, &s, &mut out) };
    assert_eq!(st, BdStatus::Ok);
    assert!((out.value - 0.25).abs() <= out.tail + 1e-6, "{out:?}");

    let mut p = BdEstimate::default();
    let st = unsafe { bd_nu(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, &s, &mut p) };
    assert_eq!(st, BdStatus::Ok);
    assert!((p.value - 1.0).abs() <= p.tail + 1e-6, "{p:?}");
}

#[test]
fn abar_fills_row_major_matrices() {
    let h = Handles::constant(1.5);
    let s = settings();
    let mut a = [0.0; 4];
    let mut a_star = [0.0; 4];
    let mut ea = [0.0; 4];
    let mut es = [0.0; 4];
    let st = unsafe {
        bd_abar(h.field, h.cache, 2, 0, 0.5, &s, a.as_mut_ptr(), a_star.as_mut_ptr(), ea.as_mut_ptr(), es.as_mut_ptr())
    };
    assert_eq!(st, BdStatus::Ok, "{}", last_error());
    for (i, want) in [1.5, 0.0, 0.0, 1.5].into_iter().enumerate() {
        assert!((a[i] - want).abs() < 1e-4, "ā = {a:?}");
        assert!((a_star[i] - want).abs() < 1e-4, "ā* = {a_star:?}");
    }
    assert_eq!(a[1], a[2]);
}

#[test]
fn constant_field_has_no_density_dependence() {
    let h = Handles::constant(1.0);
    let s = settings();
    let q = [1.0];
    let mut out = BdEstimate::default();
    for method in [BdDeltaMethod::Definition, BdDeltaMethod::Representation] {
        let st = unsafe { bd_delta_rho(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, 0.1, method, &s, &mut out) };
        assert_eq!(st, BdStatus::Ok, "{}", last_error());
        assert!(out.value.abs() <= out.tail + 1e-6, "{method:?}: {out:?}");
    }
    let st = unsafe { bd_c_km(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, 1, &s, &mut out) };
    assert_eq!(st, BdStatus::Ok, "{}", last_error());
    assert!(out.value.abs() <= out.tail + 1e-6, "{out:?}");
}

#[test]
fn null_arguments_are_reported() {
    let h = Handles::constant(1.0);
    let s = settings();
    let q = [1.0];
    let mut out = BdEstimate::default();
    let st = unsafe { bd_nu_star(ptr::null(), h.cache, 0, q.as_ptr(), 1, 1.0, &s, &mut out) };
    assert_eq!(st, BdStatus::NullArgument);
    assert!(last_error().contains("field"));
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, ptr::null(), 1, 1.0, &s, &mut out) };
    assert_eq!(st, BdStatus::NullArgument);
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, ptr::null(), &mut out) };
    assert_eq!(st, BdStatus::NullArgument);
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, &s, ptr::null_mut()) };
    assert_eq!(st, BdStatus::NullArgument);
    assert_eq!(unsafe { bd_field_crowding(2.0, 0.25, ptr::null_mut()) }, BdStatus::NullArgument);
    assert_eq!(unsafe { bd_settings_default(ptr::null_mut()) }, BdStatus::NullArgument);
    unsafe {
        bd_field_free(ptr::null_mut());
        bd_cache_free(ptr::null_mut());
        bd_string_free(ptr::null_mut());
    }
}

#[test]
fn invalid_inputs_map_to_codes() {
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { bd_field_crowding(0.5, 0.25, &mut field) }, BdStatus::InvalidInput);
    assert!(field.is_null());
    assert!(!last_error().is_empty());

    let h = Handles::constant(1.0);
    let mut s = settings();
    let q = [1.0];
    let mut out = BdEstimate::default();
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 4, 1.0, &s, &mut out) };
    assert_eq!(st, BdStatus::InvalidInput);
    s.h = -1.0;
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, &s, &mut out) };
    assert_eq!(st, BdStatus::InvalidInput);
    s = settings();
    s.unknown_budget = 3;
    let st = unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, &s, &mut out) };
    assert!(matches!(st, BdStatus::Budget | BdStatus::Unconverged), "{st:?}");
}

#[test]
fn errors_are_per_thread() {
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { bd_field_constant(-1.0, 2.0, &mut field) }, BdStatus::InvalidInput);
    let other = std::thread::spawn(|| unsafe { bd_last_error_message(ptr::null_mut(), 0) }).join().unwrap();
    assert_eq!(other, 0);
    assert!(unsafe { bd_last_error_message(ptr::null_mut(), 0) } > 0);
}

#[test]
fn run_config_returns_csv() {
    let h = Handles::constant(1.0);
    let toml = CString::new(
        "quantities = [\"nu_star\"]\n\
         [field]\nname = \"constant\"\nc = 2.0\nlambda = 2.0\n\
         [mc]\nh = 0.25\nn_outer = 2\nseed = 1\n",
    )
    .unwrap();
    let mut csv: *mut c_char = ptr::null_mut();
    let st = unsafe { bd_run_config(toml.as_ptr(), h.cache, &mut csv) };
    assert_eq!(st, BdStatus::Ok, "{}", last_error());
    let text = unsafe { CStr::from_ptr(csv) }.to_str().unwrap().to_owned();
    unsafe { bd_string_free(csv) };
    assert!(text.starts_with("field_id,m,rho0,quantity,value"), "{text}");
    assert!(text.contains(",nu_star,0.25"), "{text}");

    let bad = CString::new("no_such_key = 1\n").unwrap();
    let st = unsafe { bd_run_config(bad.as_ptr(), h.cache, &mut csv) };
    assert_eq!(st, BdStatus::InvalidInput);
}

#[test]
fn cache_stats_count_hits() {
    let h = Handles::constant(1.0);
    let s = settings();
    let q = [1.0];
    let mut out = BdEstimate::default();
    for _ in 0..2 {
        assert_eq!(unsafe { bd_nu_star(h.field, h.cache, 0, q.as_ptr(), 1, 1.0, &s, &mut out) }, BdStatus::Ok);
    }
    let mut stats = BdCacheStats::default();
    assert_eq!(unsafe { bd_cache_stats(h.cache, &mut stats) }, BdStatus::Ok);
    assert!(stats.misses > 0 && stats.hits >= stats.misses, "{stats:?}");
    assert!(stats.entries > 0 && stats.bytes > 0);
}

#[test]
fn header_declares_the_api() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/bulkdiff.h");
    let text = std::fs::read_to_string(&header).expect("build script writes the header");
    for name in [
        "typedef struct BdField BdField",
        "typedef struct BdCache BdCache",
        "BD_STATUS_NULL_ARGUMENT",
        "BdStatus bd_nu_star(",
        "BdStatus bd_abar(",
        "BdStatus bd_delta_rho(",
        "BdStatus bd_c_km(",
        "BdStatus bd_run_config(",
        "void bd_string_free(",
        "size_t bd_last_error_message(",
    ] {
        assert!(text.contains(name), "header lacks `{name}`");
    }

    let Ok(cc) = which_cc() else { return };
    let status = Command::new(cc)
        .args(["-fsyntax-only", "-std=c99", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
        .expect("run the C compiler");
    assert!(status.success(), "header does not compile as C99");
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}

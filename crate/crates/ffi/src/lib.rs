//! C ABI over `caloric-lab`.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns a `ClStatus`;
//! on failure `cl_last_error_message` describes the most recent error on the
//! calling thread. Panics are caught at the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use caloric_lab::capacity::{self, CapacityInstance};
use caloric_lab::heatcore;
use caloric_lab::measures::{self, Atom, DiscreteMeasure};
use caloric_lab::pargeo::ParaPoint;
use caloric_lab::stochastic::{self, DomainSpec, WalkConfig};
use caloric_lab::transport::{self, TransportInstance};
use caloric_lab::LabError;

/// Result codes shared by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClStatus {
    Ok = 0,
    /// Malformed input: bad JSON, dimension mismatch, inadmissible point.
    InvalidInput = 1,
    /// The computation itself failed: zero mass, unbounded or infeasible LP.
    Numerical = 2,
    NullPointer = 3,
    /// A panic was caught; the library state is unaffected.
    Panic = 4,
}

/// Nonnegative space-time measure.
pub struct ClMeasure(DiscreteMeasure);

/// Signed spatial measure in a bounded domain.
pub struct ClTransport(TransportInstance);

/// Thermal capacity LP instance.
pub struct ClCapacity(CapacityInstance);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &LabError) -> ClStatus {
    if e.is_numerical() {
        ClStatus::Numerical
    } else {
        ClStatus::InvalidInput
    }
}

struct Fail(ClStatus, String);

impl From<LabError> for Fail {
    fn from(e: LabError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null() -> Fail {
    Fail(ClStatus::NullPointer, "null pointer argument".into())
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> ClStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => ClStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            ClStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(s: *const c_char) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s).to_str().map_err(|_| Fail(ClStatus::InvalidInput, "string is not UTF-8".into()))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(null)
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

fn json_err(e: serde_json::Error) -> Fail {
    Fail(ClStatus::InvalidInput, format!("JSON: {e}"))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn cl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` is null or was returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `Γ(x, t)` in `dim` space dimensions; zero for `t <= 0`.
///
/// # Safety
/// `x` points to `dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn cl_heat_kernel(x: *const f64, dim: usize, t: f64, out: *mut f64) -> ClStatus {
    guard(|| {
        let x = slice_arg(x, dim)?;
        *out_arg(out)? = heatcore::gamma_diff(x, t, &vec![0.0; dim], 0.0);
        Ok(())
    })
}

/// Builds a measure from `len` atoms; `x` holds `len * dim` coordinates row by row.
///
/// # Safety
/// Array arguments hold the stated number of doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_new(
    dim: usize,
    x: *const f64,
    t: *const f64,
    w: *const f64,
    len: usize,
    out: *mut *mut ClMeasure,
) -> ClStatus {
    guard(|| {
        let out = out_arg(out)?;
        let xs = slice_arg(x, len * dim)?;
        let ts = slice_arg(t, len)?;
        let ws = slice_arg(w, len)?;
        let atoms = (0..len).map(|i| Atom::new(&xs[i * dim..(i + 1) * dim], ts[i], ws[i])).collect();
        *out = Box::into_raw(Box::new(ClMeasure(DiscreteMeasure::new(atoms)?)));
        Ok(())
    })
}

/// Parses the JSON measure format written by the CLI.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_from_json(json: *const c_char, out: *mut *mut ClMeasure) -> ClStatus {
    guard(|| {
        let out = out_arg(out)?;
        let m = DiscreteMeasure::from_json(str_arg(json)?)?;
        *out = Box::into_raw(Box::new(ClMeasure(m)));
        Ok(())
    })
}

/// Serializes a measure; release the result with `cl_string_free`.
///
/// # Safety
/// `m` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_to_json(m: *const ClMeasure, out: *mut *mut c_char) -> ClStatus {
    guard(|| {
        let m = handle(m)?;
        let out = out_arg(out)?;
        let s = CString::new(m.0.to_json()?).map_err(|e| Fail(ClStatus::InvalidInput, e.to_string()))?;
        *out = s.into_raw();
        Ok(())
    })
}

/// # Safety
/// `m` is null or a live handle, which becomes invalid.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_free(m: *mut ClMeasure) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of atoms; zero for a null handle.
///
/// # Safety
/// `m` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_len(m: *const ClMeasure) -> usize {
    m.as_ref().map_or(0, |m| m.0.len())
}

/// # Safety
/// `m` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_total_mass(m: *const ClMeasure, out: *mut f64) -> ClStatus {
    guard(|| {
        *out_arg(out)? = handle(m)?.0.total_mass();
        Ok(())
    })
}

/// `F_r(μ) = ∫ (r - ‖p‖)_+ dμ(p)`.
///
/// # Safety
/// `m` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_f_r(m: *const ClMeasure, r: f64, out: *mut f64) -> ClStatus {
    guard(|| {
        *out_arg(out)? = measures::f_r(&handle(m)?.0, r)?;
        Ok(())
    })
}

/// Blow-up `c T_{center, r}[μ]` as a new handle.
///
/// # Safety
/// `m` is a live handle; `center_x` points to `dim` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_blow_up(
    m: *const ClMeasure,
    center_x: *const f64,
    dim: usize,
    center_t: f64,
    r: f64,
    c: f64,
    out: *mut *mut ClMeasure,
) -> ClStatus {
    guard(|| {
        let m = handle(m)?;
        let out = out_arg(out)?;
        let center = ParaPoint::new(slice_arg(center_x, dim)?, center_t);
        *out = Box::into_raw(Box::new(ClMeasure(measures::blow_up(&m.0, &center, r, c)?)));
        Ok(())
    })
}

/// Transport distance `d_{C_r}(μ, ν)`.
///
/// # Safety
/// `mu` and `nu` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_measure_distance(mu: *const ClMeasure, nu: *const ClMeasure, r: f64, out: *mut f64) -> ClStatus {
    guard(|| {
        *out_arg(out)? = measures::dist_measures(&handle(mu)?.0, &handle(nu)?.0, r)?;
        Ok(())
    })
}

/// Monte Carlo caloric measure of a domain seen from `pole`. `domain_json` and
/// `walk_json` use the CLI config schema in JSON form.
///
/// # Safety
/// String arguments are NUL-terminated; `pole_x` points to `dim` doubles;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_simulate_caloric_measure(
    domain_json: *const c_char,
    pole_x: *const f64,
    dim: usize,
    pole_t: f64,
    walk_json: *const c_char,
    out: *mut *mut ClMeasure,
) -> ClStatus {
    guard(|| {
        let out = out_arg(out)?;
        let domain: DomainSpec = serde_json::from_str(str_arg(domain_json)?).map_err(json_err)?;
        let walk: WalkConfig = serde_json::from_str(str_arg(walk_json)?).map_err(json_err)?;
        let pole = ParaPoint::new(slice_arg(pole_x, dim)?, pole_t);
        let sim = stochastic::simulate_caloric_measure(&domain, &pole, &walk)?;
        *out = Box::into_raw(Box::new(ClMeasure(sim.measure)));
        Ok(())
    })
}

/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_transport_from_json(json: *const c_char, out: *mut *mut ClTransport) -> ClStatus {
    guard(|| {
        let out = out_arg(out)?;
        let inst = TransportInstance::from_json(str_arg(json)?)?;
        *out = Box::into_raw(Box::new(ClTransport(inst)));
        Ok(())
    })
}

/// # Safety
/// `p` is null or a live handle, which becomes invalid.
#[no_mangle]
pub unsafe extern "C" fn cl_transport_free(p: *mut ClTransport) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Kantorovich-Rubinstein norm of the signed measure.
///
/// # Safety
/// `p` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_transport_kr_norm(p: *const ClTransport, out: *mut f64) -> ClStatus {
    guard(|| {
        *out_arg(out)? = transport::kr_norm_dual(&handle(p)?.0)?.value;
        Ok(())
    })
}

/// Boundary transport distance between the positive and negative parts.
///
/// # Safety
/// `p` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_transport_wb1(p: *const ClTransport, out: *mut f64) -> ClStatus {
    guard(|| {
        let inst = &handle(p)?.0;
        let (a, b) = inst.jordan();
        *out_arg(out)? = transport::wb1_primal(&a, &b, &inst.domain)?.value;
        Ok(())
    })
}

/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_capacity_from_json(json: *const c_char, out: *mut *mut ClCapacity) -> ClStatus {
    guard(|| {
        let out = out_arg(out)?;
        let inst: CapacityInstance = serde_json::from_str(str_arg(json)?).map_err(json_err)?;
        inst.validate()?;
        *out = Box::into_raw(Box::new(ClCapacity(inst)));
        Ok(())
    })
}

/// # Safety
/// `p` is null or a live handle, which becomes invalid.
#[no_mangle]
pub unsafe extern "C" fn cl_capacity_free(p: *mut ClCapacity) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Optimal value of the capacity LP.
///
/// # Safety
/// `p` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cl_capacity_value(p: *const ClCapacity, out: *mut f64) -> ClStatus {
    guard(|| {
        *out_arg(out)? = capacity::thermal_capacity(&handle(p)?.0)?.value;
        Ok(())
    })
}

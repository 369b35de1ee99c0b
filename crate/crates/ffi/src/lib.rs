//! C ABI over the rpareto library.
//!
//! Every fallible call returns an [`RpStatus`]; on failure the message is
//! available from [`rp_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use rpareto::geometry::SiteSet;
use rpareto::inference::{fit, gradient_score, BrIntensity, FitOptions, Objective, WeightSpec};
use rpareto::rng::stream;
use rpareto::rpareto::{BrownResnick, Origin, ParetoEpisode, RiskFunctional};
use rpareto::variogram::{theoretical_chi, Family, VariogramModel};
use rpareto::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NotPsd = 3,
    UnsupportedRisk = 4,
    NonDifferentiableWeight = 5,
    RejectionExhausted = 6,
    NoConvergence = 7,
    Degenerate = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpFamily {
    Power = 0,
    BoundedExponential = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RpObjective {
    LogLik = 0,
    GradScore = 1,
}

/// Result of [`rp_fit`].
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct RpFitResult {
    pub beta: f64,
    pub alpha: f64,
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Opaque site set.
pub struct RpSites(SiteSet);

/// Opaque Brown–Resnick field: variogram plus sites, with cached factors.
pub struct RpField(BrownResnick);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(e: &Error) -> RpStatus {
    match e {
        Error::NotPsd { .. } => RpStatus::NotPsd,
        Error::UnsupportedRiskForMle(_) => RpStatus::UnsupportedRisk,
        Error::NonDifferentiableWeight { .. } => RpStatus::NonDifferentiableWeight,
        Error::RejectionExhausted { .. } => RpStatus::RejectionExhausted,
        Error::NoConvergence { .. } => RpStatus::NoConvergence,
        Error::Degenerate(_) | Error::TooFewExceedances { .. } => RpStatus::Degenerate,
        Error::Io { .. } => RpStatus::Io,
        _ => RpStatus::InvalidArgument,
    }
}

enum Fail {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            RpStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            RpStatus::NullPointer
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            RpStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn text(p: *const c_char, what: &'static str) -> Result<String, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(str::to_string)
        .map_err(|_| Fail::Core(Error::Invalid(format!("{what} is not valid UTF-8"))))
}

fn model(family: RpFamily, beta: f64, alpha: f64) -> Result<VariogramModel, Error> {
    let family = match family {
        RpFamily::Power => Family::Power,
        RpFamily::BoundedExponential => Family::BoundedExponential,
    };
    VariogramModel::new(family, beta, alpha)
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn rp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Sites from `n` coordinate pairs `xy = [x0, y0, x1, y1, ...]`, ids `1..n`.
///
/// # Safety
/// `xy` must point to `2n` doubles and `out_sites` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_sites_new(xy: *const f64, n: usize, out_sites: *mut *mut RpSites) -> RpStatus {
    guard(|| {
        let out_sites = out(out_sites, "out_sites")?;
        let xy = slice(xy, 2 * n, "xy")?;
        let sites = SiteSet::from_coords(xy.chunks(2).map(|c| [c[0], c[1]]).collect())?;
        *out_sites = Box::into_raw(Box::new(RpSites(sites)));
        Ok(())
    })
}

/// Unit-spaced `nx × ny` grid, x varying fastest.
///
/// # Safety
/// `out_sites` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_sites_grid(nx: usize, ny: usize, out_sites: *mut *mut RpSites) -> RpStatus {
    guard(|| {
        let out_sites = out(out_sites, "out_sites")?;
        *out_sites = Box::into_raw(Box::new(RpSites(SiteSet::grid(nx, ny)?)));
        Ok(())
    })
}

/// Number of sites, 0 for a null handle.
///
/// # Safety
/// `sites` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_sites_len(sites: *const RpSites) -> usize {
    sites.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `sites` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rp_sites_free(sites: *mut RpSites) {
    if !sites.is_null() {
        drop(Box::from_raw(sites));
    }
}

/// Semivariogram `γ(h)`.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_semivariogram(family: RpFamily, beta: f64, alpha: f64, h: f64, out_value: *mut f64) -> RpStatus {
    guard(|| {
        let o = out(out_value, "out_value")?;
        *o = model(family, beta, alpha)?.semivariogram(h)?;
        Ok(())
    })
}

/// Extremogram `χ(h) = 2Φ(−√(γ(h)/2))`.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_chi(family: RpFamily, beta: f64, alpha: f64, h: f64, out_value: *mut f64) -> RpStatus {
    guard(|| {
        let o = out(out_value, "out_value")?;
        *o = theoretical_chi(&model(family, beta, alpha)?, h)?;
        Ok(())
    })
}

/// Builds a field on a copy of `sites`.
///
/// # Safety
/// `sites` must be a live handle and `out_field` writable.
#[no_mangle]
pub unsafe extern "C" fn rp_field_new(
    sites: *const RpSites,
    family: RpFamily,
    beta: f64,
    alpha: f64,
    out_field: *mut *mut RpField,
) -> RpStatus {
    guard(|| {
        let o = out(out_field, "out_field")?;
        let sites = sites.as_ref().ok_or(Fail::Null("sites"))?;
        let field = BrownResnick::new(model(family, beta, alpha)?, sites.0.clone())?;
        *o = Box::into_raw(Box::new(RpField(field)));
        Ok(())
    })
}

/// Number of sites of the field, 0 for a null handle.
///
/// # Safety
/// `field` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn rp_field_dim(field: *const RpField) -> usize {
    field.as_ref().map_or(0, |f| f.0.dim())
}

/// # Safety
/// `field` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn rp_field_free(field: *mut RpField) {
    if !field.is_null() {
        drop(Box::from_raw(field));
    }
}

/// Draws `n` episodes for the risk spec (`mean`, `max`, `site:<id>`, ...).
/// Episode `i` uses random stream `i` of `seed`, so results do not depend on
/// `n` or on threading. Writes radii to `out_r[n]` and fields row-major to
/// `out_z[n × D]`.
///
/// # Safety
/// `risk` must be a NUL-terminated string; output buffers must hold the
/// stated number of doubles.
#[no_mangle]
pub unsafe extern "C" fn rp_field_sample(
    field: *const RpField,
    risk: *const c_char,
    seed: u64,
    n: usize,
    max_iters: u64,
    out_r: *mut f64,
    out_z: *mut f64,
) -> RpStatus {
    guard(|| {
        let field = &field.as_ref().ok_or(Fail::Null("field"))?.0;
        let d = field.dim();
        let riskf = RiskFunctional::parse(&text(risk, "risk")?, field.sites())?;
        let out_r = slice_mut(out_r, n, "out_r")?;
        let out_z = slice_mut(out_z, n * d, "out_z")?;
        for i in 0..n {
            let (ep, _) = field.sample_episode(&riskf, &mut stream(seed, i as u64), max_iters)?;
            out_r[i] = ep.r;
            out_z[i * d..(i + 1) * d].copy_from_slice(&ep.z);
        }
        Ok(())
    })
}

/// Log of the exponent-measure intensity at `z[D]`.
///
/// # Safety
/// `z` must hold `D` doubles and `out_value` be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_log_intensity(field: *const RpField, z: *const f64, out_value: *mut f64) -> RpStatus {
    guard(|| {
        let field = &field.as_ref().ok_or(Fail::Null("field"))?.0;
        let o = out(out_value, "out_value")?;
        let z = slice(z, field.dim(), "z")?;
        *o = BrIntensity::new(field.model(), field.sites(), 0)?.log_intensity(z)?;
        Ok(())
    })
}

fn episodes(z: &[f64], d: usize, riskf: &RiskFunctional) -> Result<Vec<ParetoEpisode>, Error> {
    z.chunks(d)
        .enumerate()
        .map(|(i, row)| ParetoEpisode::from_field((i + 1).to_string(), row.to_vec(), riskf, Origin::Empirical))
        .collect()
}

/// Gradient score of `n` episodes `z[n × D]` (row-major) under the field,
/// with marginal weights `1 − exp(−(z/u − 1))` above `u_weight`.
///
/// # Safety
/// `z` must hold `n × D` doubles and `out_value` be writable.
#[no_mangle]
pub unsafe extern "C" fn rp_gradient_score(
    field: *const RpField,
    z: *const f64,
    n: usize,
    u_weight: f64,
    out_value: *mut f64,
) -> RpStatus {
    guard(|| {
        let field = &field.as_ref().ok_or(Fail::Null("field"))?.0;
        let o = out(out_value, "out_value")?;
        let d = field.dim();
        let eps = episodes(slice(z, n * d, "z")?, d, &RiskFunctional::Max)?;
        let br = BrIntensity::new(field.model(), field.sites(), 0)?;
        *o = gradient_score(&eps, &br, &WeightSpec::Marginal { u: u_weight })?;
        Ok(())
    })
}

/// Fits the variogram to `n` episodes `z[n × D]` exceeding 1 under `risk`.
/// Gradient-score fits use the command-line default weights for the risk.
///
/// # Safety
/// `sites` must be a live handle, `risk` a NUL-terminated string, `z` must
/// hold `n × D` doubles and `out_result` be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn rp_fit(
    sites: *const RpSites,
    z: *const f64,
    n: usize,
    risk: *const c_char,
    objective: RpObjective,
    family: RpFamily,
    init_beta: f64,
    init_alpha: f64,
    out_result: *mut RpFitResult,
) -> RpStatus {
    guard(|| {
        let sites = &sites.as_ref().ok_or(Fail::Null("sites"))?.0;
        let o = out(out_result, "out_result")?;
        let riskf = RiskFunctional::parse(&text(risk, "risk")?, sites)?;
        let d = sites.len();
        let eps = episodes(slice(z, n * d, "z")?, d, &riskf)?;
        let weights = match riskf {
            RiskFunctional::Site(_) | RiskFunctional::Max => WeightSpec::default(),
            ref other => WeightSpec::risk(other, 1.0)?,
        };
        let opts = FitOptions {
            family: match family {
                RpFamily::Power => Family::Power,
                RpFamily::BoundedExponential => Family::BoundedExponential,
            },
            weights,
            riskf,
            ..FitOptions::default()
        };
        let objective = match objective {
            RpObjective::LogLik => Objective::LogLik,
            RpObjective::GradScore => Objective::GradScore,
        };
        let r = fit(&eps, sites, (init_beta, init_alpha), objective, &opts)?;
        *o = RpFitResult {
            beta: r.beta,
            alpha: r.alpha,
            objective_value: r.objective_value,
            iterations: r.iterations,
            converged: r.converged,
        };
        Ok(())
    })
}

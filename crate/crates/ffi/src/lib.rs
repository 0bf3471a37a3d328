//! C ABI over the `bruf` filters.
//!
//! Objects cross the boundary as opaque handles created by `*_new` or by an
//! update and released with the matching `*_free`. Every fallible function
//! returns a [`BrufStatus`]; on failure [`bruf_last_error`] describes the
//! problem for the calling thread. Matrices are row-major `double` arrays.
//! Ensemble states are member-major: member `j` occupies `dim` consecutive
//! values starting at `j * dim`.

use std::cell::RefCell;
use std::ffi::{c_char, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bruf::belief::{empirical_mean, Ensemble, GaussianBelief, LinearMeasurement, MeasurementModel};
use bruf::ensemble::{bruenkf_update, ec_bruenkf_update, enkf_update, EnsembleOptions, EnsembleUpdateConfig};
use bruf::error::FilterError;
use bruf::models::{PowerMeasurement, RangeMeasurement, RuvMeasurement};
use bruf::recursive::{
    bruf_update, ec_bruf_update, iekf_update, kalman_update, ErrorController, IekfSettings,
    StepSchedule,
};
use bruf::rng::{rng_from_seed, FilterRng};
use nalgebra::{DMatrix, DVector};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrufStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    /// A step controller, line search or integration failed.
    NumericalFailure = 5,
    BufferTooSmall = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 99,
}

/// Pseudo-time schedule of the fixed-step recursive updates.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BrufSchedule {
    Uniform = 0,
    Variable = 1,
}

pub struct BrufBelief(GaussianBelief);
pub struct BrufEnsemble(Ensemble);
pub struct BrufRng(FilterRng);
pub struct BrufModel(Box<dyn MeasurementModel + Send + Sync>);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

fn status_of(e: &FilterError) -> BrufStatus {
    match e {
        FilterError::Dimension(_) | FilterError::InsufficientSamples { .. } => BrufStatus::DimensionMismatch,
        FilterError::NotPositiveDefinite { .. }
        | FilterError::NotPositiveSemiDefinite { .. }
        | FilterError::NotInvertible(_)
        | FilterError::InnovationNotPd { .. }
        | FilterError::MemberInnovationNotPd { .. }
        | FilterError::FlowFactorization { .. } => BrufStatus::NotPositiveDefinite,
        FilterError::InvalidInflation(_)
        | FilterError::InvalidParameter(_)
        | FilterError::InvalidDirectionCosines(_) => BrufStatus::InvalidArgument,
        FilterError::StalledController { .. }
        | FilterError::NoDescent { .. }
        | FilterError::SingularPoint(_)
        | FilterError::Divergence { .. }
        | FilterError::NumericalUnderflow => BrufStatus::NumericalFailure,
    }
}

struct Fail(BrufStatus, String);

impl From<FilterError> for Fail {
    fn from(e: FilterError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BrufStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BrufStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BrufStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            BrufStatus::Internal
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
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

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(values: &[f64], out: *mut f64, len: usize) -> Result<(), Fail> {
    if len < values.len() {
        return Err(Fail(
            BrufStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", values.len()),
        ));
    }
    if values.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    Ok(())
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

unsafe fn measurement<'a>(model: &BrufModel, y: *const f64, y_len: usize) -> Result<DVector<f64>, Fail> {
    let y = slice(y, y_len, "y")?;
    if y.len() != model.0.measurement_dim() {
        return Err(Fail(
            BrufStatus::DimensionMismatch,
            format!("y has length {}, model measures {}", y.len(), model.0.measurement_dim()),
        ));
    }
    Ok(DVector::from_column_slice(y))
}

fn schedule(kind: BrufSchedule, n: usize) -> StepSchedule {
    match kind {
        BrufSchedule::Uniform => StepSchedule::Uniform(n),
        BrufSchedule::Variable => StepSchedule::Variable(n),
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bruf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bruf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// Beliefs ---------------------------------------------------------------------

/// Creates a Gaussian belief from a mean of length `dim` and a row-major
/// `dim × dim` covariance, which must be symmetric positive semi-definite.
///
/// # Safety
/// `mean` and `cov` must point to `dim` and `dim * dim` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_belief_new(
    dim: usize,
    mean: *const f64,
    cov: *const f64,
    out: *mut *mut BrufBelief,
) -> BrufStatus {
    guard(|| {
        if dim == 0 {
            return Err(Fail(BrufStatus::InvalidArgument, "dim must be >= 1".into()));
        }
        let mean = DVector::from_column_slice(slice(mean, dim, "mean")?);
        let cov = DMatrix::from_row_slice(dim, dim, slice(cov, dim * dim, "cov")?);
        let belief = GaussianBelief::new(mean, cov)?;
        belief.check_invariants()?;
        put(out, BrufBelief(belief))
    })
}

/// # Safety
/// `belief` must be null or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bruf_belief_free(belief: *mut BrufBelief) {
    if !belief.is_null() {
        drop(Box::from_raw(belief));
    }
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `belief` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_belief_dim(belief: *const BrufBelief) -> usize {
    belief.as_ref().map_or(0, |b| b.0.dim())
}

/// Copies the mean into `out` (capacity `len`).
///
/// # Safety
/// `belief` must be a live handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_belief_mean(belief: *const BrufBelief, out: *mut f64, len: usize) -> BrufStatus {
    guard(|| copy_out(handle(belief, "belief")?.0.mean.as_slice(), out, len))
}

/// Copies the row-major covariance into `out` (capacity `len`).
///
/// # Safety
/// `belief` must be a live handle and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_belief_cov(belief: *const BrufBelief, out: *mut f64, len: usize) -> BrufStatus {
    guard(|| copy_out(&row_major(&handle(belief, "belief")?.0.cov), out, len))
}

// Measurement models ----------------------------------------------------------

/// Linear model `y = H x + v`, `v ~ N(0, R)`, with row-major `H` (`m × n`)
/// and `R` (`m × m`).
///
/// # Safety
/// `h` and `r` must point to `m * n` and `m * m` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_linear_new(
    n: usize,
    m: usize,
    h: *const f64,
    r: *const f64,
    out: *mut *mut BrufModel,
) -> BrufStatus {
    guard(|| {
        if n == 0 || m == 0 {
            return Err(Fail(BrufStatus::InvalidArgument, "dimensions must be >= 1".into()));
        }
        let h = DMatrix::from_row_slice(m, n, slice(h, m * n, "h")?);
        let r = DMatrix::from_row_slice(m, m, slice(r, m * m, "r")?);
        put(out, BrufModel(Box::new(LinearMeasurement::new(h, r)?)))
    })
}

/// Range from the origin of a 2-D state with noise variance `noise_var`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_range_new(noise_var: f64, out: *mut *mut BrufModel) -> BrufStatus {
    guard(|| {
        if !(noise_var > 0.0) {
            return Err(Fail(BrufStatus::InvalidArgument, "noise_var must be > 0".into()));
        }
        put(out, BrufModel(Box::new(RangeMeasurement::new(noise_var))))
    })
}

/// Radar range and direction cosines of the `[x, vx, y, vy, z, vz]` state.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_ruv_new(
    sigma_r: f64,
    sigma_u: f64,
    sigma_v: f64,
    out: *mut *mut BrufModel,
) -> BrufStatus {
    guard(|| {
        if !(sigma_r > 0.0 && sigma_u > 0.0 && sigma_v > 0.0) {
            return Err(Fail(BrufStatus::InvalidArgument, "standard deviations must be > 0".into()));
        }
        put(out, BrufModel(Box::new(RuvMeasurement::new(sigma_r, sigma_u, sigma_v))))
    })
}

/// Power measurement `x_i |x_i|^(γ−1) / f^(γ−1)` of the listed state indices
/// with noise `noise_var · I`.
///
/// # Safety
/// `indices` must point to `count` readable values.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_power_new(
    n: usize,
    indices: *const usize,
    count: usize,
    scale: f64,
    gamma: f64,
    noise_var: f64,
    out: *mut *mut BrufModel,
) -> BrufStatus {
    guard(|| {
        if count == 0 || indices.is_null() {
            return Err(null("indices"));
        }
        let idx = std::slice::from_raw_parts(indices, count).to_vec();
        let r = DMatrix::identity(count, count) * noise_var;
        put(out, BrufModel(Box::new(PowerMeasurement::new(n, idx, scale, gamma, r)?)))
    })
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_free(model: *mut BrufModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_state_dim(model: *const BrufModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.state_dim())
}

/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_measurement_dim(model: *const BrufModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.measurement_dim())
}

/// Evaluates the noise-free measurement `h(x)`.
///
/// # Safety
/// `x` must hold the model's state dimension, `out` `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_model_observe(
    model: *const BrufModel,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    len: usize,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        if x_len != model.0.state_dim() {
            return Err(Fail(BrufStatus::DimensionMismatch, "x has the wrong length".into()));
        }
        let x = DVector::from_column_slice(slice(x, x_len, "x")?);
        copy_out(model.0.observe(&x).as_slice(), out, len)
    })
}

// Single-belief updates -------------------------------------------------------

/// Extended Kalman filter update.
///
/// # Safety
/// Handles must be live; `y` must hold `y_len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_kalman_update(
    prior: *const BrufBelief,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    out: *mut *mut BrufBelief,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let post = kalman_update(&handle(prior, "prior")?.0, &*model.0, &y)?;
        put(out, BrufBelief(post))
    })
}

/// Fixed-schedule recursive update with `n` steps. `steps` (nullable)
/// receives the number of steps taken.
///
/// # Safety
/// As for [`bruf_kalman_update`]; `steps` may be null.
#[no_mangle]
pub unsafe extern "C" fn bruf_recursive_update(
    prior: *const BrufBelief,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    kind: BrufSchedule,
    n: usize,
    out: *mut *mut BrufBelief,
    steps: *mut usize,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let (post, trace) = bruf_update(&handle(prior, "prior")?.0, &*model.0, &y, &schedule(kind, n))?;
        if let Some(s) = steps.as_mut() {
            *s = trace.accepted_steps;
        }
        put(out, BrufBelief(post))
    })
}

/// Recursive update with error-controlled pseudo-time steps, starting from
/// `1 / initial_steps`. `steps` (nullable) receives the accepted step count.
///
/// # Safety
/// As for [`bruf_kalman_update`]; `steps` may be null.
#[no_mangle]
pub unsafe extern "C" fn bruf_ec_update(
    prior: *const BrufBelief,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    atol: f64,
    rtol: f64,
    initial_steps: usize,
    out: *mut *mut BrufBelief,
    steps: *mut usize,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let ctrl = ErrorController {
            initial_steps,
            ..ErrorController::new(atol, rtol)
        };
        let (post, trace) = ec_bruf_update(&handle(prior, "prior")?.0, &*model.0, &y, &ctrl)?;
        if let Some(s) = steps.as_mut() {
            *s = trace.accepted_steps;
        }
        put(out, BrufBelief(post))
    })
}

/// Iterated EKF update.
///
/// # Safety
/// As for [`bruf_kalman_update`].
#[no_mangle]
pub unsafe extern "C" fn bruf_iekf_update(
    prior: *const BrufBelief,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    max_iters: usize,
    tol: f64,
    line_search: bool,
    out: *mut *mut BrufBelief,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let settings = IekfSettings {
            max_iters,
            tol,
            line_search,
        };
        let (post, _) = iekf_update(&handle(prior, "prior")?.0, &*model.0, &y, &settings)?;
        put(out, BrufBelief(post))
    })
}

// Random numbers and ensembles ------------------------------------------------

/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_rng_new(seed: u64, out: *mut *mut BrufRng) -> BrufStatus {
    guard(|| put(out, BrufRng(rng_from_seed(seed))))
}

/// # Safety
/// `rng` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_rng_free(rng: *mut BrufRng) {
    if !rng.is_null() {
        drop(Box::from_raw(rng));
    }
}

/// Draws `count` members from `belief`.
///
/// # Safety
/// Handles must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_sample(
    belief: *const BrufBelief,
    count: usize,
    rng: *mut BrufRng,
    out: *mut *mut BrufEnsemble,
) -> BrufStatus {
    guard(|| {
        let rng = handle_mut(rng, "rng")?;
        let ens = Ensemble::sample(&handle(belief, "belief")?.0, count, &mut rng.0)?;
        put(out, BrufEnsemble(ens))
    })
}

/// Builds an ensemble from `count` member-major states of length `dim`.
///
/// # Safety
/// `states` must hold `dim * count` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_new(
    dim: usize,
    count: usize,
    states: *const f64,
    out: *mut *mut BrufEnsemble,
) -> BrufStatus {
    guard(|| {
        if dim == 0 || count == 0 {
            return Err(Fail(BrufStatus::InvalidArgument, "dim and count must be >= 1".into()));
        }
        let m = DMatrix::from_column_slice(dim, count, slice(states, dim * count, "states")?);
        put(out, BrufEnsemble(Ensemble::from_matrix(m)?))
    })
}

/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_free(ens: *mut BrufEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_size(ens: *const BrufEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.0.len())
}

/// # Safety
/// `ens` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_dim(ens: *const BrufEnsemble) -> usize {
    ens.as_ref().map_or(0, |e| e.0.dim())
}

/// Copies the member-major states into `out` (capacity `len`).
///
/// # Safety
/// `ens` must be live and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_states(ens: *const BrufEnsemble, out: *mut f64, len: usize) -> BrufStatus {
    guard(|| copy_out(handle(ens, "ensemble")?.0.states().as_slice(), out, len))
}

/// Copies the ensemble mean into `out` (capacity `len`).
///
/// # Safety
/// `ens` must be live and `out` writable for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn bruf_ensemble_mean(ens: *const BrufEnsemble, out: *mut f64, len: usize) -> BrufStatus {
    guard(|| copy_out(empirical_mean(&handle(ens, "ensemble")?.0).as_slice(), out, len))
}

fn ensemble_options(perturb: bool) -> EnsembleOptions {
    EnsembleOptions {
        perturb_observations: perturb,
        record_trace: false,
        ..Default::default()
    }
}

/// Linearized EnKF update with inflation `alpha`. With `perturb` false the
/// predicted measurements are not perturbed.
///
/// # Safety
/// Handles must be live; `y` must hold `y_len` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bruf_enkf_update(
    ens: *const BrufEnsemble,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    alpha: f64,
    perturb: bool,
    rng: *mut BrufRng,
    out: *mut *mut BrufEnsemble,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let rng = handle_mut(rng, "rng")?;
        let post = enkf_update(&handle(ens, "ensemble")?.0, &*model.0, &y, alpha, ensemble_options(perturb), &mut rng.0)?;
        put(out, BrufEnsemble(post))
    })
}

/// Recursive ensemble update over `n` fixed steps.
///
/// # Safety
/// As for [`bruf_enkf_update`].
#[no_mangle]
pub unsafe extern "C" fn bruf_recursive_ensemble_update(
    ens: *const BrufEnsemble,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    kind: BrufSchedule,
    n: usize,
    alpha: f64,
    perturb: bool,
    rng: *mut BrufRng,
    out: *mut *mut BrufEnsemble,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let rng = handle_mut(rng, "rng")?;
        let cfg = EnsembleUpdateConfig {
            schedule: schedule(kind, n),
            inflation: alpha,
            options: ensemble_options(perturb),
        };
        let (post, _) = bruenkf_update(&handle(ens, "ensemble")?.0, &*model.0, &y, &cfg, &mut rng.0)?;
        put(out, BrufEnsemble(post))
    })
}

/// Recursive ensemble update with error-controlled steps. `steps` (nullable)
/// receives the accepted step count.
///
/// # Safety
/// As for [`bruf_enkf_update`]; `steps` may be null.
#[no_mangle]
pub unsafe extern "C" fn bruf_ec_ensemble_update(
    ens: *const BrufEnsemble,
    model: *const BrufModel,
    y: *const f64,
    y_len: usize,
    atol: f64,
    rtol: f64,
    alpha: f64,
    perturb: bool,
    rng: *mut BrufRng,
    out: *mut *mut BrufEnsemble,
    steps: *mut usize,
) -> BrufStatus {
    guard(|| {
        let model = handle(model, "model")?;
        let y = measurement(model, y, y_len)?;
        let rng = handle_mut(rng, "rng")?;
        let ctrl = ErrorController::new(atol, rtol);
        let (post, trace) = ec_bruenkf_update(
            &handle(ens, "ensemble")?.0,
            &*model.0,
            &y,
            &ctrl,
            alpha,
            ensemble_options(perturb),
            &mut rng.0,
        )?;
        if let Some(s) = steps.as_mut() {
            *s = trace.accepted_steps;
        }
        put(out, BrufEnsemble(post))
    })
}

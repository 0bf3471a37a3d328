//! Single-state measurement updates.
//!
//! The recursive updates split one measurement update into a sequence of EKF
//! updates, each relinearized at the current iterate and each using the
//! measurement noise inflated to `R / c_i`. For linear measurements any
//! positive coefficient set with `Σ c_i = 1` reproduces the Kalman update
//! exactly; for nonlinear measurements the iterates trace a path from the
//! prior toward the posterior mode.
//!
//! * [`kalman_update`]: one EKF step linearized at the prior mean.
//! * [`bruf_update`]: fixed schedule (uniform `c_i = 1/N` or variable
//!   `c_i = i / (N(N+1)/2)`).
//! * [`ec_bruf_update`]: adaptive pseudo-time steps chosen by an embedded
//!   explicit-midpoint error estimate.
//! * [`iekf_update`]: Gauss–Newton iterated EKF with optional backtracking.
//! * [`information_update`]: information-form update used to cross-check the
//!   covariance-form recursions.

use nalgebra::{DMatrix, DVector};

use crate::belief::{GaussianBelief, MeasurementModel};
use crate::error::{FilterError, Result};
use crate::linalg::{self, Cholesky};

/// Pseudo-time coefficient sequence for the recursive updates.
#[derive(Clone, Debug, PartialEq)]
pub enum StepSchedule {
    /// `c_i = 1/N`.
    Uniform(usize),
    /// `c_i = i / (N(N+1)/2)`.
    Variable(usize),
    /// Arbitrary positive coefficients summing to one.
    Custom(Vec<f64>),
    /// Step sizes chosen on the fly by an error controller.
    Adaptive(ErrorController),
}

impl StepSchedule {
    pub fn len(&self) -> usize {
        match self {
            StepSchedule::Uniform(n) | StepSchedule::Variable(n) => *n,
            StepSchedule::Custom(c) => c.len(),
            StepSchedule::Adaptive(_) => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_adaptive(&self) -> bool {
        matches!(self, StepSchedule::Adaptive(_))
    }

    /// Coefficients `c_1..c_N`; `None` for adaptive schedules.
    pub fn coefficients(&self) -> Option<Vec<f64>> {
        match self {
            StepSchedule::Uniform(n) => Some(vec![1.0 / *n as f64; *n]),
            StepSchedule::Variable(n) => {
                let total = variable_total(*n);
                Some((1..=*n).map(|i| i as f64 / total).collect())
            }
            StepSchedule::Custom(c) => Some(c.clone()),
            StepSchedule::Adaptive(_) => None,
        }
    }

    /// Noise multipliers `1/c_i`, computed without a round trip through `c_i`
    /// where a closed form exists (`N` for uniform, `(N(N+1)/2)/i` for variable).
    pub fn noise_scales(&self) -> Option<Vec<f64>> {
        match self {
            StepSchedule::Uniform(n) => Some(vec![*n as f64; *n]),
            StepSchedule::Variable(n) => {
                let total = variable_total(*n);
                Some((1..=*n).map(|i| total / i as f64).collect())
            }
            StepSchedule::Custom(c) => Some(c.iter().map(|ci| 1.0 / ci).collect()),
            StepSchedule::Adaptive(_) => None,
        }
    }

    /// Checks `N >= 1`, positivity, and `|Σ c_i − 1| <= 1e-12`.
    pub fn validate(&self) -> Result<()> {
        match self {
            StepSchedule::Adaptive(ctrl) => ctrl.validate(),
            _ => {
                let c = self.coefficients().unwrap_or_default();
                if c.is_empty() {
                    return Err(FilterError::InvalidParameter(
                        "schedule needs at least one step".into(),
                    ));
                }
                if let Some(bad) = c.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
                    return Err(FilterError::InvalidParameter(format!(
                        "schedule coefficient {bad} is not positive"
                    )));
                }
                let sum: f64 = c.iter().sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(FilterError::InvalidParameter(format!(
                        "schedule coefficients sum to {sum}, not 1"
                    )));
                }
                Ok(())
            }
        }
    }
}

fn variable_total(n: usize) -> f64 {
    (n * (n + 1) / 2) as f64
}

/// Embedded-midpoint step-size controller.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorController {
    pub atol: f64,
    pub rtol: f64,
    /// Safety factor `f`.
    pub safety: f64,
    pub f_min: f64,
    pub f_max: f64,
    /// Initial step count; the first trial step is `1 / initial_steps`.
    pub initial_steps: usize,
    /// Consecutive rejections tolerated at one pseudo-time.
    pub max_rejections: usize,
}

impl Default for ErrorController {
    fn default() -> Self {
        Self {
            atol: 1e-3,
            rtol: 1e-3,
            safety: 0.38_f64.sqrt(),
            f_min: 0.2,
            f_max: 6.0,
            initial_steps: 25,
            max_rejections: 50,
        }
    }
}

impl ErrorController {
    pub fn new(atol: f64, rtol: f64) -> Self {
        Self {
            atol,
            rtol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.atol > 0.0
            && self.rtol > 0.0
            && self.safety > 0.0
            && 0.0 < self.f_min
            && self.f_min < 1.0
            && 1.0 < self.f_max
            && self.initial_steps >= 1
            && self.max_rejections >= 1;
        if ok {
            Ok(())
        } else {
            Err(FilterError::InvalidParameter(format!(
                "invalid error controller {self:?}"
            )))
        }
    }

    /// Multiplier applied to `ds` after a trial with error `err`, capped at `upper`
    /// (0.9 after a rejection, `f_max` after an acceptance). `err = 0` yields `upper`.
    pub fn step_factor(&self, err: f64, upper: f64) -> f64 {
        let proposal = if err == 0.0 {
            f64::INFINITY
        } else {
            self.safety * (1.0 / err).sqrt()
        };
        upper.min(self.f_min.max(proposal))
    }

    /// Scaled RMS difference between the two stage results.
    pub fn error_norm(&self, first: &DVector<f64>, second: &DVector<f64>) -> f64 {
        let n = first.len();
        let mut acc = 0.0;
        for i in 0..n {
            let scale = self.atol + first[i].abs().max(second[i].abs()) * self.rtol;
            let d = (first[i] - second[i]) / scale;
            acc += d * d;
        }
        (acc / n as f64).sqrt()
    }
}

/// One recorded iterate of an update.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceIterate {
    /// Pseudo-time in `(0, 1]` for recursive updates; iteration number for the IEKF.
    pub t: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Iterates produced by a multi-step update, excluding the prior.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateTrace {
    pub iterates: Vec<TraceIterate>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Options shared by the single-state updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateOptions {
    /// Use the Joseph form `(I−KH)P(I−KH)ᵀ + K R Kᵀ` for the covariance.
    pub joseph: bool,
}

struct Gain {
    k: DMatrix<f64>,
    /// `P Hᵀ`; its transpose is `H P`.
    pht: DMatrix<f64>,
    h: DMatrix<f64>,
    r_scaled: DMatrix<f64>,
}

/// Kalman gain `K = P Hᵀ (H P Hᵀ + s R)⁻¹` at `x` with noise multiplier `scale`.
fn gain_at<M: MeasurementModel + ?Sized>(
    cov: &DMatrix<f64>,
    model: &M,
    x: &DVector<f64>,
    scale: f64,
    step: usize,
) -> Result<Gain> {
    let h = model.jacobian(x)?;
    gain_with_jacobian(cov, h, model.noise_cov(), scale, step)
}

fn gain_with_jacobian(
    cov: &DMatrix<f64>,
    h: DMatrix<f64>,
    r: &DMatrix<f64>,
    scale: f64,
    step: usize,
) -> Result<Gain> {
    if h.ncols() != cov.nrows() || h.nrows() != r.nrows() {
        return Err(FilterError::Dimension(format!(
            "jacobian is {}x{}, state dim {}, measurement dim {}",
            h.nrows(),
            h.ncols(),
            cov.nrows(),
            r.nrows()
        )));
    }
    let pht = cov * h.transpose();
    let r_scaled = r * scale;
    let mut s = &h * &pht + &r_scaled;
    linalg::symmetrize_mut(&mut s);
    let chol = Cholesky::new(&s).map_err(|e| match e {
        FilterError::NotPositiveDefinite { pivot } => FilterError::InnovationNotPd { step, pivot },
        other => other,
    })?;
    let k = chol.solve(&pht.transpose()).transpose();
    Ok(Gain {
        k,
        pht,
        h,
        r_scaled,
    })
}

fn updated_cov(cov: &DMatrix<f64>, g: &Gain, opts: UpdateOptions) -> DMatrix<f64> {
    let mut out = if opts.joseph {
        let n = cov.nrows();
        let a = DMatrix::<f64>::identity(n, n) - &g.k * &g.h;
        &a * cov * a.transpose() + &g.k * &g.r_scaled * g.k.transpose()
    } else {
        cov - &g.k * g.pht.transpose()
    };
    linalg::symmetrize_mut(&mut out);
    out
}

fn check_dims<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
) -> Result<()> {
    if model.state_dim() != prior.dim() {
        return Err(FilterError::Dimension(format!(
            "model state dim {} != prior dim {}",
            model.state_dim(),
            prior.dim()
        )));
    }
    if y.len() != model.measurement_dim() {
        return Err(FilterError::Dimension(format!(
            "measurement has length {}, model expects {}",
            y.len(),
            model.measurement_dim()
        )));
    }
    Ok(())
}

/// One relinearized EKF step with noise `scale · R`. Returns the state increment
/// and the updated covariance.
fn ekf_step<M: MeasurementModel + ?Sized>(
    x: &DVector<f64>,
    cov: &DMatrix<f64>,
    model: &M,
    y: &DVector<f64>,
    scale: f64,
    step: usize,
    opts: UpdateOptions,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let g = gain_at(cov, model, x, scale, step)?;
    let innovation = y - model.observe(x);
    let dx = &g.k * innovation;
    let p = updated_cov(cov, &g, opts);
    Ok((dx, p))
}

/// Standard EKF update linearized at the prior mean.
pub fn kalman_update<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    kalman_update_with(prior, model, y, UpdateOptions::default())
}

pub fn kalman_update_with<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    opts: UpdateOptions,
) -> Result<GaussianBelief> {
    check_dims(prior, model, y)?;
    let (dx, cov) = ekf_step(&prior.mean, &prior.cov, model, y, 1.0, 1, opts)?;
    Ok(GaussianBelief {
        mean: &prior.mean + dx,
        cov,
    })
}

/// Information-form update at the prior-mean linearization:
/// `P̂⁻¹ = P̄⁻¹ + Hᵀ R⁻¹ H`, `ẑ = z̄ + Hᵀ R⁻¹ ỹ` with `ỹ = y − h(x̄) + H x̄`
/// (`ỹ = y` for linear measurements).
pub fn information_update<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
) -> Result<GaussianBelief> {
    check_dims(prior, model, y)?;
    let n = prior.dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let prior_chol = Cholesky::new(&prior.cov).map_err(|_| {
        FilterError::NotInvertible("prior covariance is singular".into())
    })?;
    let prior_info = prior_chol.solve(&eye);
    let h = model.jacobian(&prior.mean)?;
    let r_chol = Cholesky::new(model.noise_cov())?;
    let rinv_h = r_chol.solve(&h);
    let y_lin = y - model.observe(&prior.mean) + &h * &prior.mean;
    let mut info = &prior_info + h.transpose() * &rinv_h;
    linalg::symmetrize_mut(&mut info);
    let z = &prior_info * &prior.mean + rinv_h.transpose() * y_lin;
    let post_chol = Cholesky::new(&info).map_err(|_| {
        FilterError::NotInvertible("posterior information matrix is singular".into())
    })?;
    let mut cov = post_chol.solve(&eye);
    linalg::symmetrize_mut(&mut cov);
    let mean = post_chol.solve_vec(&z);
    Ok(GaussianBelief { mean, cov })
}

/// Recursive update with a fixed schedule: uniform schedules give the BRUF,
/// variable schedules the variable-step BRUF.
pub fn bruf_update<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    schedule: &StepSchedule,
) -> Result<(GaussianBelief, UpdateTrace)> {
    bruf_update_with(prior, model, y, schedule, UpdateOptions::default())
}

pub fn bruf_update_with<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    schedule: &StepSchedule,
    opts: UpdateOptions,
) -> Result<(GaussianBelief, UpdateTrace)> {
    if schedule.is_adaptive() {
        return Err(FilterError::InvalidParameter(
            "bruf_update needs a fixed schedule; use ec_bruf_update".into(),
        ));
    }
    schedule.validate()?;
    let coefficients = schedule.coefficients().unwrap_or_default();
    let scales = schedule.noise_scales().unwrap_or_default();
    recursive_update_raw(prior, model, y, &coefficients, &scales, opts)
}

/// The bare recursion: step `i` uses noise `scales[i] · R` and advances the
/// recorded pseudo-time by `coefficients[i]`. No schedule validation is done,
/// which lets negative controls run with coefficient sets that do not sum to one.
pub fn recursive_update_raw<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    coefficients: &[f64],
    scales: &[f64],
    opts: UpdateOptions,
) -> Result<(GaussianBelief, UpdateTrace)> {
    check_dims(prior, model, y)?;
    if coefficients.len() != scales.len() {
        return Err(FilterError::Dimension(
            "coefficient and scale sequences differ in length".into(),
        ));
    }
    let mut x = prior.mean.clone();
    let mut cov = prior.cov.clone();
    let mut trace = UpdateTrace::default();
    let mut t = 0.0;
    for (i, (c, scale)) in coefficients.iter().zip(scales).enumerate() {
        let (dx, p) = ekf_step(&x, &cov, model, y, *scale, i + 1, opts)?;
        x = &x + dx;
        cov = p;
        t += c;
        trace.accepted_steps += 1;
        trace.iterates.push(TraceIterate {
            t,
            mean: x.clone(),
            cov: cov.clone(),
        });
    }
    Ok((GaussianBelief { mean: x, cov }, trace))
}

/// Recursive update with adaptive pseudo-time steps.
///
/// Each trial step of length `ds` takes an EKF step with noise `R/ds` from the
/// committed iterate (first stage), a second step relinearized at the first
/// stage's result, and compares the first stage against the midpoint
/// combination. Accepted steps commit the first-stage state and covariance.
pub fn ec_bruf_update<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    ctrl: &ErrorController,
) -> Result<(GaussianBelief, UpdateTrace)> {
    ec_bruf_update_with(prior, model, y, ctrl, UpdateOptions::default())
}

pub fn ec_bruf_update_with<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    ctrl: &ErrorController,
    opts: UpdateOptions,
) -> Result<(GaussianBelief, UpdateTrace)> {
    check_dims(prior, model, y)?;
    ctrl.validate()?;
    let mut x = prior.mean.clone();
    let mut cov = prior.cov.clone();
    let mut trace = UpdateTrace::default();
    let mut t = 0.0_f64;
    let mut ds = 1.0 / ctrl.initial_steps as f64;
    let mut rejections_here = 0;
    let mut step = 1;
    while t < 1.0 {
        let mut last = false;
        if t + ds >= 1.0 {
            ds = 1.0 - t;
            last = true;
        }
        let scale = 1.0 / ds;
        let (dx1, cov1) = ekf_step(&x, &cov, model, y, scale, step, opts)?;
        let x1 = &x + &dx1;
        let (dx2, _) = ekf_step(&x1, &cov1, model, y, scale, step, opts)?;
        let x2 = &x + (&dx1 + &dx2) * 0.5;
        let err = ctrl.error_norm(&x1, &x2);

        if !(err <= 1.0) {
            trace.rejected_steps += 1;
            rejections_here += 1;
            if rejections_here > ctrl.max_rejections {
                return Err(FilterError::StalledController {
                    t,
                    rejections: rejections_here,
                });
            }
            ds *= ctrl.step_factor(err, 0.9);
            continue;
        }

        t = if last { 1.0 } else { t + ds };
        x = x1;
        cov = cov1;
        step += 1;
        rejections_here = 0;
        trace.accepted_steps += 1;
        trace.iterates.push(TraceIterate {
            t,
            mean: x.clone(),
            cov: cov.clone(),
        });
        ds *= ctrl.step_factor(err, ctrl.f_max);
    }
    Ok((GaussianBelief { mean: x, cov }, trace))
}

/// Settings for [`iekf_update`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IekfSettings {
    pub max_iters: usize,
    /// Stop once consecutive iterates differ by less than this (Euclidean norm).
    pub tol: f64,
    /// Backtrack by halving until the MAP objective decreases.
    pub line_search: bool,
}

impl Default for IekfSettings {
    fn default() -> Self {
        Self {
            max_iters: 25,
            tol: 1e-9,
            line_search: false,
        }
    }
}

const MAX_HALVINGS: usize = 60;

/// MAP objective `(x−x̄)ᵀP̄⁻¹(x−x̄) + (y−h(x))ᵀR⁻¹(y−h(x))`.
pub struct MapObjective<'a, M: MeasurementModel + ?Sized> {
    prior_mean: &'a DVector<f64>,
    prior_chol: Cholesky,
    noise_chol: Cholesky,
    model: &'a M,
    y: &'a DVector<f64>,
}

impl<'a, M: MeasurementModel + ?Sized> MapObjective<'a, M> {
    pub fn new(prior: &'a GaussianBelief, model: &'a M, y: &'a DVector<f64>) -> Result<Self> {
        Ok(Self {
            prior_mean: &prior.mean,
            prior_chol: Cholesky::new(&prior.cov)?,
            noise_chol: Cholesky::new(model.noise_cov())?,
            model,
            y,
        })
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        let dx = x - self.prior_mean;
        let dy = self.y - self.model.observe(x);
        self.prior_chol.quad_form(&dx) + self.noise_chol.quad_form(&dy)
    }
}

/// Iterated EKF (Gauss–Newton on the MAP objective).
///
/// Iterate `x_{k+1} = x̄ + K_k (y − h(x_k) − H_k (x̄ − x_k))` with `H_k` at
/// `x_k`. With `line_search`, the step toward the Gauss–Newton point is
/// halved until the objective decreases. The covariance is updated once, with
/// the gain of the last linearization.
pub fn iekf_update<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    settings: &IekfSettings,
) -> Result<(GaussianBelief, UpdateTrace)> {
    iekf_update_with(prior, model, y, settings, UpdateOptions::default())
}

pub fn iekf_update_with<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    settings: &IekfSettings,
    opts: UpdateOptions,
) -> Result<(GaussianBelief, UpdateTrace)> {
    check_dims(prior, model, y)?;
    if settings.max_iters == 0 {
        return Err(FilterError::InvalidParameter("max_iters must be >= 1".into()));
    }
    let objective = if settings.line_search {
        Some(MapObjective::new(prior, model, y)?)
    } else {
        None
    };
    let mut x = prior.mean.clone();
    let mut trace = UpdateTrace::default();
    let mut last_gain: Option<Gain> = None;

    for k in 0..settings.max_iters {
        let g = gain_at(&prior.cov, model, &x, 1.0, k + 1)?;
        let residual = y - model.observe(&x) - &g.h * (&prior.mean - &x);
        let candidate = &prior.mean + &g.k * residual;

        let next = match &objective {
            None => candidate,
            Some(obj) => {
                let current = obj.eval(&x);
                match backtrack(obj, &x, &candidate, current) {
                    Some(p) => p,
                    None => {
                        let full = obj.eval(&candidate);
                        if (full - current).abs() <= 1e-12 * current.abs().max(1.0) {
                            // Objective is flat to round-off: x is already the mode.
                            trace.accepted_steps += 1;
                            trace.iterates.push(TraceIterate {
                                t: (k + 1) as f64,
                                mean: x.clone(),
                                cov: updated_cov(&prior.cov, &g, opts),
                            });
                            last_gain = Some(g);
                            break;
                        }
                        return Err(FilterError::NoDescent {
                            halvings: MAX_HALVINGS,
                        });
                    }
                }
            }
        };

        let moved = (&next - &x).norm();
        x = next;
        trace.accepted_steps += 1;
        trace.iterates.push(TraceIterate {
            t: (k + 1) as f64,
            mean: x.clone(),
            cov: updated_cov(&prior.cov, &g, opts),
        });
        last_gain = Some(g);
        if moved < settings.tol {
            break;
        }
    }

    let g = last_gain.expect("at least one iteration");
    let cov = updated_cov(&prior.cov, &g, opts);
    Ok((GaussianBelief { mean: x, cov }, trace))
}

/// Smallest `j` in `0..=MAX_HALVINGS` with `J(x + 2^-j d) < J(x)`.
fn backtrack<M: MeasurementModel + ?Sized>(
    obj: &MapObjective<'_, M>,
    x: &DVector<f64>,
    candidate: &DVector<f64>,
    current: f64,
) -> Option<DVector<f64>> {
    if obj.eval(candidate) < current {
        return Some(candidate.clone());
    }
    let d = candidate - x;
    let mut s = 0.5;
    for _ in 0..MAX_HALVINGS {
        let trial = x + &d * s;
        if obj.eval(&trial) < current {
            return Some(trial);
        }
        s *= 0.5;
    }
    None
}

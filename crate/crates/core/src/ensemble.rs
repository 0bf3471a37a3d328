//! Ensemble measurement updates.
//!
//! * [`enkf_update`]: linearized EnKF (one step, per-member Jacobians, perturbed
//!   observations, empirical covariance computed once).
//! * [`bruenkf_update`]: the recursive lifting; each of the `N` steps inflates by
//!   `α^{c_i}`, recomputes the empirical covariance and moves every member with
//!   noise `R / c_i`. Uniform schedules give the BRUEnKF, variable schedules the
//!   VS-BRUEnKF.
//! * [`ec_bruenkf_update`]: adaptive pseudo-time steps; the step error is the
//!   largest per-member error by default, or the error of the ensemble mean.
//! * [`gromov_flow_update`]: stochastic particle flow with a companion EKF.
//!
//! Randomness is drawn per member from a generator keyed by `(step, member)`,
//! so the serial and parallel member loops give identical results.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;

use crate::belief::{
    empirical_mean, inflate_about, standard_normal_vector, Ensemble, GaussianBelief,
    GaussianSampler, MeasurementModel,
};
use crate::error::{FilterError, Result};
use crate::linalg::{self, Cholesky};
use crate::recursive::{kalman_update, ErrorController, StepSchedule};
use crate::rng::{member_rng, FilterRng};

/// Options shared by the ensemble updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleOptions {
    /// Perturb predicted measurements with `γ_j ~ N(0, R)`.
    pub perturb_observations: bool,
    /// Run the member loop on the rayon pool.
    pub parallel: bool,
    /// Keep a snapshot of the ensemble after every accepted step.
    pub record_trace: bool,
    /// Error norm used by [`ec_bruenkf_update`].
    pub ec_norm: EnsembleErrorNorm,
}

/// How the adaptive ensemble update reduces member errors to one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EnsembleErrorNorm {
    /// Largest per-member scaled RMS difference.
    #[default]
    MaxMember,
    /// Scaled RMS difference of the two stage means.
    Mean,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        Self {
            perturb_observations: true,
            parallel: false,
            record_trace: true,
            ec_norm: EnsembleErrorNorm::MaxMember,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleUpdateConfig {
    pub schedule: StepSchedule,
    /// Total inflation `α >= 1`, split across steps as `α^{c_i}`.
    pub inflation: f64,
    pub options: EnsembleOptions,
}

impl EnsembleUpdateConfig {
    pub fn new(schedule: StepSchedule, inflation: f64) -> Self {
        Self {
            schedule,
            inflation,
            options: EnsembleOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_inflation(self.inflation)?;
        self.schedule.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GromovConfig {
    /// Number of flow steps `N`; the pseudo-time step is `1/N`.
    pub n_steps: usize,
    /// Added to the companion covariance at every prediction.
    pub companion_process_noise: DMatrix<f64>,
    pub resample_after_update: bool,
    /// Scale of the diffusion term; 0 gives the deterministic drift-only flow.
    pub diffusion_scale: f64,
    /// Use the `n×n` symmetric square root of `Q(λ)` for the diffusion instead of
    /// the `n×m` factor `K_λ L_R`; both give the same distribution.
    pub symmetric_diffusion: bool,
    pub parallel: bool,
}

impl GromovConfig {
    pub fn new(n_steps: usize, companion_process_noise: DMatrix<f64>) -> Self {
        Self {
            n_steps,
            companion_process_noise,
            resample_after_update: true,
            diffusion_scale: 1.0,
            symmetric_diffusion: false,
            parallel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleSnapshot {
    pub t: f64,
    pub ensemble: Ensemble,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnsembleTrace {
    pub snapshots: Vec<EnsembleSnapshot>,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

fn check_inflation(alpha: f64) -> Result<()> {
    if !(alpha >= 1.0) || !alpha.is_finite() {
        return Err(FilterError::InvalidInflation(alpha));
    }
    Ok(())
}

fn check_ensemble<M: MeasurementModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    y: &DVector<f64>,
) -> Result<()> {
    if ens.len() < 2 {
        return Err(FilterError::InsufficientSamples {
            required: 2,
            got: ens.len(),
        });
    }
    if ens.dim() != model.state_dim() {
        return Err(FilterError::Dimension(format!(
            "ensemble dim {} != model state dim {}",
            ens.dim(),
            model.state_dim()
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

/// Zero-mean sampler for `N(0, R)`.
fn noise_sampler<M: MeasurementModel + ?Sized>(model: &M) -> Result<GaussianSampler> {
    let r = model.noise_cov();
    GaussianSampler::new(&GaussianBelief {
        mean: DVector::zeros(r.nrows()),
        cov: r.clone(),
    })
}

/// Shared per-step context for the member loop.
struct StepContext<'a, M: MeasurementModel + ?Sized> {
    model: &'a M,
    y: &'a DVector<f64>,
    cov: &'a DMatrix<f64>,
    scale: f64,
    step: usize,
    step_key: u64,
    noise: Option<&'a GaussianSampler>,
}

impl<M: MeasurementModel + ?Sized> StepContext<'_, M> {
    /// `K (y − h(x_j) − γ_j)` with `K = P H_jᵀ (H_j P H_jᵀ + s R)⁻¹`.
    fn increment(&self, x: &DVector<f64>, member: usize) -> Result<DVector<f64>> {
        let h = self.model.jacobian(x)?;
        let hp = &h * self.cov;
        let mut s = &hp * h.transpose() + self.model.noise_cov() * self.scale;
        linalg::symmetrize_mut(&mut s);
        let chol = Cholesky::new(&s).map_err(|_| FilterError::MemberInnovationNotPd {
            step: self.step,
            member,
        })?;
        let mut innovation = self.y - self.model.observe(x);
        if let Some(sampler) = self.noise {
            let mut rng = member_rng(self.step_key, member);
            innovation -= sampler.sample(&mut rng);
        }
        Ok(hp.transpose() * chol.solve_vec(&innovation))
    }

    fn increments(&self, states: &DMatrix<f64>, parallel: bool) -> Result<Vec<DVector<f64>>> {
        let m = states.ncols();
        let one = |j: usize| self.increment(&states.column(j).into_owned(), j);
        if parallel {
            (0..m).into_par_iter().map(one).collect()
        } else {
            (0..m).map(one).collect()
        }
    }
}

/// Inflates `states` about their mean by `factor` and returns the empirical
/// covariance about that same mean.
fn inflate_and_cov(states: &DMatrix<f64>, factor: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let ens = Ensemble::from_matrix(states.clone())?;
    let mean = empirical_mean(&ens);
    let inflated = inflate_about(&ens, &mean, factor).into_matrix();
    let mut anomalies = inflated.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &anomalies * anomalies.transpose() / (states.ncols() as f64 - 1.0);
    linalg::symmetrize_mut(&mut cov);
    Ok((inflated, cov))
}

fn apply(states: &mut DMatrix<f64>, increments: &[DVector<f64>]) {
    for (j, dx) in increments.iter().enumerate() {
        let mut col = states.column_mut(j);
        col += dx;
    }
}

/// Linearized EnKF update with inflation `alpha`.
pub fn enkf_update<M: MeasurementModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    y: &DVector<f64>,
    alpha: f64,
    options: EnsembleOptions,
    rng: &mut FilterRng,
) -> Result<Ensemble> {
    let cfg = EnsembleUpdateConfig {
        schedule: StepSchedule::Uniform(1),
        inflation: alpha,
        options: EnsembleOptions {
            record_trace: false,
            ..options
        },
    };
    bruenkf_update(ens, model, y, &cfg, rng).map(|(e, _)| e)
}

/// Recursive ensemble update over a fixed schedule.
pub fn bruenkf_update<M: MeasurementModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    y: &DVector<f64>,
    cfg: &EnsembleUpdateConfig,
    rng: &mut FilterRng,
) -> Result<(Ensemble, EnsembleTrace)> {
    check_ensemble(ens, model, y)?;
    if cfg.schedule.is_adaptive() {
        return Err(FilterError::InvalidParameter(
            "bruenkf_update needs a fixed schedule; use ec_bruenkf_update".into(),
        ));
    }
    cfg.validate()?;
    let opts = cfg.options;
    let sampler = if opts.perturb_observations {
        Some(noise_sampler(model)?)
    } else {
        None
    };
    let coefficients = cfg.schedule.coefficients().unwrap_or_default();
    let scales = cfg.schedule.noise_scales().unwrap_or_default();

    let mut states = ens.states().clone();
    let mut trace = EnsembleTrace::default();
    let mut t = 0.0;
    for (i, (c, scale)) in coefficients.iter().zip(&scales).enumerate() {
        let factor = if coefficients.len() == 1 {
            cfg.inflation
        } else {
            cfg.inflation.powf(*c)
        };
        let (inflated, cov) = inflate_and_cov(&states, factor)?;
        states = inflated;
        let ctx = StepContext {
            model,
            y,
            cov: &cov,
            scale: *scale,
            step: i + 1,
            step_key: rng.next_u64(),
            noise: sampler.as_ref(),
        };
        let dx = ctx.increments(&states, opts.parallel)?;
        apply(&mut states, &dx);
        t += c;
        trace.accepted_steps += 1;
        if opts.record_trace {
            trace.snapshots.push(EnsembleSnapshot {
                t,
                ensemble: Ensemble::from_matrix(states.clone())?,
            });
        }
    }
    Ok((Ensemble::from_matrix(states)?, trace))
}

/// Recursive ensemble update with adaptive pseudo-time steps.
///
/// A trial step of length `ds` inflates by `α^{ds}` and moves every member with
/// noise `R/ds` (first stage). The second stage recomputes the covariance from
/// the first-stage ensemble and moves each member again from its first-stage
/// state, reusing that member's perturbation. The error compares the first
/// stage with the midpoint combination, reduced over members according to
/// `options.ec_norm`. Accepted steps commit the first-stage ensemble.
pub fn ec_bruenkf_update<M: MeasurementModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    y: &DVector<f64>,
    ctrl: &ErrorController,
    alpha: f64,
    options: EnsembleOptions,
    rng: &mut FilterRng,
) -> Result<(Ensemble, EnsembleTrace)> {
    check_ensemble(ens, model, y)?;
    check_inflation(alpha)?;
    ctrl.validate()?;
    let sampler = if options.perturb_observations {
        Some(noise_sampler(model)?)
    } else {
        None
    };
    let m = ens.len() as f64;
    let mut states = ens.states().clone();
    let mut trace = EnsembleTrace::default();
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
        let step_key = rng.next_u64();

        let (inflated, cov) = inflate_and_cov(&states, alpha.powf(ds))?;
        let stage1 = StepContext {
            model,
            y,
            cov: &cov,
            scale,
            step,
            step_key,
            noise: sampler.as_ref(),
        };
        let dx1 = stage1.increments(&inflated, options.parallel)?;
        let mut trial = inflated.clone();
        apply(&mut trial, &dx1);

        let trial_cov = empirical_cov_of(&trial)?;
        let stage2 = StepContext {
            cov: &trial_cov,
            ..stage1
        };
        let dx2 = stage2.increments(&trial, options.parallel)?;

        let err = match options.ec_norm {
            EnsembleErrorNorm::Mean => {
                let mean_inflated = inflated.column_mean();
                let mean_dx1 = mean_of(&dx1, ens.dim(), m);
                let mean_dx2 = mean_of(&dx2, ens.dim(), m);
                let first = &mean_inflated + &mean_dx1;
                let second = &mean_inflated + (&mean_dx1 + &mean_dx2) * 0.5;
                ctrl.error_norm(&first, &second)
            }
            EnsembleErrorNorm::MaxMember => (0..trial.ncols())
                .map(|j| {
                    let first = trial.column(j).into_owned();
                    let second = inflated.column(j) + (&dx1[j] + &dx2[j]) * 0.5;
                    ctrl.error_norm(&first, &second)
                })
                .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) }),
        };

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
        states = trial;
        step += 1;
        rejections_here = 0;
        trace.accepted_steps += 1;
        if options.record_trace {
            trace.snapshots.push(EnsembleSnapshot {
                t,
                ensemble: Ensemble::from_matrix(states.clone())?,
            });
        }
        ds *= ctrl.step_factor(err, ctrl.f_max);
    }
    Ok((Ensemble::from_matrix(states)?, trace))
}

fn empirical_cov_of(states: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    crate::belief::empirical_cov(&Ensemble::from_matrix(states.clone())?)
}

fn mean_of(vs: &[DVector<f64>], n: usize, m: f64) -> DVector<f64> {
    let mut acc = DVector::zeros(n);
    for v in vs {
        acc += v;
    }
    acc / m
}

/// Flow quantities at one particle and pseudo-time.
pub struct FlowTerms {
    /// Drift `f = −(P⁻¹ + λHᵀR⁻¹H)⁻¹ Hᵀ R⁻¹ (h(x) − y)`.
    pub drift: DVector<f64>,
    /// `K_λ = (P⁻¹ + λHᵀR⁻¹H)⁻¹ Hᵀ R⁻¹ = P Hᵀ (λ H P Hᵀ + R)⁻¹`.
    pub gain: DMatrix<f64>,
}

impl FlowTerms {
    /// Diffusion covariance `Q(λ) = K_λ R K_λᵀ`.
    pub fn diffusion_cov(&self, r: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&(&self.gain * r * self.gain.transpose()))
    }
}

/// Drift and gain of the Gromov flow at particle `x`, pseudo-time `lambda`,
/// with fixed prior covariance `p`.
pub fn flow_terms<M: MeasurementModel + ?Sized>(
    x: &DVector<f64>,
    lambda: f64,
    p: &DMatrix<f64>,
    model: &M,
    y: &DVector<f64>,
) -> Result<FlowTerms> {
    let h = model.jacobian(x)?;
    let pht = p * h.transpose();
    let mut s = &h * &pht * lambda + model.noise_cov();
    linalg::symmetrize_mut(&mut s);
    let chol = Cholesky::new(&s).map_err(|_| FilterError::FlowFactorization { lambda })?;
    let gain = chol.solve(&pht.transpose()).transpose();
    let drift = -(&gain * (model.observe(x) - y));
    Ok(FlowTerms { drift, gain })
}

/// Gromov particle flow from `λ = 0` to `1` followed by the companion EKF
/// update and optional resampling from `N(particle mean, P̂_EKF)`.
///
/// `companion` is the companion EKF's predicted belief; its covariance is the
/// `P` used by every flow step.
pub fn gromov_flow_update<M: MeasurementModel + ?Sized>(
    ens: &Ensemble,
    model: &M,
    y: &DVector<f64>,
    companion: &GaussianBelief,
    cfg: &GromovConfig,
    rng: &mut FilterRng,
) -> Result<(Ensemble, GaussianBelief)> {
    if ens.is_empty() {
        return Err(FilterError::InsufficientSamples {
            required: 1,
            got: 0,
        });
    }
    if ens.dim() != model.state_dim() || companion.dim() != ens.dim() {
        return Err(FilterError::Dimension(
            "ensemble, companion and model dimensions differ".into(),
        ));
    }
    if cfg.n_steps == 0 {
        return Err(FilterError::InvalidParameter("n_steps must be >= 1".into()));
    }
    Cholesky::new(&companion.cov).map_err(|_| FilterError::FlowFactorization { lambda: 0.0 })?;
    let noise_factor = Cholesky::new(model.noise_cov())?.l().clone();
    let delta = 1.0 / cfg.n_steps as f64;
    let sd = delta.sqrt() * cfg.diffusion_scale;

    let mut states = ens.states().clone();
    for k in 0..cfg.n_steps {
        let lambda = k as f64 * delta;
        let step_key = rng.next_u64();
        let one = |j: usize| -> Result<DVector<f64>> {
            let x = states.column(j).into_owned();
            let terms = flow_terms(&x, lambda, &companion.cov, model, y)?;
            let mut next = &x + &terms.drift * delta;
            if sd != 0.0 {
                let mut r = member_rng(step_key, j);
                if cfg.symmetric_diffusion {
                    let b = linalg::symmetric_sqrt(&terms.diffusion_cov(model.noise_cov()))?;
                    next += b * standard_normal_vector(x.len(), &mut r) * sd;
                } else {
                    let w = standard_normal_vector(noise_factor.nrows(), &mut r);
                    next += &terms.gain * (&noise_factor * w) * sd;
                }
            }
            Ok(next)
        };
        let moved: Vec<DVector<f64>> = if cfg.parallel {
            (0..states.ncols()).into_par_iter().map(one).collect::<Result<_>>()?
        } else {
            (0..states.ncols()).map(one).collect::<Result<_>>()?
        };
        for (j, x) in moved.into_iter().enumerate() {
            states.set_column(j, &x);
        }
    }

    let updated = kalman_update(companion, model, y)?;
    let flowed = Ensemble::from_matrix(states)?;
    if !cfg.resample_after_update {
        return Ok((flowed, updated));
    }
    let mean = empirical_mean(&flowed);
    let sampler = GaussianSampler::new(&GaussianBelief {
        mean,
        cov: updated.cov.clone(),
    })?;
    let step_key = rng.next_u64();
    let members: Vec<DVector<f64>> = (0..flowed.len())
        .map(|j| sampler.sample(&mut member_rng(step_key, j)))
        .collect();
    Ok((Ensemble::from_members(&members)?, updated))
}

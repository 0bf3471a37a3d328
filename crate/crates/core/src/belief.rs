//! Gaussian beliefs, ensembles and the model interfaces shared by every filter.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FilterError, Result};
use crate::linalg::{self, Cholesky};

/// Mean vector and covariance matrix of a Gaussian state estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(FilterError::Dimension(format!(
                "mean has length {n}, covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks symmetry and positive semi-definiteness within the tolerances
    /// `max|P - Pᵀ| <= 1e-12 max|P|` and `λ_min >= -1e-10 trace(P)/n`.
    pub fn check_invariants(&self) -> Result<()> {
        let scale = linalg::max_abs(&self.cov);
        let asym = linalg::max_abs(&(&self.cov - self.cov.transpose()));
        if asym > 1e-12 * scale {
            return Err(FilterError::InvalidParameter(format!(
                "covariance asymmetry {asym:e} exceeds tolerance"
            )));
        }
        linalg::symmetric_sqrt(&self.cov).map(|_| ())
    }

    /// Draws one sample.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<DVector<f64>> {
        Ok(GaussianSampler::new(self)?.sample(rng))
    }
}

/// Draws from `N(mean, cov)` with a cached covariance factor.
#[derive(Clone, Debug)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    /// Uses a Cholesky factor when the covariance is positive definite and the
    /// symmetric square root otherwise.
    pub fn new(belief: &GaussianBelief) -> Result<Self> {
        let factor = match Cholesky::new(&belief.cov) {
            Ok(ch) => ch.l().clone(),
            Err(_) => linalg::symmetric_sqrt(&belief.cov)?,
        };
        Ok(Self {
            mean: belief.mean.clone(),
            factor,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vector(self.mean.len(), rng);
        &self.mean + &self.factor * z
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// `M` state vectors of common dimension `n`, stored as the columns of an `n×M` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
}

impl Ensemble {
    pub fn from_matrix(states: DMatrix<f64>) -> Result<Self> {
        if states.ncols() == 0 {
            return Err(FilterError::Dimension("ensemble has no members".into()));
        }
        Ok(Self { states })
    }

    pub fn from_members(members: &[DVector<f64>]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| FilterError::Dimension("ensemble has no members".into()))?;
        let n = first.len();
        if let Some(bad) = members.iter().position(|m| m.len() != n) {
            return Err(FilterError::Dimension(format!(
                "member {bad} has length {}, expected {n}",
                members[bad].len()
            )));
        }
        Ok(Self {
            states: DMatrix::from_columns(members),
        })
    }

    /// Draws `count` members from a Gaussian belief.
    pub fn sample<R: Rng + ?Sized>(
        belief: &GaussianBelief,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if count == 0 {
            return Err(FilterError::Dimension("ensemble has no members".into()));
        }
        let sampler = GaussianSampler::new(belief)?;
        let members: Vec<_> = (0..count).map(|_| sampler.sample(rng)).collect();
        Self::from_members(&members)
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.states
    }

    pub fn member(&self, j: usize) -> DVector<f64> {
        self.states.column(j).into_owned()
    }

    pub fn members(&self) -> impl Iterator<Item = DVector<f64>> + '_ {
        self.states.column_iter().map(|c| c.into_owned())
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.states
    }
}

/// Arithmetic mean of the members.
///
/// Accumulated as offsets from the first member, so a constant ensemble has
/// exactly that constant as its mean.
pub fn empirical_mean(ens: &Ensemble) -> DVector<f64> {
    let m = ens.len() as f64;
    let base = ens.states.column(0).into_owned();
    let mut sum = DVector::zeros(ens.dim());
    for col in ens.states.column_iter() {
        sum += col - &base;
    }
    base + sum / m
}

/// Unbiased sample covariance (divisor `M - 1`), exactly symmetric.
pub fn empirical_cov(ens: &Ensemble) -> Result<DMatrix<f64>> {
    Ok(anomalies_and_cov(ens)?.1)
}

/// Returns `(mean, covariance)` in one pass.
pub fn empirical_moments(ens: &Ensemble) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (mean, cov, _) = moments_with_anomalies(ens)?;
    Ok((mean, cov))
}

fn anomalies_and_cov(ens: &Ensemble) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (_, cov, anomalies) = moments_with_anomalies(ens)?;
    Ok((anomalies, cov))
}

fn moments_with_anomalies(
    ens: &Ensemble,
) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let count = ens.len();
    if count < 2 {
        return Err(FilterError::InsufficientSamples {
            required: 2,
            got: count,
        });
    }
    let mean = empirical_mean(ens);
    let mut anomalies = ens.states.clone();
    for mut col in anomalies.column_iter_mut() {
        col -= &mean;
    }
    let mut cov = &anomalies * anomalies.transpose();
    cov /= (count - 1) as f64;
    linalg::symmetrize_mut(&mut cov);
    Ok((mean, cov, anomalies))
}

/// Multiplicative inflation `x ← m + α(x − m)` about the ensemble mean.
pub fn inflate(ens: &Ensemble, factor: f64) -> Result<Ensemble> {
    if !(factor >= 1.0) || !factor.is_finite() {
        return Err(FilterError::InvalidInflation(factor));
    }
    let mean = empirical_mean(ens);
    Ok(inflate_about(ens, &mean, factor))
}

pub(crate) fn inflate_about(ens: &Ensemble, mean: &DVector<f64>, factor: f64) -> Ensemble {
    if factor == 1.0 {
        return ens.clone();
    }
    let mut states = ens.states.clone();
    for mut col in states.column_iter_mut() {
        for (x, m) in col.iter_mut().zip(mean.iter()) {
            *x = m + factor * (*x - m);
        }
    }
    Ensemble { states }
}

/// Nonlinear measurement `y = h(x) + η`, `η ~ N(0, R)`.
pub trait MeasurementModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn measurement_dim(&self) -> usize;

    /// Noise-free measurement `h(x)`.
    fn observe(&self, x: &DVector<f64>) -> DVector<f64>;

    /// Jacobian `∂h/∂x` at `x` (`m×n`).
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>>;

    /// Measurement noise covariance `R`.
    fn noise_cov(&self) -> &DMatrix<f64>;
}

impl<T: MeasurementModel + ?Sized> MeasurementModel for &T {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn measurement_dim(&self) -> usize {
        (**self).measurement_dim()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).observe(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
    fn noise_cov(&self) -> &DMatrix<f64> {
        (**self).noise_cov()
    }
}

impl<T: MeasurementModel + ?Sized> MeasurementModel for Arc<T> {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn measurement_dim(&self) -> usize {
        (**self).measurement_dim()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        (**self).observe(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
    fn noise_cov(&self) -> &DMatrix<f64> {
        (**self).noise_cov()
    }
}

/// Linear measurement `y = H x + η`.
#[derive(Clone, Debug)]
pub struct LinearMeasurement {
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl LinearMeasurement {
    pub fn new(h: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if r.nrows() != h.nrows() || r.ncols() != h.nrows() {
            return Err(FilterError::Dimension(format!(
                "H is {}x{}, R is {}x{}",
                h.nrows(),
                h.ncols(),
                r.nrows(),
                r.ncols()
            )));
        }
        Ok(Self { h, r })
    }
}

impl MeasurementModel for LinearMeasurement {
    fn state_dim(&self) -> usize {
        self.h.ncols()
    }
    fn measurement_dim(&self) -> usize {
        self.h.nrows()
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.h * x
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.h.clone())
    }
    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

type ObserveFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;
type JacobianFn = dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync;

/// Measurement model built from closures. Without an explicit Jacobian, the
/// central-difference approximation is used.
pub struct FnMeasurement {
    state_dim: usize,
    measurement_dim: usize,
    observe: Box<ObserveFn>,
    jacobian: Option<Box<JacobianFn>>,
    r: DMatrix<f64>,
}

impl FnMeasurement {
    pub fn new<F>(state_dim: usize, r: DMatrix<f64>, observe: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self {
            state_dim,
            measurement_dim: r.nrows(),
            observe: Box::new(observe),
            jacobian: None,
            r,
        }
    }

    pub fn with_jacobian<J>(mut self, jacobian: J) -> Self
    where
        J: Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    {
        self.jacobian = Some(Box::new(jacobian));
        self
    }
}

impl fmt::Debug for FnMeasurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnMeasurement")
            .field("state_dim", &self.state_dim)
            .field("measurement_dim", &self.measurement_dim)
            .field("analytic_jacobian", &self.jacobian.is_some())
            .finish()
    }
}

impl MeasurementModel for FnMeasurement {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn measurement_dim(&self) -> usize {
        self.measurement_dim
    }
    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        (self.observe)(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.jacobian {
            Some(j) => j(x),
            None => Ok(linalg::central_difference_jacobian(&self.observe, x)),
        }
    }
    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// State propagation over one measurement interval.
pub trait DynamicsModel: Send + Sync {
    fn state_dim(&self) -> usize;

    fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Process noise covariance `Q`, if the model carries one.
    fn process_noise_cov(&self) -> Option<&DMatrix<f64>> {
        None
    }

    /// Propagated state together with the Jacobian of the flow map, for
    /// linearized covariance propagation.
    fn propagate_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let _ = x;
        Err(FilterError::InvalidParameter(
            "dynamics model has no covariance propagator".into(),
        ))
    }

    /// EKF-style prediction `x ← f(x)`, `P ← F P Fᵀ + Q + extra`.
    fn predict_belief(
        &self,
        belief: &GaussianBelief,
        extra_noise: Option<&DMatrix<f64>>,
    ) -> Result<GaussianBelief> {
        let (mean, f) = self.propagate_with_jacobian(&belief.mean)?;
        let mut cov = &f * &belief.cov * f.transpose();
        if let Some(q) = self.process_noise_cov() {
            cov += q;
        }
        if let Some(q) = extra_noise {
            cov += q;
        }
        linalg::symmetrize_mut(&mut cov);
        GaussianBelief::new(mean, cov)
    }
}

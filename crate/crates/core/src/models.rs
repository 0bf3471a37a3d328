//! Concrete systems: the 2-D range problem, r-u-v radar tracking with
//! constant-velocity dynamics, and Lorenz '96 with a power-law measurement.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::belief::{DynamicsModel, GaussianBelief, GaussianSampler, MeasurementModel};
use crate::error::{FilterError, Result};
use crate::linalg;

// ---------------------------------------------------------------------------
// Range observation

/// `h(x) = √(x₁² + x₂²)` with scalar noise variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeMeasurement {
    r: DMatrix<f64>,
}

impl RangeMeasurement {
    pub fn new(noise_var: f64) -> Self {
        Self {
            r: DMatrix::from_element(1, 1, noise_var),
        }
    }
}

impl MeasurementModel for RangeMeasurement {
    fn state_dim(&self) -> usize {
        2
    }

    fn measurement_dim(&self) -> usize {
        1
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0].hypot(x[1]))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let r = x[0].hypot(x[1]);
        if r == 0.0 {
            return Err(FilterError::SingularPoint("range at the origin".into()));
        }
        Ok(DMatrix::from_row_slice(1, 2, &[x[0] / r, x[1] / r]))
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Range model with `R = 0.01`.
pub fn range_model() -> RangeMeasurement {
    RangeMeasurement::new(0.01)
}

/// The fixed 2-D range problem.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeScenario {
    pub prior: GaussianBelief,
    pub noise_var: f64,
    pub observed: f64,
}

impl Default for RangeScenario {
    fn default() -> Self {
        Self {
            prior: GaussianBelief {
                mean: DVector::from_vec(vec![-3.0, 0.0]),
                cov: DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
            },
            noise_var: 0.01,
            observed: 1.0,
        }
    }
}

impl RangeScenario {
    pub fn model(&self) -> RangeMeasurement {
        RangeMeasurement::new(self.noise_var)
    }

    pub fn measurement(&self) -> DVector<f64> {
        DVector::from_element(1, self.observed)
    }
}

// ---------------------------------------------------------------------------
// Radar tracking

/// Indices of the Cartesian position components in `[x, vx, y, vy, z, vz]`.
pub const POSITION_INDICES: [usize; 3] = [0, 2, 4];
const VELOCITY_INDICES: [usize; 3] = [1, 3, 5];

/// Range and direction cosines `[r, x/r, y/r]` of the position part of a
/// 6-state constant-velocity vector.
#[derive(Clone, Debug, PartialEq)]
pub struct RuvMeasurement {
    r: DMatrix<f64>,
}

impl RuvMeasurement {
    pub fn new(sigma_r: f64, sigma_u: f64, sigma_v: f64) -> Self {
        Self {
            r: DMatrix::from_diagonal(&DVector::from_vec(vec![
                sigma_r * sigma_r,
                sigma_u * sigma_u,
                sigma_v * sigma_v,
            ])),
        }
    }
}

fn position(x: &DVector<f64>) -> [f64; 3] {
    [x[0], x[2], x[4]]
}

fn norm3(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

impl MeasurementModel for RuvMeasurement {
    fn state_dim(&self) -> usize {
        6
    }

    fn measurement_dim(&self) -> usize {
        3
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        let p = position(x);
        let r = norm3(p);
        DVector::from_vec(vec![r, p[0] / r, p[1] / r])
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let p = position(x);
        let r = norm3(p);
        if r == 0.0 {
            return Err(FilterError::SingularPoint("target at the sensor".into()));
        }
        let r3 = r * r * r;
        let mut h = DMatrix::zeros(3, 6);
        for (k, &col) in POSITION_INDICES.iter().enumerate() {
            h[(0, col)] = p[k] / r;
            h[(1, col)] = -p[0] * p[k] / r3;
            h[(2, col)] = -p[1] * p[k] / r3;
        }
        h[(1, 0)] += 1.0 / r;
        h[(2, 2)] += 1.0 / r;
        Ok(h)
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

pub fn ruv_model(sigma_r: f64, sigma_u: f64, sigma_v: f64) -> RuvMeasurement {
    RuvMeasurement::new(sigma_r, sigma_u, sigma_v)
}

/// Linear dynamics `x(k+1) = F x(k) + ν`, `ν ~ N(0, Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearDynamics {
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
}

impl DynamicsModel for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.f * x)
    }

    fn process_noise_cov(&self) -> Option<&DMatrix<f64>> {
        Some(&self.q)
    }

    fn propagate_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((&self.f * x, self.f.clone()))
    }
}

/// Radar tracking setup. Lengths in metres, times in seconds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingScenario {
    pub dt: f64,
    /// Process noise intensity (m²/s³).
    pub q_tilde: f64,
    pub sigma_r: f64,
    pub sigma_u: f64,
    pub sigma_v: f64,
    pub initial_true_state: DVector<f64>,
    /// Number of time steps, including the two used for initialization.
    pub duration: usize,
}

impl Default for TrackingScenario {
    fn default() -> Self {
        Self {
            dt: 1.0,
            q_tilde: 1e-4,
            sigma_r: 2.5,
            sigma_u: 1e-3,
            sigma_v: 1e-3,
            initial_true_state: DVector::from_vec(vec![
                1.1e6, -2.0e3, 1.1e6, -2.0e3, 1.1e6, -1.0e3,
            ]),
            duration: 300,
        }
    }
}

/// Simulated truth and measurements for steps `1..=duration`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingTruth {
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

impl TrackingScenario {
    /// Block constant-velocity transition matrix.
    pub fn transition(&self) -> DMatrix<f64> {
        let mut f = DMatrix::identity(6, 6);
        for b in 0..3 {
            f[(2 * b, 2 * b + 1)] = self.dt;
        }
        f
    }

    /// Block process noise `q̃ [[T³/3, T²/2], [T²/2, T]]`.
    pub fn process_noise(&self) -> DMatrix<f64> {
        let t = self.dt;
        let mut q = DMatrix::zeros(6, 6);
        for b in 0..3 {
            let i = 2 * b;
            q[(i, i)] = t * t * t / 3.0;
            q[(i, i + 1)] = t * t / 2.0;
            q[(i + 1, i)] = t * t / 2.0;
            q[(i + 1, i + 1)] = t;
        }
        q * self.q_tilde
    }

    pub fn dynamics(&self) -> LinearDynamics {
        LinearDynamics {
            f: self.transition(),
            q: self.process_noise(),
        }
    }

    pub fn measurement_model(&self) -> RuvMeasurement {
        RuvMeasurement::new(self.sigma_r, self.sigma_u, self.sigma_v)
    }

    /// Propagates the truth with sampled process noise and measures every step.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TrackingTruth> {
        let dyn_model = self.dynamics();
        let model = self.measurement_model();
        let process = GaussianSampler::new(&GaussianBelief {
            mean: DVector::zeros(6),
            cov: dyn_model.q.clone(),
        })?;
        let noise = GaussianSampler::new(&GaussianBelief {
            mean: DVector::zeros(3),
            cov: model.noise_cov().clone(),
        })?;
        let mut states = Vec::with_capacity(self.duration);
        let mut measurements = Vec::with_capacity(self.duration);
        let mut x = self.initial_true_state.clone();
        for k in 0..self.duration {
            if k > 0 {
                x = &dyn_model.f * &x + process.sample(rng);
            }
            measurements.push(model.observe(&x) + noise.sample(rng));
            states.push(x.clone());
        }
        Ok(TrackingTruth {
            states,
            measurements,
        })
    }
}

/// Cartesian position from `[r, u, v]` and the Jacobian of that conversion.
pub fn ruv_to_position(y: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let (r, u, v) = (y[0], y[1], y[2]);
    let s = u * u + v * v;
    if !(s < 1.0) {
        return Err(FilterError::InvalidDirectionCosines(s));
    }
    let w = (1.0 - s).sqrt();
    let p = DVector::from_vec(vec![u * r, v * r, r * w]);
    let j = DMatrix::from_row_slice(3, 3, &[u, r, 0.0, v, 0.0, r, w, -r * u / w, -r * v / w]);
    Ok((p, j))
}

/// Two-point initialization at the time of the second measurement.
///
/// Positions come from converting each measurement; velocity is their first
/// difference. With `C_k = J_k R J_kᵀ` the converted position covariances,
/// `Cov(p₂) = C₂`, `Cov(v) = (C₁ + C₂)/T²` and `Cov(p₂, v) = C₂/T`.
pub fn tracking_initialize(
    y1: &DVector<f64>,
    y2: &DVector<f64>,
    scenario: &TrackingScenario,
) -> Result<GaussianBelief> {
    let r = scenario.measurement_model().noise_cov().clone();
    let (p1, j1) = ruv_to_position(y1)?;
    let (p2, j2) = ruv_to_position(y2)?;
    let c1 = &j1 * &r * j1.transpose();
    let c2 = &j2 * &r * j2.transpose();
    let t = scenario.dt;
    let vel = (&p2 - &p1) / t;
    let cvv = (&c1 + &c2) / (t * t);
    let cpv = &c2 / t;

    let mut mean = DVector::zeros(6);
    let mut cov = DMatrix::zeros(6, 6);
    for a in 0..3 {
        mean[POSITION_INDICES[a]] = p2[a];
        mean[VELOCITY_INDICES[a]] = vel[a];
        for b in 0..3 {
            let (pa, va) = (POSITION_INDICES[a], VELOCITY_INDICES[a]);
            let (pb, vb) = (POSITION_INDICES[b], VELOCITY_INDICES[b]);
            cov[(pa, pb)] = c2[(a, b)];
            cov[(va, vb)] = cvv[(a, b)];
            cov[(pa, vb)] = cpv[(a, b)];
            cov[(va, pb)] = cpv[(b, a)];
        }
    }
    linalg::symmetrize_mut(&mut cov);
    GaussianBelief::new(mean, cov)
}

// ---------------------------------------------------------------------------
// Lorenz '96

/// `dx_i/dt = (x_{i+1} − x_{i−2}) x_{i−1} − x_i + F` with circular indexing.
pub fn lorenz96_derivative(x: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    let n = x.len();
    if n < 4 {
        return Err(FilterError::Dimension(format!(
            "Lorenz '96 needs at least 4 states, got {n}"
        )));
    }
    Ok(DVector::from_fn(n, |i, _| {
        let ip1 = x[(i + 1) % n];
        let im1 = x[(i + n - 1) % n];
        let im2 = x[(i + n - 2) % n];
        (ip1 - im2) * im1 - x[i] + forcing
    }))
}

/// `J Φ` for the Lorenz '96 Jacobian `J` at `x`, using its four-band structure.
fn lorenz96_jacobian_product(x: &DVector<f64>, phi: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.len();
    let mut out = DMatrix::zeros(n, phi.ncols());
    for i in 0..n {
        let ip1 = (i + 1) % n;
        let im1 = (i + n - 1) % n;
        let im2 = (i + n - 2) % n;
        let a = x[im1];
        let b = x[ip1] - x[im2];
        for c in 0..phi.ncols() {
            out[(i, c)] = a * (phi[(ip1, c)] - phi[(im2, c)]) + b * phi[(im1, c)] - phi[(i, c)];
        }
    }
    out
}

/// Jacobian of [`lorenz96_derivative`] at `x`.
pub fn lorenz96_jacobian(x: &DVector<f64>) -> DMatrix<f64> {
    let n = x.len();
    lorenz96_jacobian_product(x, &DMatrix::identity(n, n))
}

/// Classical RK4 over `dt` in `substeps` equal steps.
pub fn rk4_propagate<F>(x: &DVector<f64>, dt: f64, substeps: usize, deriv: F) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    if substeps == 0 {
        return Err(FilterError::InvalidParameter("substeps must be >= 1".into()));
    }
    let h = dt / substeps as f64;
    let mut x = x.clone();
    for s in 0..substeps {
        let k1 = deriv(&x);
        let k2 = deriv(&(&x + &k1 * (0.5 * h)));
        let k3 = deriv(&(&x + &k2 * (0.5 * h)));
        let k4 = deriv(&(&x + &k3 * h));
        x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FilterError::Divergence { substep: s });
        }
    }
    Ok(x)
}

/// Lorenz '96 flow map over one observation interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Lorenz96 {
    pub n: usize,
    pub forcing: f64,
    pub dt: f64,
    pub substeps: usize,
}

impl Lorenz96 {
    fn deriv(&self, x: &DVector<f64>) -> DVector<f64> {
        lorenz96_derivative(x, self.forcing).expect("dimension checked at construction")
    }
}

impl DynamicsModel for Lorenz96 {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn propagate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.n || self.n < 4 {
            return Err(FilterError::Dimension(format!(
                "state has length {}, model expects {} (>= 4)",
                x.len(),
                self.n
            )));
        }
        rk4_propagate(x, self.dt, self.substeps, |v| self.deriv(v))
    }

    /// Propagates the state together with the exact derivative of the RK4 map.
    fn propagate_with_jacobian(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        if x.len() != self.n || self.n < 4 {
            return Err(FilterError::Dimension(format!(
                "state has length {}, model expects {} (>= 4)",
                x.len(),
                self.n
            )));
        }
        if self.substeps == 0 {
            return Err(FilterError::InvalidParameter("substeps must be >= 1".into()));
        }
        let h = self.dt / self.substeps as f64;
        let mut x = x.clone();
        let mut phi = DMatrix::identity(self.n, self.n);
        for s in 0..self.substeps {
            let k1 = self.deriv(&x);
            let d1 = lorenz96_jacobian_product(&x, &phi);
            let x2 = &x + &k1 * (0.5 * h);
            let p2 = &phi + &d1 * (0.5 * h);
            let k2 = self.deriv(&x2);
            let d2 = lorenz96_jacobian_product(&x2, &p2);
            let x3 = &x + &k2 * (0.5 * h);
            let p3 = &phi + &d2 * (0.5 * h);
            let k3 = self.deriv(&x3);
            let d3 = lorenz96_jacobian_product(&x3, &p3);
            let x4 = &x + &k3 * h;
            let p4 = &phi + &d3 * h;
            let k4 = self.deriv(&x4);
            let d4 = lorenz96_jacobian_product(&x4, &p4);
            x += (k1 + (k2 + k3) * 2.0 + k4) * (h / 6.0);
            phi += (d1 + (d2 + d3) * 2.0 + d4) * (h / 6.0);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(FilterError::Divergence { substep: s });
            }
        }
        Ok((x, phi))
    }
}

/// Componentwise `h(x) = x/2 · [1 + (|x|/f)^{γ−1}]` on a subset of states.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerMeasurement {
    n: usize,
    indices: Vec<usize>,
    scale: f64,
    gamma: f64,
    r: DMatrix<f64>,
}

impl PowerMeasurement {
    pub fn new(n: usize, indices: Vec<usize>, scale: f64, gamma: f64, r: DMatrix<f64>) -> Result<Self> {
        if !(gamma >= 1.0) || !(scale > 0.0) {
            return Err(FilterError::InvalidParameter(format!(
                "need gamma >= 1 and f > 0, got gamma = {gamma}, f = {scale}"
            )));
        }
        if indices.iter().any(|&i| i >= n) || r.nrows() != indices.len() || r.ncols() != indices.len() {
            return Err(FilterError::Dimension(
                "observation indices and noise covariance do not match the state".into(),
            ));
        }
        Ok(Self {
            n,
            indices,
            scale,
            gamma,
            r,
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    fn value(&self, x: f64) -> f64 {
        0.5 * x * (1.0 + (x.abs() / self.scale).powf(self.gamma - 1.0))
    }

    fn derivative(&self, x: f64) -> f64 {
        0.5 * (1.0 + self.gamma * (x.abs() / self.scale).powf(self.gamma - 1.0))
    }
}

impl MeasurementModel for PowerMeasurement {
    fn state_dim(&self) -> usize {
        self.n
    }

    fn measurement_dim(&self) -> usize {
        self.indices.len()
    }

    fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| self.value(x[i])))
    }

    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut h = DMatrix::zeros(self.indices.len(), self.n);
        for (row, &i) in self.indices.iter().enumerate() {
            h[(row, i)] = self.derivative(x[i]);
        }
        Ok(h)
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.r
    }
}

/// Lorenz '96 twin-experiment setup.
#[derive(Clone, Debug, PartialEq)]
pub struct Lorenz96Scenario {
    pub n: usize,
    pub forcing: f64,
    /// Measurement scale `f`.
    pub meas_scale: f64,
    pub gamma: f64,
    /// Every `obs_stride`-th state is observed, starting at the second (0-based index `stride − 1`).
    pub obs_stride: usize,
    pub noise_var: f64,
    pub dt_obs: f64,
    pub substeps: usize,
    /// Assimilation steps.
    pub steps: usize,
    /// Observation intervals of spin-up before the assimilation window.
    pub spinup: usize,
    /// Standard deviation of the perturbation added to `F·1` before spin-up.
    pub spinup_perturbation: f64,
}

impl Default for Lorenz96Scenario {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: 8.0,
            meas_scale: 10.0,
            gamma: 5.0,
            obs_stride: 2,
            noise_var: 1.0,
            dt_obs: 0.05,
            substeps: 10,
            steps: 350,
            spinup: 500,
            spinup_perturbation: 0.01,
        }
    }
}

/// Truth trajectory and measurements for steps `1..=steps`, plus the initial truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Lorenz96Truth {
    pub initial: DVector<f64>,
    pub states: Vec<DVector<f64>>,
    pub measurements: Vec<DVector<f64>>,
}

impl Lorenz96Scenario {
    pub fn dynamics(&self) -> Lorenz96 {
        Lorenz96 {
            n: self.n,
            forcing: self.forcing,
            dt: self.dt_obs,
            substeps: self.substeps,
        }
    }

    pub fn obs_indices(&self) -> Vec<usize> {
        (self.obs_stride - 1..self.n).step_by(self.obs_stride).collect()
    }

    pub fn measurement_model(&self) -> Result<PowerMeasurement> {
        l96_measurement_model(self)
    }

    /// Spins the truth up from a perturbed fixed point, then runs the
    /// assimilation window with noisy measurements after every interval.
    pub fn simulate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Lorenz96Truth> {
        let dynamics = self.dynamics();
        let model = self.measurement_model()?;
        let mut x = DVector::from_fn(self.n, |_, _| {
            self.forcing + self.spinup_perturbation * crate::belief::standard_normal(rng)
        });
        for _ in 0..self.spinup {
            x = dynamics.propagate(&x)?;
        }
        let noise = GaussianSampler::new(&GaussianBelief {
            mean: DVector::zeros(model.measurement_dim()),
            cov: model.noise_cov().clone(),
        })?;
        let initial = x.clone();
        let mut states = Vec::with_capacity(self.steps);
        let mut measurements = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            x = dynamics.propagate(&x)?;
            measurements.push(model.observe(&x) + noise.sample(rng));
            states.push(x.clone());
        }
        Ok(Lorenz96Truth {
            initial,
            states,
            measurements,
        })
    }
}

pub fn l96_measurement_model(scenario: &Lorenz96Scenario) -> Result<PowerMeasurement> {
    if scenario.obs_stride == 0 {
        return Err(FilterError::InvalidParameter("obs_stride must be >= 1".into()));
    }
    let indices = scenario.obs_indices();
    let m = indices.len();
    PowerMeasurement::new(
        scenario.n,
        indices,
        scenario.meas_scale,
        scenario.gamma,
        DMatrix::identity(m, m) * scenario.noise_var,
    )
}

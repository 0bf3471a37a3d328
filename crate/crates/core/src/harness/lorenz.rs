//! Lorenz '96 twin experiments: RMSE against ensemble size and against the
//! measurement exponent.

use nalgebra::DMatrix;

use super::config::{ExperimentConfig, FilterKind, FilterSpec};
use super::output::Artifacts;
use super::{ensemble_update, filter_rng, par_runs, truth_rng, Result};
use crate::belief::{empirical_mean, DynamicsModel, Ensemble, GaussianBelief};
use crate::ensemble::EnsembleErrorNorm;
use crate::metrics::{time_avg_rmse, Float, RunRecord};
use crate::models::{Lorenz96Scenario, Lorenz96Truth};
use crate::recursive::{ErrorController, StepSchedule};

pub const DEFAULT_M_LIST: [usize; 7] = [10, 15, 20, 25, 30, 35, 40];
pub const DEFAULT_GAMMA_LIST: [f64; 9] = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
pub const DEFAULT_BURN_IN: usize = 50;
pub const DEFAULT_INFLATION: f64 = 1.06;

pub fn default_filters() -> Vec<FilterSpec> {
    let spec = |name: &str, kind| FilterSpec {
        name: name.into(),
        kind,
    };
    let alpha = DEFAULT_INFLATION;
    vec![
        spec("enkf", FilterKind::Enkf { inflation: alpha }),
        spec(
            "bruenkf",
            FilterKind::Bruenkf {
                schedule: StepSchedule::Uniform(25),
                inflation: alpha,
            },
        ),
        spec(
            "vs-bruenkf",
            FilterKind::Bruenkf {
                schedule: StepSchedule::Variable(25),
                inflation: alpha,
            },
        ),
        spec(
            "ec-bruenkf",
            FilterKind::EcBruenkf {
                ctrl: ErrorController::new(1e-3, 1e-3),
                inflation: alpha,
                norm: EnsembleErrorNorm::MaxMember,
            },
        ),
        spec(
            "gromov",
            FilterKind::Gromov {
                n_steps: 25,
                q: 0.1,
                resample: true,
            },
        ),
    ]
}

/// Assimilates one simulated trajectory with an `m`-member ensemble drawn
/// around the initial truth with unit covariance. Returns the time-averaged
/// RMSE, `+∞` if the filter fails.
pub fn assimilate(
    spec: &FilterSpec,
    scenario: &Lorenz96Scenario,
    truth: &Lorenz96Truth,
    m: usize,
    burn_in: usize,
    rng: &mut crate::rng::FilterRng,
) -> f64 {
    let mut attempt = || -> crate::error::Result<f64> {
        let n = scenario.n;
        let dynamics = scenario.dynamics();
        let model = scenario.measurement_model()?;
        let prior = GaussianBelief::new(truth.initial.clone(), DMatrix::identity(n, n))?;
        let mut ens = Ensemble::sample(&prior, m, rng)?;
        let companion_noise = spec.kind.companion_noise(n);
        let mut companion = companion_noise.as_ref().map(|_| prior.clone());
        let mut record = RunRecord::default();
        for (k, y) in truth.measurements.iter().enumerate() {
            let states = ens.states_mut();
            for j in 0..m {
                let x = dynamics.propagate(&states.column(j).into_owned())?;
                states.set_column(j, &x);
            }
            if let (Some(c), Some(q)) = (companion.as_mut(), companion_noise.as_ref()) {
                *c = dynamics.predict_belief(c, Some(q))?;
            }
            let (next, updated, _) = ensemble_update(&spec.kind, &ens, companion.as_ref(), &model, y, false, rng)?;
            ens = next;
            if updated.is_some() {
                companion = updated;
            }
            let mean = empirical_mean(&ens);
            if mean.iter().any(|v| !v.is_finite()) {
                return Ok(f64::INFINITY);
            }
            record.truth.push(truth.states[k].clone());
            record.estimates.push(mean);
        }
        time_avg_rmse(&[record], burn_in)
    };
    attempt().unwrap_or(f64::INFINITY)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sweep {
    EnsembleSize,
    Gamma,
}

impl Sweep {
    fn name(self) -> &'static str {
        match self {
            Sweep::EnsembleSize => "m",
            Sweep::Gamma => "gamma",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LorenzPoint {
    pub sweep: Sweep,
    pub filter: String,
    pub m: usize,
    pub gamma: f64,
    /// Time-averaged RMSE of every run, in run order.
    pub runs: Vec<f64>,
}

impl LorenzPoint {
    pub fn mean(&self) -> f64 {
        self.runs.iter().sum::<f64>() / self.runs.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct LorenzReport {
    pub points: Vec<LorenzPoint>,
    pub threshold: f64,
    pub artifacts: Artifacts,
}

impl LorenzReport {
    pub fn point(&self, sweep: Sweep, filter: &str, m: usize, gamma: f64) -> Option<&LorenzPoint> {
        self.points
            .iter()
            .find(|p| p.sweep == sweep && p.filter == filter && p.m == m && p.gamma == gamma)
    }

    pub fn min_converging(&self, filter: &str) -> Option<usize> {
        let pts: Vec<&LorenzPoint> = self
            .points
            .iter()
            .filter(|p| p.sweep == Sweep::EnsembleSize && p.filter == filter)
            .collect();
        min_converging_m(
            &pts.iter().map(|p| (p.m, p.mean())).collect::<Vec<_>>(),
            self.threshold,
        )
    }
}

/// Smallest grid `M` from which every larger grid size has mean RMSE below
/// `threshold`.
pub fn min_converging_m(points: &[(usize, f64)], threshold: f64) -> Option<usize> {
    let mut sorted = points.to_vec();
    sorted.sort_by_key(|p| p.0);
    let mut best = None;
    for &(m, rmse) in sorted.iter().rev() {
        if rmse < threshold {
            best = Some(m);
        } else {
            break;
        }
    }
    best
}

pub fn run_lorenz96(config: &ExperimentConfig) -> Result<LorenzReport> {
    let o = &config.overrides;
    let base = Lorenz96Scenario {
        steps: o.steps.unwrap_or(Lorenz96Scenario::default().steps),
        dt_obs: o.dt.unwrap_or(Lorenz96Scenario::default().dt_obs),
        ..Default::default()
    };
    let burn_in = config.burn_in.unwrap_or(DEFAULT_BURN_IN);
    if burn_in >= base.steps {
        return Err(super::ConfigError {
            line: 0,
            message: format!("burn_in {burn_in} leaves no steps out of {}", base.steps),
        }
        .into());
    }
    let threshold = o.converge_below.unwrap_or(1.0);
    let filters = if config.filters.is_empty() {
        default_filters()
    } else {
        config.filters.clone()
    };
    if let Some(f) = filters.iter().find(|f| !f.kind.is_ensemble()) {
        return Err(super::ConfigError {
            line: 0,
            message: format!("filter '{}' is not an ensemble filter", f.name),
        }
        .into());
    }
    let both = o.m_list.is_none() && o.gamma_list.is_none();
    let mut grid: Vec<(Sweep, usize, f64)> = Vec::new();
    if o.m_list.is_some() || both {
        let gamma = o.gamma.unwrap_or(base.gamma);
        for &m in o.m_list.as_deref().unwrap_or(&DEFAULT_M_LIST) {
            grid.push((Sweep::EnsembleSize, m, gamma));
        }
    }
    if o.gamma_list.is_some() || both {
        let m = o.m.unwrap_or(25);
        for &g in o.gamma_list.as_deref().unwrap_or(&DEFAULT_GAMMA_LIST) {
            grid.push((Sweep::Gamma, m, g));
        }
    }
    if let Some(&(_, m, _)) = grid.iter().find(|p| p.1 < 2) {
        return Err(super::ConfigError {
            line: 0,
            message: format!("ensemble size {m} is below 2"),
        }
        .into());
    }

    // One truth per (gamma, run), shared by every filter and ensemble size.
    let mut gammas: Vec<f64> = grid.iter().map(|p| p.2).collect();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    let seed = config.seed;
    let n_runs = config.n_runs;
    let truths: Vec<Vec<Lorenz96Truth>> = gammas
        .iter()
        .map(|&gamma| {
            let sc = Lorenz96Scenario { gamma, ..base.clone() };
            par_runs(n_runs, |i| sc.simulate(&mut truth_rng(seed, i)))
                .into_iter()
                .collect::<crate::error::Result<Vec<_>>>()
        })
        .collect::<crate::error::Result<_>>()?;

    let tasks: Vec<(usize, usize, usize)> = (0..grid.len())
        .flat_map(|p| (0..filters.len()).flat_map(move |f| (0..n_runs).map(move |r| (p, f, r))))
        .collect();
    let values = par_runs(tasks.len(), |t| {
        let (p, f, r) = tasks[t];
        let (_, m, gamma) = grid[p];
        let g = gammas.iter().position(|&x| x == gamma).expect("gamma listed");
        let sc = Lorenz96Scenario { gamma, ..base.clone() };
        let spec = &filters[f];
        let mut rng = filter_rng(seed, r, &spec.name);
        assimilate(spec, &sc, &truths[g][r], m, burn_in, &mut rng)
    });

    let mut artifacts = Artifacts::default();
    let mut points = Vec::new();
    for (p, &(sweep, m, gamma)) in grid.iter().enumerate() {
        for (f, spec) in filters.iter().enumerate() {
            let start = (p * filters.len() + f) * n_runs;
            let runs = values[start..start + n_runs].to_vec();
            for (r, v) in runs.iter().enumerate() {
                artifacts.row(
                    "runs.csv",
                    "sweep,filter,M,gamma,run,rmse",
                    format_args!("{},{},{m},{},{r},{}", sweep.name(), spec.name, Float(gamma), Float(*v)),
                );
            }
            let point = LorenzPoint {
                sweep,
                filter: spec.name.clone(),
                m,
                gamma,
                runs,
            };
            let converged = point.runs.iter().filter(|v| **v < threshold).count();
            let diverged = point.runs.iter().filter(|v| !v.is_finite()).count();
            if diverged == n_runs {
                artifacts.all_runs_diverged = true;
            }
            let file = match sweep {
                Sweep::EnsembleSize => "rmse_vs_m.csv",
                Sweep::Gamma => "rmse_vs_gamma.csv",
            };
            artifacts.row(
                file,
                "filter,M,gamma,mean_rmse,converged_runs,diverged_runs",
                format_args!(
                    "{},{m},{},{},{converged},{diverged}",
                    spec.name,
                    Float(gamma),
                    Float(point.mean())
                ),
            );
            points.push(point);
        }
    }
    let report = LorenzReport {
        points,
        threshold,
        artifacts,
    };
    let mut artifacts = report.artifacts.clone();
    artifacts.note(format!(
        "lorenz96: {n_runs} runs per point, burn-in {burn_in}, convergence below {threshold}"
    ));
    if grid.iter().any(|p| p.0 == Sweep::EnsembleSize) {
        for spec in &filters {
            let min = report.min_converging(&spec.name);
            let shown = min.map(|m| m.to_string()).unwrap_or_default();
            artifacts.row(
                "min_converging_m.csv",
                "filter,min_converging_M",
                format_args!("{},{shown}", spec.name),
            );
            artifacts.note(format!(
                "  {:<12} converges from M = {}",
                spec.name,
                min.map(|m| m.to_string()).unwrap_or_else(|| "none".into())
            ));
        }
    }
    for p in &report.points {
        artifacts.note(format!(
            "  {:<5} {:<12} M={:<3} gamma={:<3} mean RMSE {:.3}",
            p.sweep.name(),
            p.filter,
            p.m,
            p.gamma,
            p.mean()
        ));
    }
    Ok(LorenzReport {
        artifacts,
        ..report
    })
}

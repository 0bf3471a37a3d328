//! Seeded experiment campaigns behind the `bruf` command line.
//!
//! Randomness is split per run and per filter: run `i` of filter `name` draws
//! from `split(split(seed, i), name_key(name))`, and the simulated truth of
//! run `i` from `split(split(seed, i), TRUTH_STREAM)`. Runs are spread over a
//! worker pool and collected in run order, so outputs do not depend on the
//! thread count.

pub mod config;
mod lorenz;
pub mod output;
mod range;
mod theorem;
mod tracking;

use std::path::Path;

use nalgebra::DVector;
use rayon::prelude::*;

use crate::belief::{Ensemble, GaussianBelief, MeasurementModel};
use crate::ensemble::{
    bruenkf_update, ec_bruenkf_update, enkf_update, gromov_flow_update, EnsembleOptions,
    EnsembleTrace, EnsembleUpdateConfig, GromovConfig,
};
use crate::error::{FilterError, Result as FilterResult};
use crate::recursive::{
    bruf_update, ec_bruf_update, iekf_update, kalman_update, TraceIterate, UpdateTrace,
};
use crate::rng::{name_key, rng_from_seed, split, FilterRng, TRUTH_STREAM};

pub use config::{ConfigError, ExperimentConfig, FilterKind, FilterSpec, Scenario, ScenarioOverrides};
pub use lorenz::{min_converging_m, run_lorenz96, LorenzPoint, LorenzReport, Sweep};
pub use output::{emit_plot_data, Artifacts};
pub use range::run_range_demo;
pub use theorem::{run_theorem_check, TheoremReport};
pub use tracking::{run_tracking, TrackingReport, TrackingSummary};

/// Environment variable read for the worker count when `--threads` is absent.
pub const THREADS_ENV: &str = "BRUF_THREADS";

pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const BREACH: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGED: i32 = 3;
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("filter failure: {0}")]
    Filter(#[from] FilterError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Io(_) => exit_code::CONFIG,
            HarnessError::Filter(_) => exit_code::DIVERGED,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub fn run_seed(seed: u64, run: usize) -> u64 {
    split(seed, run as u64)
}

pub fn truth_rng(seed: u64, run: usize) -> FilterRng {
    rng_from_seed(split(run_seed(seed, run), TRUTH_STREAM))
}

pub fn filter_rng(seed: u64, run: usize, filter: &str) -> FilterRng {
    rng_from_seed(split(run_seed(seed, run), name_key(filter)))
}

/// Ordered map over run indices on the current worker pool.
pub(crate) fn par_runs<T, F>(n_runs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n_runs).into_par_iter().map(f).collect()
}

/// Runs the scenario named by the config.
pub fn run(config: &ExperimentConfig) -> Result<Artifacts> {
    match config.scenario {
        Scenario::TheoremCheck => run_theorem_check(config).map(|r| r.artifacts),
        Scenario::RangeDemo => run_range_demo(config),
        Scenario::Tracking => run_tracking(config).map(|r| r.artifacts),
        Scenario::Lorenz96 => run_lorenz96(config).map(|r| r.artifacts),
    }
}

/// Runs with `threads` workers (all cores when `None`), writes the artifacts to
/// `out` and returns them with the process exit code.
pub fn execute(config: &ExperimentConfig, threads: Option<usize>, out: &Path) -> Result<(Artifacts, i32)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| ConfigError {
            line: 0,
            message: format!("thread pool: {e}"),
        })?;
    let artifacts = pool.install(|| run(config))?;
    emit_plot_data(&artifacts, config, out)?;
    let code = if artifacts.breach {
        exit_code::BREACH
    } else if artifacts.all_runs_diverged {
        exit_code::DIVERGED
    } else {
        exit_code::SUCCESS
    };
    Ok((artifacts, code))
}

/// One measurement update of a single-belief filter.
pub fn belief_update<M: MeasurementModel + ?Sized>(
    kind: &FilterKind,
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
) -> FilterResult<(GaussianBelief, UpdateTrace)> {
    match kind {
        FilterKind::Ekf => {
            let post = kalman_update(prior, model, y)?;
            let trace = UpdateTrace {
                iterates: vec![TraceIterate {
                    t: 1.0,
                    mean: post.mean.clone(),
                    cov: post.cov.clone(),
                }],
                accepted_steps: 1,
                rejected_steps: 0,
            };
            Ok((post, trace))
        }
        FilterKind::Iekf(s) => iekf_update(prior, model, y, s),
        FilterKind::Bruf(schedule) => bruf_update(prior, model, y, schedule),
        FilterKind::EcBruf(ctrl) => ec_bruf_update(prior, model, y, ctrl),
        _ => Err(FilterError::InvalidParameter(
            "ensemble filter configured for a single-belief scenario".into(),
        )),
    }
}

/// One measurement update of an ensemble filter. Gromov flow needs the
/// companion EKF's predicted belief and returns its update.
pub fn ensemble_update<M: MeasurementModel + ?Sized>(
    kind: &FilterKind,
    ens: &Ensemble,
    companion: Option<&GaussianBelief>,
    model: &M,
    y: &DVector<f64>,
    record_trace: bool,
    rng: &mut FilterRng,
) -> FilterResult<(Ensemble, Option<GaussianBelief>, EnsembleTrace)> {
    let options = EnsembleOptions {
        record_trace,
        ..Default::default()
    };
    match kind {
        FilterKind::Enkf { inflation } => {
            let cfg = EnsembleUpdateConfig {
                schedule: crate::recursive::StepSchedule::Uniform(1),
                inflation: *inflation,
                options,
            };
            if record_trace {
                bruenkf_update(ens, model, y, &cfg, rng).map(|(e, t)| (e, None, t))
            } else {
                enkf_update(ens, model, y, *inflation, options, rng)
                    .map(|e| (e, None, EnsembleTrace::default()))
            }
        }
        FilterKind::Bruenkf {
            schedule,
            inflation,
        } => {
            let cfg = EnsembleUpdateConfig {
                schedule: schedule.clone(),
                inflation: *inflation,
                options,
            };
            bruenkf_update(ens, model, y, &cfg, rng).map(|(e, t)| (e, None, t))
        }
        FilterKind::EcBruenkf {
            ctrl,
            inflation,
            norm,
        } => {
            let options = EnsembleOptions {
                ec_norm: *norm,
                ..options
            };
            ec_bruenkf_update(ens, model, y, ctrl, *inflation, options, rng)
                .map(|(e, t)| (e, None, t))
        }
        FilterKind::Gromov {
            n_steps,
            q,
            resample,
        } => {
            let companion = companion.ok_or_else(|| {
                FilterError::InvalidParameter("gromov flow needs a companion belief".into())
            })?;
            let n = ens.dim();
            let cfg = GromovConfig {
                resample_after_update: *resample,
                ..GromovConfig::new(*n_steps, nalgebra::DMatrix::identity(n, n) * *q)
            };
            gromov_flow_update(ens, model, y, companion, &cfg, rng)
                .map(|(e, c)| (e, Some(c), EnsembleTrace::default()))
        }
        _ => Err(FilterError::InvalidParameter(
            "single-belief filter configured for an ensemble scenario".into(),
        )),
    }
}

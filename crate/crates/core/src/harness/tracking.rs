//! Monte Carlo radar tracking campaign.
//!
//! Records start at the initialization step (step 2, the second measurement)
//! and run through the last step; the first measurement update is at step 3.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use super::config::{ExperimentConfig, FilterKind, FilterSpec};
use super::output::Artifacts;
use super::{belief_update, par_runs, truth_rng, Result};
use crate::belief::DynamicsModel;
use crate::metrics::{snees, Float, time_avg_position_rmse, MetricRow, RunRecord};
use crate::models::{tracking_initialize, TrackingScenario, TrackingTruth, POSITION_INDICES};
use crate::recursive::{ErrorController, IekfSettings, StepSchedule};

/// Step (1-based) of the first recorded estimate.
pub const FIRST_RECORDED_STEP: usize = 2;
/// 1-based step window of the SNEES summary.
pub const SNEES_WINDOW: (usize, usize) = (100, 300);

pub fn default_filters() -> Vec<FilterSpec> {
    let spec = |name: &str, kind| FilterSpec {
        name: name.into(),
        kind,
    };
    vec![
        spec("bruf10", FilterKind::Bruf(StepSchedule::Uniform(10))),
        spec("bruf25", FilterKind::Bruf(StepSchedule::Uniform(25))),
        spec("vs-bruf10", FilterKind::Bruf(StepSchedule::Variable(10))),
        spec("vs-bruf25", FilterKind::Bruf(StepSchedule::Variable(25))),
        spec("ec-bruf", FilterKind::EcBruf(ErrorController::new(1e-7, 1e-7))),
        spec(
            "iekf",
            FilterKind::Iekf(IekfSettings {
                max_iters: 25,
                tol: 1e-9,
                line_search: false,
            }),
        ),
    ]
}

pub fn scenario_from(config: &ExperimentConfig) -> TrackingScenario {
    let o = &config.overrides;
    let d = TrackingScenario::default();
    TrackingScenario {
        dt: o.dt.unwrap_or(d.dt),
        q_tilde: o.q_tilde.unwrap_or(d.q_tilde),
        sigma_r: o.sigma_r.unwrap_or(d.sigma_r),
        sigma_u: o.sigma_u.unwrap_or(d.sigma_u),
        sigma_v: o.sigma_v.unwrap_or(d.sigma_v),
        duration: o.duration.unwrap_or(d.duration),
        ..d
    }
}

/// Runs one filter over one simulated track. A filter failure marks the rest
/// of the run as diverged (non-finite estimates) instead of aborting.
pub fn track(kind: &FilterKind, scenario: &TrackingScenario, truth: &TrackingTruth) -> RunRecord {
    let mut record = RunRecord::default();
    let n = scenario.duration;
    let dynamics = scenario.dynamics();
    let model = scenario.measurement_model();
    let nan = |record: &mut RunRecord, from: usize| {
        for k in from..n {
            record.push(
                truth.states[k].clone(),
                DVector::from_element(6, f64::NAN),
                DMatrix::from_element(6, 6, f64::NAN),
            );
        }
    };
    let mut belief = match tracking_initialize(&truth.measurements[0], &truth.measurements[1], scenario) {
        Ok(b) => b,
        Err(_) => {
            nan(&mut record, 1);
            return record;
        }
    };
    record.push(truth.states[1].clone(), belief.mean.clone(), belief.cov.clone());
    for k in 2..n {
        let step = dynamics
            .predict_belief(&belief, None)
            .and_then(|prior| belief_update(kind, &prior, &model, &truth.measurements[k]));
        match step {
            Ok((post, _)) if post.mean.iter().all(|v| v.is_finite()) => {
                belief = post;
                record.push(truth.states[k].clone(), belief.mean.clone(), belief.cov.clone());
            }
            _ => {
                nan(&mut record, k);
                return record;
            }
        }
    }
    record
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingSummary {
    pub filter: String,
    /// Time-averaged position RMSE in metres.
    pub position_rmse: f64,
    /// Mean SNEES over the summary window.
    pub snees_mean: f64,
    pub diverged_runs: usize,
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrackingReport {
    pub summaries: Vec<TrackingSummary>,
    pub artifacts: Artifacts,
}

impl TrackingReport {
    pub fn get(&self, filter: &str) -> Option<&TrackingSummary> {
        self.summaries.iter().find(|s| s.filter == filter)
    }
}

pub fn run_tracking(config: &ExperimentConfig) -> Result<TrackingReport> {
    let scenario = scenario_from(config);
    if scenario.duration < 3 {
        return Err(super::ConfigError {
            line: 0,
            message: "tracking needs duration >= 3".into(),
        }
        .into());
    }
    let filters = if config.filters.is_empty() {
        default_filters()
    } else {
        config.filters.clone()
    };
    if let Some(f) = filters.iter().find(|f| f.kind.is_ensemble()) {
        return Err(super::ConfigError {
            line: 0,
            message: format!("filter '{}' is an ensemble filter; tracking runs single-belief filters", f.name),
        }
        .into());
    }
    let seed = config.seed;
    let truths: Vec<TrackingTruth> = par_runs(config.n_runs, |i| scenario.simulate(&mut truth_rng(seed, i)))
        .into_iter()
        .collect::<crate::error::Result<_>>()?;

    let mut artifacts = Artifacts::default();
    let mut summaries = Vec::new();
    let (w0, w1) = SNEES_WINDOW;
    let burn_in = config.burn_in.unwrap_or(0);
    for spec in &filters {
        let start = Instant::now();
        let records: Vec<RunRecord> = par_runs(truths.len(), |i| track(&spec.kind, &scenario, &truths[i]));
        let wall_time = start.elapsed().as_secs_f64();
        let diverged_runs = records.iter().filter(|r| r.diverged()).count();

        let rmse = time_avg_position_rmse(&records, &POSITION_INDICES, burn_in)?;
        let series = snees(&records, 0)?;
        let lo = w0.saturating_sub(FIRST_RECORDED_STEP).min(series.values.len());
        let hi = (w1 + 1 - FIRST_RECORDED_STEP).min(series.values.len());
        let snees_mean = if lo < hi { series.mean_over(lo..hi) } else { f64::NAN };

        for (idx, value) in series.values.iter().enumerate() {
            let step = idx + FIRST_RECORDED_STEP;
            let per_step = step_rmse(&records, idx);
            artifacts.row(
                "per_step.csv",
                "filter,step,position_rmse,snees",
                format_args!("{},{step},{},{}", spec.name, Float(per_step), Float(*value)),
            );
        }
        for (name, value) in [
            ("time_avg_position_rmse_m", rmse),
            ("snees_mean_100_300", snees_mean),
            ("diverged_runs", diverged_runs as f64),
        ] {
            let row = MetricRow {
                filter: spec.name.clone(),
                n: spec.kind.steps(),
                m: None,
                gamma: None,
                seed_base: seed,
                metric_name: name.into(),
                value,
            };
            artifacts.row("table.csv", MetricRow::HEADER, format_args!("{row}"));
        }
        artifacts.note(format!(
            "  {:<12} position RMSE {:.3} km, SNEES[{w0},{w1}] {snees_mean:.3}, diverged {diverged_runs}/{}, wall {wall_time:.2} s",
            spec.name,
            rmse / 1000.0,
            records.len()
        ));
        if diverged_runs == records.len() {
            artifacts.all_runs_diverged = true;
        }
        summaries.push(TrackingSummary {
            filter: spec.name.clone(),
            position_rmse: rmse,
            snees_mean,
            diverged_runs,
            wall_time,
        });
    }
    artifacts.summary.insert(
        0,
        format!("tracking: {} runs, {} steps", config.n_runs, scenario.duration),
    );
    Ok(TrackingReport {
        summaries,
        artifacts,
    })
}

/// Cross-run RMS position error at record index `k`.
fn step_rmse(records: &[RunRecord], k: usize) -> f64 {
    let sq: f64 = records
        .iter()
        .map(|r| {
            let e = r.error(k);
            POSITION_INDICES.iter().map(|&i| e[i] * e[i]).sum::<f64>()
        })
        .sum();
    (sq / records.len() as f64).sqrt()
}

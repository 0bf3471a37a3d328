//! Random sweeps checking that linear recursive updates reproduce the single
//! Kalman update.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::config::ExperimentConfig;
use super::output::Artifacts;
use super::Result;
use crate::metrics::Float;
use crate::belief::{standard_normal, GaussianBelief, LinearMeasurement};
use crate::recursive::{
    information_update, kalman_update, recursive_update_raw, StepSchedule, UpdateOptions,
};
use crate::rng::rng_from_seed;

pub const DEFAULT_STEP_COUNTS: [usize; 6] = [1, 2, 3, 5, 10, 20];
const MAX_STATE: usize = 8;
const MAX_MEAS: usize = 6;

#[derive(Clone, Debug)]
pub struct LinearProblem {
    pub prior: GaussianBelief,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub y: DVector<f64>,
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| standard_normal(rng))
}

/// `A Aᵀ / n + 0.1 I`: SPD with a modest condition number.
fn random_spd<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = gaussian_matrix(n, n, rng);
    let mut p = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.1;
    crate::linalg::symmetrize_mut(&mut p);
    p
}

pub fn random_problem<R: Rng + ?Sized>(rng: &mut R) -> LinearProblem {
    let n = rng.random_range(1..=MAX_STATE);
    let m = rng.random_range(1..=MAX_MEAS);
    let mean = DVector::from_fn(n, |_, _| standard_normal(rng));
    let cov = random_spd(n, rng);
    let h = gaussian_matrix(m, n, rng);
    let r = random_spd(m, rng);
    let y = DVector::from_fn(m, |_, _| standard_normal(rng));
    LinearProblem {
        prior: GaussianBelief { mean, cov },
        h,
        r,
        y,
    }
}

/// Positive coefficients summing to one, of random length in `2..=20`.
pub fn random_schedule<R: Rng + ?Sized>(rng: &mut R) -> Vec<f64> {
    let n = rng.random_range(2..=20);
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|c| c / total).collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Deviation {
    /// `‖P_N − P_K‖_F / ‖P_K‖_F`.
    pub cov: f64,
    /// `‖x_N − x_K‖ / (1 + ‖x_K‖)`.
    pub state: f64,
}

impl Deviation {
    pub fn worst(&self) -> f64 {
        self.cov.max(self.state)
    }

    fn between(got: &GaussianBelief, want: &GaussianBelief) -> Self {
        Deviation {
            cov: (&got.cov - &want.cov).norm() / want.cov.norm(),
            state: (&got.mean - &want.mean).norm() / (1.0 + want.mean.norm()),
        }
    }
}

/// Deviation of the recursive update with `coefficients` (scaled so they sum
/// to `sum`) from the Kalman update.
pub fn schedule_deviation(problem: &LinearProblem, schedule: &StepSchedule, sum: f64) -> crate::error::Result<Deviation> {
    let model = LinearMeasurement::new(problem.h.clone(), problem.r.clone())?;
    let want = kalman_update(&problem.prior, &model, &problem.y)?;
    let coefficients: Vec<f64> = schedule
        .coefficients()
        .unwrap_or_default()
        .into_iter()
        .map(|c| c * sum)
        .collect();
    let scales: Vec<f64> = if sum == 1.0 {
        schedule.noise_scales().unwrap_or_default()
    } else {
        coefficients.iter().map(|c| 1.0 / c).collect()
    };
    let (got, _) = recursive_update_raw(
        &problem.prior,
        &model,
        &problem.y,
        &coefficients,
        &scales,
        UpdateOptions::default(),
    )?;
    Ok(Deviation::between(&got, &want))
}

#[derive(Clone, Debug)]
pub struct WorstCase {
    pub label: String,
    pub coefficients: Vec<f64>,
    pub problem: LinearProblem,
    pub deviation: Deviation,
}

#[derive(Clone, Debug)]
pub struct TheoremReport {
    /// Largest deviation over every sweep.
    pub max_deviation: Deviation,
    /// Largest deviation over the `N = 1` rows.
    pub max_single_step: Deviation,
    pub worst: Option<WorstCase>,
    pub artifacts: Artifacts,
}

fn matrix_json(m: &DMatrix<f64>) -> serde_json::Value {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect::<Vec<f64>>())
        .collect::<Vec<_>>()
        .into()
}

fn worst_case_json(w: &WorstCase) -> String {
    let p = &w.problem;
    let value = serde_json::json!({
        "schedule": w.label,
        "coefficients": w.coefficients,
        "prior_mean": p.prior.mean.iter().copied().collect::<Vec<f64>>(),
        "prior_cov": matrix_json(&p.prior.cov),
        "h": matrix_json(&p.h),
        "r": matrix_json(&p.r),
        "y": p.y.iter().copied().collect::<Vec<f64>>(),
        "cov_deviation": w.deviation.cov,
        "state_deviation": w.deviation.state,
    });
    let mut s = serde_json::to_string_pretty(&value).expect("worst case serializes");
    s.push('\n');
    s
}

type GroupKey = (usize, usize, usize, &'static str);

pub fn run_theorem_check(config: &ExperimentConfig) -> Result<TheoremReport> {
    let o = &config.overrides;
    let problems = o.problems.unwrap_or(500);
    let schedules = o.schedules.unwrap_or(100);
    let tolerance = o.tolerance.unwrap_or(1e-10);
    let sum = o.schedule_sum.unwrap_or(1.0);
    let step_counts = o.n_list.clone().unwrap_or_else(|| DEFAULT_STEP_COUNTS.to_vec());

    let mut rng = rng_from_seed(config.seed);
    let instances: Vec<LinearProblem> = (0..problems).map(|_| random_problem(&mut rng)).collect();

    let mut groups: BTreeMap<GroupKey, (usize, Deviation)> = BTreeMap::new();
    let mut max_deviation = Deviation::default();
    let mut max_single_step = Deviation::default();
    let mut worst: Option<WorstCase> = None;
    let mut record = |key: GroupKey, dev: Deviation, schedule: &StepSchedule, problem: &LinearProblem| {
        let g = groups.entry(key).or_default();
        g.0 += 1;
        g.1.cov = g.1.cov.max(dev.cov);
        g.1.state = g.1.state.max(dev.state);
        max_deviation.cov = max_deviation.cov.max(dev.cov);
        max_deviation.state = max_deviation.state.max(dev.state);
        if key.2 == 1 && key.3 != "information" {
            max_single_step.cov = max_single_step.cov.max(dev.cov);
            max_single_step.state = max_single_step.state.max(dev.state);
        }
        if worst.as_ref().is_none_or(|w| dev.worst() > w.deviation.worst()) {
            worst = Some(WorstCase {
                label: key.3.to_string(),
                coefficients: schedule.coefficients().unwrap_or_default(),
                problem: problem.clone(),
                deviation: dev,
            });
        }
    };

    for problem in &instances {
        let (n, m) = (problem.prior.dim(), problem.y.len());
        for &steps in &step_counts {
            for (label, schedule) in [
                ("uniform", StepSchedule::Uniform(steps)),
                ("variable", StepSchedule::Variable(steps)),
            ] {
                let dev = schedule_deviation(problem, &schedule, sum)?;
                record((n, m, steps, label), dev, &schedule, problem);
            }
        }
        let model = LinearMeasurement::new(problem.h.clone(), problem.r.clone())?;
        let info = information_update(&problem.prior, &model, &problem.y)?;
        let kalman = kalman_update(&problem.prior, &model, &problem.y)?;
        let dev = Deviation::between(&info, &kalman);
        record((n, m, 1, "information"), dev, &StepSchedule::Uniform(1), problem);
    }
    for i in 0..schedules {
        let problem = &instances[i % instances.len().max(1)];
        let schedule = StepSchedule::Custom(random_schedule(&mut rng));
        let dev = schedule_deviation(problem, &schedule, sum)?;
        record(
            (problem.prior.dim(), problem.y.len(), schedule.len(), "random"),
            dev,
            &schedule,
            problem,
        );
    }

    let mut artifacts = Artifacts::default();
    let header = "n,m,N,schedule,problems,max_cov_deviation,max_state_deviation";
    for ((n, m, steps, label), (count, dev)) in &groups {
        artifacts.row(
            "theorem_check.csv",
            header,
            format_args!("{n},{m},{steps},{label},{count},{},{}", Float(dev.cov), Float(dev.state)),
        );
    }
    artifacts.breach = max_deviation.worst() > tolerance;
    artifacts.note(format!(
        "theorem-check: {problems} problems, {schedules} random schedules, max cov deviation {:.3e}, max state deviation {:.3e}, N=1 max {:.3e} (tolerance {tolerance:e})",
        max_deviation.cov,
        max_deviation.state,
        max_single_step.worst(),
    ));
    if artifacts.breach {
        if let Some(w) = &worst {
            artifacts.files.insert("worst_case.json".into(), worst_case_json(w));
            artifacts.note(format!(
                "tolerance exceeded: worst case ({}) written to worst_case.json",
                w.label
            ));
        }
    }
    Ok(TheoremReport {
        max_deviation,
        max_single_step,
        worst,
        artifacts,
    })
}

//! Single-update demo on the two-dimensional range example.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::config::{ExperimentConfig, FilterKind, FilterSpec};
use super::output::Artifacts;
use super::{belief_update, ensemble_update, filter_rng, truth_rng, Result};
use crate::belief::{empirical_moments, Ensemble, GaussianBelief};
use crate::ensemble::EnsembleErrorNorm;
use crate::metrics::{Float, MetricRow};
use crate::models::RangeScenario;
use crate::oracle::{grid_posterior, hdr_mask, refined_map, GridBounds, GridPosterior, HdrMask};
use crate::recursive::{ErrorController, IekfSettings, StepSchedule};

const DEFAULT_N_LIST: [usize; 10] = [1, 2, 3, 5, 7, 10, 15, 20, 25, 50];
const RING_BAND: f64 = 0.3;
const HDR_MASS: f64 = 0.99;

fn iekf(max_iters: usize, line_search: bool) -> FilterKind {
    FilterKind::Iekf(IekfSettings {
        max_iters,
        line_search,
        ..Default::default()
    })
}

/// The filter set used when the config lists none.
pub fn default_filters() -> Vec<FilterSpec> {
    let spec = |name: &str, kind| FilterSpec {
        name: name.into(),
        kind,
    };
    vec![
        spec("ekf", FilterKind::Ekf),
        spec("iekf", iekf(25, false)),
        spec("iekf-ls", iekf(25, true)),
        spec("bruf", FilterKind::Bruf(StepSchedule::Uniform(25))),
        spec("vs-bruf", FilterKind::Bruf(StepSchedule::Variable(25))),
        spec("ec-bruf", FilterKind::EcBruf(ErrorController::new(0.1, 0.1))),
        spec("enkf", FilterKind::Enkf { inflation: 1.0 }),
        spec(
            "bruenkf",
            FilterKind::Bruenkf {
                schedule: StepSchedule::Uniform(25),
                inflation: 1.0,
            },
        ),
        spec(
            "vs-bruenkf",
            FilterKind::Bruenkf {
                schedule: StepSchedule::Variable(25),
                inflation: 1.0,
            },
        ),
        spec(
            "ec-bruenkf",
            FilterKind::EcBruenkf {
                ctrl: ErrorController::new(1e-3, 1e-3),
                inflation: 1.0,
                norm: EnsembleErrorNorm::MaxMember,
            },
        ),
    ]
}

/// Smaller eigenvalue and its eigenvector, signed to agree with `reference`.
fn minor_axis(cov: &DMatrix<f64>, reference: Option<&DVector<f64>>) -> (f64, f64, DVector<f64>) {
    let eig = SymmetricEigen::new(cov.clone());
    let (lo, hi) = if eig.eigenvalues[0] <= eig.eigenvalues[1] {
        (0, 1)
    } else {
        (1, 0)
    };
    let mut e = eig.eigenvectors.column(lo).into_owned();
    if let Some(r) = reference {
        if e.dot(r) < 0.0 {
            e = -e;
        }
    }
    (eig.eigenvalues[lo], eig.eigenvalues[hi], e)
}

struct Diagnostics {
    oracle_sigma2: f64,
    oracle_e2: DVector<f64>,
}

impl Diagnostics {
    /// `(σ₁, ‖σ₂e₂ − σ̂₂ê₂‖)` of a filter covariance against the oracle.
    fn of(&self, cov: &DMatrix<f64>) -> (f64, f64) {
        let (s2, s1, e2) = minor_axis(cov, Some(&self.oracle_e2));
        let diff = (&self.oracle_e2 * self.oracle_sigma2 - e2 * s2).norm();
        (s1, diff)
    }
}

fn write_belief_trace(artifacts: &mut Artifacts, name: &str, prior: &GaussianBelief, iterates: &[(f64, DVector<f64>, DMatrix<f64>)]) {
    let file = format!("traces/{name}.csv");
    let header = "iterate,t,x,y,p_xx,p_xy,p_yy";
    let rows = std::iter::once((0.0, prior.mean.clone(), prior.cov.clone())).chain(iterates.iter().cloned());
    for (i, (t, m, p)) in rows.enumerate() {
        artifacts.row(
            &file,
            header,
            format_args!(
                "{i},{},{},{},{},{},{}",
                Float(t),
                Float(m[0]),
                Float(m[1]),
                Float(p[(0, 0)]),
                Float(p[(0, 1)]),
                Float(p[(1, 1)])
            ),
        );
    }
}

fn write_ensemble_trace(artifacts: &mut Artifacts, name: &str, snapshots: &[(f64, &Ensemble)]) {
    let file = format!("traces/{name}.csv");
    let header = "iterate,t,member,x,y";
    for (i, (t, ens)) in snapshots.iter().enumerate() {
        for (j, x) in ens.members().enumerate() {
            artifacts.row(&file, header, format_args!("{i},{},{j},{},{}", Float(*t), Float(x[0]), Float(x[1])));
        }
    }
}

fn ensemble_fractions(ens: &Ensemble, grid: &GridPosterior, hdr: &HdrMask) -> (f64, f64) {
    let m = ens.len() as f64;
    let ring = ens.members().filter(|x| (x.norm() - 1.0).abs() <= RING_BAND).count() as f64;
    let inside = ens.members().filter(|x| hdr.contains(grid, x)).count() as f64;
    (ring / m, inside / m)
}

pub fn run_range_demo(config: &ExperimentConfig) -> Result<Artifacts> {
    let o = &config.overrides;
    let scenario = RangeScenario::default();
    let model = scenario.model();
    let prior = scenario.prior.clone();
    let y = scenario.measurement();
    let resolution = o.grid_resolution.unwrap_or(800);
    let ensemble_size = o.ensemble_size.unwrap_or(200);
    let n_list = o.n_list.clone().unwrap_or_else(|| DEFAULT_N_LIST.to_vec());
    let filters = if config.filters.is_empty() {
        default_filters()
    } else {
        config.filters.clone()
    };

    let grid = grid_posterior(&prior, &model, &y, GridBounds::default(), resolution)?;
    let map = refined_map(&grid);
    let hdr = hdr_mask(&grid, HDR_MASS)?;
    let oracle = grid.moments();
    let (oracle_sigma2, oracle_sigma1, oracle_e2) = minor_axis(&oracle.cov, None);
    let diag = Diagnostics {
        oracle_sigma2,
        oracle_e2,
    };

    let mut artifacts = Artifacts::default();
    let mut grid_csv = Vec::new();
    grid.write_csv(&mut grid_csv)?;
    artifacts
        .files
        .insert("grid.csv".into(), String::from_utf8(grid_csv).expect("csv is utf-8"));
    artifacts.row(
        "oracle.csv",
        "map_x,map_y,mean_x,mean_y,sigma1,sigma2,e2_x,e2_y,hdr99_enclosed",
        format_args!(
            "{},{},{},{},{},{},{},{},{}",
            Float(map[0]),
            Float(map[1]),
            Float(oracle.mean[0]),
            Float(oracle.mean[1]),
            Float(oracle_sigma1),
            Float(oracle_sigma2),
            Float(diag.oracle_e2[0]),
            Float(diag.oracle_e2[1]),
            Float(hdr.enclosed)
        ),
    );
    artifacts.note(format!(
        "range-demo: oracle MAP ({:.5}, {:.5}) at resolution {resolution}",
        map[0], map[1]
    ));

    let initial = Ensemble::sample(&prior, ensemble_size, &mut truth_rng(config.seed, 0))?;
    let summary = "summary.csv";
    let metric = |artifacts: &mut Artifacts, spec: &FilterSpec, name: &str, value: f64| {
        let row = MetricRow {
            filter: spec.name.clone(),
            n: spec.kind.steps(),
            m: spec.kind.is_ensemble().then_some(ensemble_size),
            gamma: None,
            seed_base: config.seed,
            metric_name: name.into(),
            value,
        };
        artifacts.row(summary, MetricRow::HEADER, format_args!("{row}"));
    };

    for spec in &filters {
        if spec.kind.is_ensemble() {
            let mut rng = filter_rng(config.seed, 0, &spec.name);
            let companion = matches!(spec.kind, FilterKind::Gromov { .. }).then(|| prior.clone());
            let (post, _, trace) = ensemble_update(
                &spec.kind,
                &initial,
                companion.as_ref(),
                &model,
                &y,
                true,
                &mut rng,
            )?;
            let mut snaps: Vec<(f64, &Ensemble)> = vec![(0.0, &initial)];
            snaps.extend(trace.snapshots.iter().map(|s| (s.t, &s.ensemble)));
            if trace.snapshots.is_empty() {
                snaps.push((1.0, &post));
            }
            write_ensemble_trace(&mut artifacts, &spec.name, &snaps);
            let (mean, cov) = empirical_moments(&post)?;
            let dist = (&mean - &map).norm();
            let (ring, inside) = ensemble_fractions(&post, &grid, &hdr);
            let (s1, diff) = diag.of(&cov);
            metric(&mut artifacts, spec, "mean_distance_to_map", dist);
            metric(&mut artifacts, spec, "ring_fraction", ring);
            metric(&mut artifacts, spec, "hdr99_fraction", inside);
            metric(&mut artifacts, spec, "accepted_steps", trace.accepted_steps.max(1) as f64);
            metric(&mut artifacts, spec, "rejected_steps", trace.rejected_steps as f64);
            metric(&mut artifacts, spec, "sigma1", s1);
            metric(&mut artifacts, spec, "sigma2_e2_difference", diff);
            artifacts.note(format!(
                "  {:<12} mean distance {dist:.4}, ring {:.0}%, HDR99 {:.0}%, steps {}",
                spec.name,
                ring * 100.0,
                inside * 100.0,
                trace.accepted_steps.max(1)
            ));
        } else {
            let (post, trace) = belief_update(&spec.kind, &prior, &model, &y)?;
            let iterates: Vec<_> = trace
                .iterates
                .iter()
                .map(|it| (it.t, it.mean.clone(), it.cov.clone()))
                .collect();
            write_belief_trace(&mut artifacts, &spec.name, &prior, &iterates);
            let dist = (&post.mean - &map).norm();
            let (s1, diff) = diag.of(&post.cov);
            metric(&mut artifacts, spec, "distance_to_map", dist);
            metric(&mut artifacts, spec, "accepted_steps", trace.accepted_steps as f64);
            metric(&mut artifacts, spec, "rejected_steps", trace.rejected_steps as f64);
            metric(&mut artifacts, spec, "sigma1", s1);
            metric(&mut artifacts, spec, "sigma2_e2_difference", diff);
            artifacts.note(format!(
                "  {:<12} distance {dist:.4}, steps {}",
                spec.name, trace.accepted_steps
            ));
        }
    }

    // Distance to the MAP and covariance diagnostics against the step count.
    let header = "filter,N,distance_to_map,sigma1,sigma2_e2_difference";
    for &n in &n_list {
        for (name, kind) in [
            ("bruf", FilterKind::Bruf(StepSchedule::Uniform(n))),
            ("vs-bruf", FilterKind::Bruf(StepSchedule::Variable(n))),
            ("iekf", iekf(n, false)),
            ("iekf-ls", iekf(n, true)),
        ] {
            let (post, _) = belief_update(&kind, &prior, &model, &y)?;
            let (s1, diff) = diag.of(&post.cov);
            artifacts.row(
                "convergence.csv",
                header,
                format_args!(
                    "{name},{n},{},{},{}",
                    Float((&post.mean - &map).norm()),
                    Float(s1),
                    Float(diff)
                ),
            );
        }
    }
    let ekf = belief_update(&FilterKind::Ekf, &prior, &model, &y)?.0;
    let (s1, diff) = diag.of(&ekf.cov);
    artifacts.row(
        "convergence.csv",
        header,
        format_args!(
            "ekf,1,{},{},{}",
            Float((&ekf.mean - &map).norm()),
            Float(s1),
            Float(diff)
        ),
    );
    Ok(artifacts)
}


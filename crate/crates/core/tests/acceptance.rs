//! One test per acceptance criterion. Each prints a single
//! `criterion N ...: PASS|FAIL` line with the measured values before asserting.
//!
//! Criteria 7 and 8 run a reduced sweep by default; set
//! `BRUF_FULL_ACCEPTANCE=1` for the full 10-run sweeps (tens of minutes).

use std::sync::OnceLock;
use std::time::Instant;

use bruf::belief::{
    empirical_moments, Ensemble, GaussianBelief, LinearMeasurement, MeasurementModel,
};
use bruf::ensemble::{bruenkf_update, ec_bruenkf_update, enkf_update, EnsembleOptions, EnsembleUpdateConfig};
use bruf::harness::{run_lorenz96, run_theorem_check, run_tracking, ExperimentConfig, Sweep, TrackingReport};
use bruf::models::{range_model, ruv_model, RangeScenario};
use bruf::oracle::{grid_posterior, map_of, refined_map, GridBounds, GridPosterior};
use bruf::recursive::{
    bruf_update, ec_bruf_update, iekf_update, kalman_update, ErrorController, IekfSettings,
    StepSchedule,
};
use bruf::rng::rng_from_seed;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const SEED: u64 = 20261016;

fn full() -> bool {
    std::env::var("BRUF_FULL_ACCEPTANCE").is_ok_and(|v| v == "1")
}

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {n} ({name}): {} | {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
}

fn config(text: &str) -> ExperimentConfig {
    text.parse().expect("valid config")
}

// 1 -------------------------------------------------------------------------

#[test]
fn criterion_01_theorem_equivalence() {
    let start = Instant::now();
    let r = run_theorem_check(&config("scenario = theorem-check\nseed = 1\n")).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = r.max_deviation.worst();
    let pass = worst < 1e-10 && secs < 10.0;
    report(
        1,
        "theorem equivalence",
        pass,
        &format!(
            "max relative deviation {worst:.3e} (< 1e-10), cov {:.3e}, state {:.3e}, {secs:.2} s (< 10 s)",
            r.max_deviation.cov, r.max_deviation.state
        ),
    );
    assert!(pass);
}

// 2 -------------------------------------------------------------------------

fn random_spd<R: Rng>(n: usize, rng: &mut R) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let mut p = &a * a.transpose() + DMatrix::identity(n, n) * 0.2;
    p = (&p + p.transpose()) * 0.5;
    p
}

fn same(a: &GaussianBelief, b: &GaussianBelief) -> bool {
    a.mean == b.mean && a.cov == b.cov
}

#[test]
fn criterion_02_single_step_degeneracy() {
    let start = Instant::now();
    let mut rng = rng_from_seed(2);
    let range = range_model();
    let ruv = ruv_model(2.5, 1e-3, 1e-3);
    let mut mismatches = 0;
    for i in 0..100 {
        let (prior, y, model): (GaussianBelief, DVector<f64>, &dyn MeasurementModel) = if i % 2 == 0 {
            let mean = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let y = DVector::from_element(1, rng.random_range(0.5..2.0));
            (GaussianBelief::new(mean, random_spd(2, &mut rng)).unwrap(), y, &range)
        } else {
            let mean = DVector::from_fn(6, |_, _| rng.random_range(5e5..1.5e6));
            let cov = random_spd(6, &mut rng) * 100.0;
            let prior = GaussianBelief::new(mean, cov).unwrap();
            let y = ruv.observe(&prior.mean)
                + DVector::from_vec(vec![rng.random_range(-5.0..5.0), 1e-3, -1e-3]);
            (prior, y, &ruv)
        };
        let ekf = kalman_update(&prior, model, &y).unwrap();
        let one_iter = IekfSettings {
            max_iters: 1,
            ..Default::default()
        };
        let candidates = [
            bruf_update(&prior, model, &y, &StepSchedule::Uniform(1)).unwrap().0,
            bruf_update(&prior, model, &y, &StepSchedule::Variable(1)).unwrap().0,
            iekf_update(&prior, model, &y, &one_iter).unwrap().0,
        ];
        mismatches += candidates.iter().filter(|c| !same(c, &ekf)).count();
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatches == 0 && secs < 5.0;
    report(
        2,
        "N = 1 degeneracy",
        pass,
        &format!("{mismatches} of 300 BRUF/VS-BRUF/IEKF updates differ bitwise from the EKF, {secs:.2} s (< 5 s)"),
    );
    assert!(pass);
}

// 3, 4, 10 ------------------------------------------------------------------

fn range_grid(resolution: usize) -> GridPosterior {
    let sc = RangeScenario::default();
    grid_posterior(&sc.prior, &sc.model(), &sc.measurement(), GridBounds::default(), resolution).unwrap()
}

fn range_update(run: impl Fn(&GaussianBelief, &dyn MeasurementModel, &DVector<f64>) -> GaussianBelief) -> DVector<f64> {
    let sc = RangeScenario::default();
    run(&sc.prior, &sc.model(), &sc.measurement()).mean
}

#[test]
fn criterion_03_range_map_convergence() {
    let start = Instant::now();
    let grid = range_grid(800);
    let map = refined_map(&grid);
    let self_converged = (refined_map(&range_grid(1600)) - &map).norm();
    let ls = |n| IekfSettings {
        max_iters: n,
        line_search: true,
        ..Default::default()
    };
    let dist = |x: DVector<f64>| (x - &map).norm();
    let mut rows = Vec::new();
    for n in [25, 10] {
        rows.push((format!("BRUF({n})"), dist(range_update(|p, m, y| bruf_update(p, m, y, &StepSchedule::Uniform(n)).unwrap().0))));
        rows.push((format!("VS-BRUF({n})"), dist(range_update(|p, m, y| bruf_update(p, m, y, &StepSchedule::Variable(n)).unwrap().0))));
        rows.push((format!("IEKF-LS({n})"), dist(range_update(|p, m, y| iekf_update(p, m, y, &ls(n)).unwrap().0))));
        let ctrl = ErrorController {
            initial_steps: n,
            ..ErrorController::new(0.1, 0.1)
        };
        rows.push((format!("EC-BRUF(0.1, N0={n})"), dist(range_update(|p, m, y| ec_bruf_update(p, m, y, &ctrl).unwrap().0))));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = rows.iter().all(|(_, d)| *d < 0.05) && secs < 30.0 && self_converged < 0.05;
    let detail = rows
        .iter()
        .map(|(n, d)| format!("{n} {d:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        3,
        "range MAP convergence",
        pass,
        &format!("distances to MAP (< 0.05): {detail}; oracle 800 vs 1600 MAP shift {self_converged:.2e}; {secs:.1} s (< 30 s)"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_ec_bruf_step_count() {
    let sc = RangeScenario::default();
    let (_, trace) = ec_bruf_update(&sc.prior, &sc.model(), &sc.measurement(), &ErrorController::new(0.1, 0.1)).unwrap();
    let n = trace.accepted_steps;
    let pass = (7..=13).contains(&n);
    report(
        4,
        "EC-BRUF step count",
        pass,
        &format!("{n} accepted steps, {} rejected (target 10 +/- 3)", trace.rejected_steps),
    );
    assert!(pass);
}

// 5, 6 ----------------------------------------------------------------------

const TRACKING_CONFIG: &str = "
scenario = tracking
n_runs = 100
seed = 20261016
[filter bruf10]
kind = bruf
n = 10
[filter bruf25]
kind = bruf
n = 25
[filter vs-bruf10]
kind = bruf
schedule = variable
n = 10
[filter vs-bruf25]
kind = bruf
schedule = variable
n = 25
[filter ec-bruf]
kind = ec-bruf
tol = 1e-7
n0 = 25
[filter iekf]
kind = iekf
max_iters = 25
tol = 1e-9
";

fn tracking() -> &'static TrackingReport {
    static REPORT: OnceLock<TrackingReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = config(TRACKING_CONFIG);
        assert_eq!(cfg.seed, SEED);
        run_tracking(&cfg).unwrap()
    })
}

#[test]
fn criterion_05_tracking_rmse() {
    let r = tracking();
    let targets = [
        ("bruf10", 0.87),
        ("bruf25", 0.71),
        ("vs-bruf10", 0.65),
        ("vs-bruf25", 0.60),
        ("ec-bruf", 0.59),
        ("iekf", 0.59),
    ];
    let km = |f: &str| r.get(f).unwrap().position_rmse / 1000.0;
    let mut pass = true;
    let mut parts = Vec::new();
    for (f, target) in targets {
        let v = km(f);
        let ok = (v - target).abs() <= 0.2 * target;
        pass &= ok;
        parts.push(format!("{f} {v:.3} km (target {target}, {:+.0}%)", 100.0 * (v / target - 1.0)));
    }
    let ordered = km("bruf10") > km("bruf25")
        && km("bruf25") > km("vs-bruf10")
        && km("vs-bruf10") > km("vs-bruf25")
        && km("vs-bruf25") >= km("iekf");
    pass &= ordered;
    report(
        5,
        "tracking RMSE, 100 runs, +/-20%",
        pass,
        &format!("{}; ordering {}", parts.join(", "), if ordered { "holds" } else { "violated" }),
    );
    assert!(pass);
}

#[test]
fn criterion_06_tracking_snees() {
    let r = tracking();
    let s = |f: &str| r.get(f).unwrap().snees_mean;
    let mut pass = true;
    let mut parts = Vec::new();
    for f in ["iekf", "vs-bruf25", "ec-bruf"] {
        let ok = (0.5..=1.5).contains(&s(f));
        pass &= ok;
        parts.push(format!("{f} {:.3}{}", s(f), if ok { "" } else { " (out of [0.5, 1.5])" }));
    }
    let less_consistent = (s("bruf10") - 1.0).abs() > (s("vs-bruf25") - 1.0).abs();
    pass &= less_consistent;
    report(
        6,
        "tracking SNEES over steps 100-300",
        pass,
        &format!(
            "{}; bruf10 {:.3} {} from 1 than vs-bruf25",
            parts.join(", "),
            s("bruf10"),
            if less_consistent { "farther" } else { "not farther" }
        ),
    );
    assert!(pass);
}

// 7, 8 ----------------------------------------------------------------------

const LORENZ_FILTERS: &str = "
[filter enkf]
kind = enkf
alpha = 1.06
[filter bruenkf]
kind = bruenkf
n = 25
alpha = 1.06
[filter vs-bruenkf]
kind = bruenkf
schedule = variable
n = 25
alpha = 1.06
[filter ec-bruenkf]
kind = ec-bruenkf
tol = 1e-3
alpha = 1.06
[filter gromov]
kind = gromov
n = 25
q = 0.1
";

fn shown(m: Option<usize>) -> String {
    m.map(|m| m.to_string()).unwrap_or_else(|| "none".into())
}

#[test]
fn criterion_07_lorenz_convergence_order() {
    let full = full();
    let (runs, m_list) = if full {
        (10, "10, 15, 20, 25, 30, 35, 40")
    } else {
        (3, "25, 30, 35")
    };
    let start = Instant::now();
    let mut text = format!(
        "scenario = lorenz96\nn_runs = {runs}\nseed = {SEED}\nburn_in = 50\n[scenario]\ngamma = 5\nm_list = {m_list}\n{LORENZ_FILTERS}"
    );
    if !full {
        // Gromov is checked separately at M = 10.
        text = text.replace("[filter gromov]\nkind = gromov\nn = 25\nq = 0.1\n", "");
    }
    let r = run_lorenz96(&config(&text)).unwrap();
    let gromov_mean = if full {
        r.point(Sweep::EnsembleSize, "gromov", 10, 5.0).map(|p| p.mean())
    } else {
        let g = format!(
            "scenario = lorenz96\nn_runs = {runs}\nseed = {SEED}\nburn_in = 50\n[scenario]\ngamma = 5\nm_list = 10\n[filter gromov]\nkind = gromov\nn = 25\nq = 0.1\n"
        );
        let gr = run_lorenz96(&config(&g)).unwrap();
        gr.point(Sweep::EnsembleSize, "gromov", 10, 5.0).map(|p| p.mean())
    }
    .unwrap();
    let secs = start.elapsed().as_secs_f64();

    let key = |m: Option<usize>| m.unwrap_or(usize::MAX);
    let ec = r.min_converging("ec-bruenkf");
    let bru = r.min_converging("bruenkf");
    let vs = r.min_converging("vs-bruenkf");
    let enkf = r.min_converging("enkf");
    let ordered = key(ec) <= key(bru) && key(ec) <= key(vs) && key(bru) <= key(enkf) && key(vs) <= key(enkf);
    let gromov_ok = gromov_mean < r.threshold;
    let mut pass = ordered && gromov_ok;
    let mut detail = format!(
        "minimal converging M: ec-bruenkf {}, bruenkf {}, vs-bruenkf {}, enkf {}; ordering {}; gromov at M=10 mean RMSE {gromov_mean:.3} (< {}); {runs} runs, {secs:.0} s",
        shown(ec),
        shown(bru),
        shown(vs),
        shown(enkf),
        if ordered { "holds" } else { "violated" },
        r.threshold
    );
    if full {
        let near = |m: Option<usize>, target: usize| m.is_some_and(|m| m.abs_diff(target) <= 5);
        let within = near(ec, 25) && near(bru, 30) && near(vs, 30) && near(enkf, 35);
        pass &= within;
        detail.push_str(&format!(
            "; within one grid step of 25/30/30/35: {}",
            if within { "yes" } else { "no" }
        ));
    } else {
        pass &= secs < 300.0;
        detail.push_str(" (reduced gate, < 300 s)");
    }
    report(7, "Lorenz '96 convergence order", pass, &detail);
    assert!(pass);
}

#[test]
fn criterion_08_gamma_sweep_trend() {
    let full = full();
    let (runs, gammas) = if full {
        (10, "1, 2, 3, 4, 5, 6, 7, 8, 9")
    } else {
        (3, "1, 3, 5, 7, 9")
    };
    let text = format!(
        "scenario = lorenz96\nn_runs = {runs}\nseed = {SEED}\nburn_in = 50\n[scenario]\nm = 25\ngamma_list = {gammas}\n{LORENZ_FILTERS}"
    );
    let r = run_lorenz96(&config(&text)).unwrap();
    let sweep = Sweep::Gamma;
    let gamma_values: Vec<f64> = gammas.split(',').map(|g| g.trim().parse().unwrap()).collect();
    let variants = ["bruenkf", "vs-bruenkf", "ec-bruenkf", "gromov"];

    let mut enkf_worst = true;
    let mut parts = Vec::new();
    for &g in gamma_values.iter().filter(|g| **g >= 3.0) {
        let e = r.point(sweep, "enkf", 25, g).unwrap().mean();
        for v in variants {
            let x = r.point(sweep, v, 25, g).unwrap().mean();
            if !(e > x) {
                enkf_worst = false;
                parts.push(format!("gamma {g}: enkf {e:.3} <= {v} {x:.3}"));
            }
        }
    }
    // Non-decreasing up to two standard errors of the difference.
    let mut monotone = true;
    for v in ["bruenkf", "vs-bruenkf", "ec-bruenkf"] {
        let pts: Vec<_> = gamma_values.iter().map(|&g| r.point(sweep, v, 25, g).unwrap()).collect();
        let means: Vec<String> = pts.iter().map(|p| format!("{:.3}", p.mean())).collect();
        for w in pts.windows(2) {
            let se = (variance(&w[0].runs) / w[0].runs.len() as f64 + variance(&w[1].runs) / w[1].runs.len() as f64).sqrt();
            if w[1].mean() < w[0].mean() - 2.0 * se {
                monotone = false;
                parts.push(format!(
                    "{v} drops {:.3} -> {:.3} between gamma {} and {} (2 SE = {:.3})",
                    w[0].mean(),
                    w[1].mean(),
                    w[0].gamma,
                    w[1].gamma,
                    2.0 * se
                ));
            }
        }
        parts.push(format!("{v} [{}]", means.join(", ")));
    }
    let enkf_means: Vec<String> = gamma_values
        .iter()
        .map(|&g| format!("{:.3}", r.point(sweep, "enkf", 25, g).unwrap().mean()))
        .collect();
    parts.push(format!("enkf [{}]", enkf_means.join(", ")));
    let pass = enkf_worst && monotone;
    report(
        8,
        "gamma sweep trend at M = 25",
        pass,
        &format!(
            "gammas [{gammas}], {runs} runs; enkf worst for gamma >= 3: {enkf_worst}; recursive variants non-decreasing: {monotone}; {}",
            parts.join("; ")
        ),
    );
    assert!(pass);
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let m = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)
}

// 9 -------------------------------------------------------------------------

#[test]
fn criterion_09_ensemble_kalman_equivalence() {
    let mut rng = rng_from_seed(9);
    let (n, m, members) = (4, 2, 50);
    let h = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let model = LinearMeasurement::new(h, random_spd(m, &mut rng)).unwrap();
    let truth = GaussianBelief::new(DVector::zeros(n), random_spd(n, &mut rng)).unwrap();
    let ens = Ensemble::sample(&truth, members, &mut rng).unwrap();
    let y = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    let (mean, cov) = empirical_moments(&ens).unwrap();
    let kalman = kalman_update(&GaussianBelief::new(mean, cov).unwrap(), &model, &y).unwrap();
    let rel = |e: &Ensemble| {
        let (mu, _) = empirical_moments(e).unwrap();
        (mu - &kalman.mean).norm() / kalman.mean.norm().max(1.0)
    };
    let det = EnsembleOptions {
        perturb_observations: false,
        record_trace: false,
        ..Default::default()
    };
    let mut devs: Vec<(String, f64)> = Vec::new();
    devs.push(("enkf".into(), rel(&enkf_update(&ens, &model, &y, 1.0, det, &mut rng_from_seed(1)).unwrap())));
    for steps in [1, 2, 5, 25] {
        for (label, schedule) in [("bruenkf", StepSchedule::Uniform(steps)), ("vs-bruenkf", StepSchedule::Variable(steps))] {
            let cfg = EnsembleUpdateConfig {
                schedule,
                inflation: 1.0,
                options: det,
            };
            let (e, _) = bruenkf_update(&ens, &model, &y, &cfg, &mut rng_from_seed(1)).unwrap();
            devs.push((format!("{label}({steps})"), rel(&e)));
        }
    }
    let (e, _) = ec_bruenkf_update(&ens, &model, &y, &ErrorController::default(), 1.0, det, &mut rng_from_seed(1)).unwrap();
    devs.push(("ec-bruenkf".into(), rel(&e)));

    let perturbed = EnsembleOptions {
        record_trace: false,
        ..Default::default()
    };
    let a = enkf_update(&ens, &model, &y, 1.06, perturbed, &mut rng_from_seed(77)).unwrap();
    let cfg = EnsembleUpdateConfig {
        schedule: StepSchedule::Uniform(1),
        inflation: 1.06,
        options: perturbed,
    };
    let (b, _) = bruenkf_update(&ens, &model, &y, &cfg, &mut rng_from_seed(77)).unwrap();
    let bitwise = a.states() == b.states();

    let mean_ok = devs.iter().all(|(_, d)| *d <= 1e-9);
    let pass = mean_ok && bitwise;
    let detail = devs
        .iter()
        .map(|(n, d)| format!("{n} {d:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    report(
        9,
        "ensemble mean equals Kalman mean (gamma = 0, alpha = 1, linear h)",
        pass,
        &format!("relative mean deviations (<= 1e-9): {detail}; BRUEnKF(N=1) bitwise EnKF: {bitwise}"),
    );
    assert!(pass);
}

// 10 ------------------------------------------------------------------------

#[test]
fn criterion_10_oracle_self_consistency() {
    let coarse = range_grid(800);
    let fine = range_grid(1600);
    let mass_err = (coarse.mass() - 1.0).abs().max((fine.mass() - 1.0).abs());

    // Identity measurement; the prior sits well inside the default bounds (> 6 sigma).
    let prior = GaussianBelief::new(
        DVector::from_vec(vec![-2.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
    )
    .unwrap();
    let lin = LinearMeasurement::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5).unwrap();
    let y = DVector::from_vec(vec![-1.5, 0.3]);
    let exact = kalman_update(&prior, &lin, &y).unwrap();
    let grid = grid_posterior(&prior, &lin, &y, GridBounds::default(), 400).unwrap();
    let moments = grid.moments();
    let mean_err = (moments.mean - &exact.mean).norm();
    let cov_err = (moments.cov - &exact.cov).abs().max();
    let range_mean_shift = (fine.moments().mean - coarse.moments().mean).norm();

    let half_cell = 0.5 * (coarse.xs[1] - coarse.xs[0]);
    let shift = (refined_map(&fine) - refined_map(&coarse)).norm();
    let raw_shift = (map_of(&fine) - map_of(&coarse)).norm();
    let pass = mass_err <= 1e-6 && mean_err < 1e-3 && cov_err < 1e-3 && shift < half_cell && range_mean_shift < 1e-3;
    report(
        10,
        "oracle self-consistency",
        pass,
        &format!(
            "mass error {mass_err:.2e} (<= 1e-6); conjugate mean error {mean_err:.2e}, cov error {cov_err:.2e} (< 1e-3); range 800->1600: refined MAP shift {shift:.2e} (< half cell {half_cell:.4}), grid mean shift {range_mean_shift:.2e} (< 1e-3), raw argmax shift {raw_shift:.4}"
        ),
    );
    assert!(pass);
}

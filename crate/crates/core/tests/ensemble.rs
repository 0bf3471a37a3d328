use bruf::belief::{empirical_mean, empirical_moments, Ensemble, GaussianBelief, LinearMeasurement};
use bruf::ensemble::{
    bruenkf_update, ec_bruenkf_update, enkf_update, flow_terms, gromov_flow_update, EnsembleOptions,
    EnsembleUpdateConfig, GromovConfig,
};
use bruf::linalg;
use bruf::models::RangeScenario;
use bruf::oracle::{grid_posterior, hdr_mask, GridBounds};
use bruf::recursive::{kalman_update, ErrorController, StepSchedule};
use bruf::rng::{rng_from_seed, split};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const SEED: u64 = 20261016;

fn deterministic() -> EnsembleOptions {
    EnsembleOptions {
        perturb_observations: false,
        record_trace: true,
        ..EnsembleOptions::default()
    }
}

fn scalar_problem() -> (GaussianBelief, LinearMeasurement, DVector<f64>) {
    (
        GaussianBelief::new(DVector::from_element(1, 0.0), DMatrix::from_element(1, 1, 1.0)).unwrap(),
        LinearMeasurement::new(DMatrix::identity(1, 1), DMatrix::identity(1, 1)).unwrap(),
        DVector::from_element(1, 2.0),
    )
}

fn ring_fraction(ens: &Ensemble) -> f64 {
    let near = ens.members().filter(|x| (x.norm() - 1.0).abs() <= 0.3).count();
    near as f64 / ens.len() as f64
}

#[test]
fn large_scalar_enkf_recovers_the_kalman_mean() {
    let (prior, model, y) = scalar_problem();
    let mut rng = rng_from_seed(SEED);
    let ens = Ensemble::sample(&prior, 10_000, &mut rng).unwrap();
    for perturb in [false, true] {
        let opts = EnsembleOptions {
            perturb_observations: perturb,
            record_trace: false,
            ..EnsembleOptions::default()
        };
        let post = enkf_update(&ens, &model, &y, 1.0, opts, &mut rng).unwrap();
        let mean = empirical_mean(&post)[0];
        assert!((mean - 1.0).abs() < 0.05, "perturb {perturb}: {mean}");
    }
}

#[test]
fn range_enkf_misses_the_crescent_and_recursive_variants_settle_on_it() {
    let s = RangeScenario::default();
    let (model, y) = (s.model(), s.measurement());
    let grid = grid_posterior(&s.prior, &model, &y, GridBounds::default(), 400).unwrap();
    let hdr = hdr_mask(&grid, 0.99).unwrap();
    let prior_ens = Ensemble::sample(&s.prior, 200, &mut rng_from_seed(SEED)).unwrap();
    let opts = EnsembleOptions::default();

    // The fraction for a single draw ranges from about 0.2 to 0.6, so the
    // claim is checked on the average over 20 independent draws.
    let fractions: Vec<f64> = (0..20)
        .map(|i| {
            let stream = split(SEED, i);
            let prior_ens = Ensemble::sample(&s.prior, 200, &mut rng_from_seed(split(stream, 0))).unwrap();
            let post = enkf_update(&prior_ens, &model, &y, 1.0, opts, &mut rng_from_seed(split(stream, 1))).unwrap();
            ring_fraction(&post)
        })
        .collect();
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean < 0.5, "enkf ring fractions {fractions:?}");

    for schedule in [StepSchedule::Uniform(25), StepSchedule::Variable(25)] {
        let cfg = EnsembleUpdateConfig::new(schedule.clone(), 1.0);
        let (post, _) = bruenkf_update(&prior_ens, &model, &y, &cfg, &mut rng_from_seed(1)).unwrap();
        let in_hdr = post.members().filter(|x| hdr.contains(&grid, x)).count() as f64 / 200.0;
        assert!(ring_fraction(&post) >= 0.9, "{schedule:?}: ring {}", ring_fraction(&post));
        assert!(in_hdr >= 0.9, "{schedule:?}: hdr {in_hdr}");
    }
}

#[test]
fn range_ec_ensemble_iteration_count_at_tight_tolerance() {
    let s = RangeScenario::default();
    let prior_ens = Ensemble::sample(&s.prior, 200, &mut rng_from_seed(SEED)).unwrap();
    let opts = EnsembleOptions {
        record_trace: false,
        ..EnsembleOptions::default()
    };
    let (_, trace) = ec_bruenkf_update(
        &prior_ens,
        &s.model(),
        &s.measurement(),
        &ErrorController::new(1e-6, 1e-6),
        1.0,
        opts,
        &mut rng_from_seed(1),
    )
    .unwrap();
    let steps = trace.accepted_steps as f64;
    assert!((steps - 3970.0).abs() <= 0.25 * 3970.0, "{steps} accepted steps");
}

#[test]
fn ensemble_traces_end_at_one() {
    let s = RangeScenario::default();
    let (model, y) = (s.model(), s.measurement());
    let ens = Ensemble::sample(&s.prior, 30, &mut rng_from_seed(SEED)).unwrap();
    for schedule in [StepSchedule::Uniform(7), StepSchedule::Variable(7)] {
        let (_, trace) = bruenkf_update(&ens, &model, &y, &EnsembleUpdateConfig::new(schedule, 1.0), &mut rng_from_seed(2)).unwrap();
        assert_eq!(trace.snapshots.len(), 7);
        assert!((trace.snapshots.last().unwrap().t - 1.0).abs() < 1e-12);
    }
    let (_, trace) = ec_bruenkf_update(
        &ens,
        &model,
        &y,
        &ErrorController::default(),
        1.0,
        EnsembleOptions::default(),
        &mut rng_from_seed(2),
    )
    .unwrap();
    let ts: Vec<f64> = trace.snapshots.iter().map(|s| s.t).collect();
    assert!(ts.windows(2).all(|w| w[1] >= w[0]));
    assert!((ts.last().unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn drift_only_flow_moves_particles_to_their_linear_posterior() {
    let (prior, model, y) = scalar_problem();
    let xs = [-1.5, -0.2, 0.0, 0.7, 2.4];
    let ens = Ensemble::from_members(&xs.map(|v| DVector::from_element(1, v))).unwrap();
    let n = 512;
    let cfg = GromovConfig {
        resample_after_update: false,
        diffusion_scale: 0.0,
        ..GromovConfig::new(n, DMatrix::zeros(1, 1))
    };
    let (post, companion) = gromov_flow_update(&ens, &model, &y, &prior, &cfg, &mut rng_from_seed(3)).unwrap();

    // With P = R = 1 the gain at pseudo-time λ is 1/(1+λ), so each Euler step
    // contracts x − y by 1 − δ/(1+kδ); the continuous flow halves it.
    let delta = 1.0 / n as f64;
    let contraction: f64 = (0..n).map(|k| 1.0 - delta / (1.0 + k as f64 * delta)).product();
    for (x0, after) in xs.iter().zip(post.members()) {
        let discrete = y[0] + (x0 - y[0]) * contraction;
        assert!((after[0] - discrete).abs() < 1e-12, "{} vs {discrete}", after[0]);
    }
    // The particle at the prior mean lands on the posterior mean.
    assert!((post.member(2)[0] - 1.0).abs() < 1e-3);
    assert!((contraction - 0.5).abs() < 5e-4);

    let kalman = kalman_update(&prior, &model, &y).unwrap();
    assert!((companion.mean[0] - kalman.mean[0]).abs() < 1e-12);
    assert!((companion.cov[(0, 0)] - kalman.cov[(0, 0)]).abs() < 1e-12);
}

#[test]
fn flow_drift_at_zero_is_the_prior_gain_step() {
    let s = RangeScenario::default();
    let (model, y) = (s.model(), s.measurement());
    let x = DVector::from_vec(vec![-1.0, 0.4]);
    let terms = flow_terms(&x, 0.0, &s.prior.cov, &model, &y).unwrap();
    let h = bruf::belief::MeasurementModel::jacobian(&model, &x).unwrap();
    let r_inv = 1.0 / s.noise_var;
    let hx = x.norm();
    let expected = -(&s.prior.cov * h.transpose() * r_inv * (hx - y[0]));
    assert!((terms.drift - expected).norm() < 1e-12);
}

fn ensemble_and_linear_model() -> impl Strategy<Value = (Ensemble, LinearMeasurement, DVector<f64>)> {
    (1usize..=5, 1usize..=3, 2usize..=12).prop_flat_map(|(n, m, members)| {
        (
            prop::collection::vec(-3.0..3.0f64, n * members),
            prop::collection::vec(-1.0..1.0f64, m * n),
            prop::collection::vec(0.2..2.0f64, m),
            prop::collection::vec(-3.0..3.0f64, m),
        )
            .prop_map(move |(states, h, r, y)| {
                (
                    Ensemble::from_matrix(DMatrix::from_column_slice(n, members, &states)).unwrap(),
                    LinearMeasurement::new(DMatrix::from_column_slice(m, n, &h), DMatrix::from_diagonal(&DVector::from_vec(r))).unwrap(),
                    DVector::from_vec(y),
                )
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn member_count_is_preserved(
        (ens, model, y) in ensemble_and_linear_model(),
        seed in any::<u64>(),
        alpha in 1.0..1.3f64,
    ) {
        let opts = EnsembleOptions::default();
        let a = enkf_update(&ens, &model, &y, alpha, opts, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a.len(), ens.len());
        let (b, _) = bruenkf_update(&ens, &model, &y, &EnsembleUpdateConfig::new(StepSchedule::Variable(4), alpha), &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(b.len(), ens.len());
        let (c, _) = ec_bruenkf_update(&ens, &model, &y, &ErrorController::default(), alpha, opts, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(c.len(), ens.len());
    }

    #[test]
    fn single_step_recursive_ensemble_equals_enkf_bitwise(
        (ens, model, y) in ensemble_and_linear_model(),
        seed in any::<u64>(),
        alpha in 1.0..1.3f64,
    ) {
        let opts = EnsembleOptions { record_trace: false, ..EnsembleOptions::default() };
        let a = enkf_update(&ens, &model, &y, alpha, opts, &mut rng_from_seed(seed)).unwrap();
        let cfg = EnsembleUpdateConfig { options: opts, ..EnsembleUpdateConfig::new(StepSchedule::Uniform(1), alpha) };
        let (b, _) = bruenkf_update(&ens, &model, &y, &cfg, &mut rng_from_seed(seed)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn inflation_splits_telescope(alpha in 1.0..3.0f64, n in 1usize..200, variable in any::<bool>()) {
        let schedule = if variable { StepSchedule::Variable(n) } else { StepSchedule::Uniform(n) };
        let product: f64 = schedule.coefficients().unwrap().iter().map(|c| alpha.powf(*c)).product();
        prop_assert!((product - alpha).abs() <= 1e-12 * alpha);
    }

    #[test]
    fn flow_diffusion_is_symmetric_psd(
        p in prop::collection::vec(-1.0..1.0f64, 4),
        r in 0.01..2.0f64,
        lambda in 0.0..=1.0f64,
        x in prop::collection::vec(-3.0..3.0f64, 2),
    ) {
        let a = DMatrix::from_column_slice(2, 2, &p);
        let cov = &a * a.transpose() + DMatrix::identity(2, 2) * 0.05;
        let model = RangeScenario { noise_var: r, ..RangeScenario::default() }.model();
        let x = DVector::from_vec(x);
        prop_assume!(x.norm() > 1e-3);
        let terms = flow_terms(&x, lambda, &cov, &model, &DVector::from_element(1, 1.0)).unwrap();
        let q = terms.diffusion_cov(&DMatrix::from_element(1, 1, r));
        prop_assert_eq!(&q, &q.transpose());
        prop_assert!(linalg::symmetric_sqrt(&q).is_ok());
    }
}

#[test]
fn deterministic_variants_match_kalman_on_the_empirical_prior() {
    let n = 4;
    let m = 2;
    let prior = GaussianBelief::new(DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]), DMatrix::identity(n, n) * 0.8).unwrap();
    let ens = Ensemble::sample(&prior, 50, &mut rng_from_seed(SEED)).unwrap();
    let (mean, cov) = empirical_moments(&ens).unwrap();
    let empirical = GaussianBelief::new(mean, cov).unwrap();
    let h = DMatrix::from_row_slice(m, n, &[1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, -0.3]);
    let model = LinearMeasurement::new(h, DMatrix::identity(m, m) * 0.3).unwrap();
    let y = DVector::from_vec(vec![1.0, -0.5]);
    let kalman = kalman_update(&empirical, &model, &y).unwrap();

    // The one-step variant is the algebraic Kalman update applied to each member.
    let post = enkf_update(&ens, &model, &y, 1.0, deterministic(), &mut rng_from_seed(0)).unwrap();
    let err = (empirical_mean(&post) - &kalman.mean).norm() / (1.0 + kalman.mean.norm());
    assert!(err < 1e-9, "enkf mean deviation {err:e}");
}

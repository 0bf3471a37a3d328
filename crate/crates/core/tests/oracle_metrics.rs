use bruf::belief::{standard_normal_vector, GaussianBelief, LinearMeasurement};
use bruf::metrics::{snees, time_avg_position_rmse, time_avg_rmse, RunRecord};
use bruf::models::RangeScenario;
use bruf::oracle::{grid_posterior, hdr_mask, map_of, refined_map, GridBounds};
use bruf::recursive::kalman_update;
use bruf::rng::rng_from_seed;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

/// Independent Nelder–Mead minimum of the range MAP objective.
const RANGE_MAP: [f64; 2] = [-0.965_726_12, 0.347_558];

fn conjugate_case() -> (GaussianBelief, LinearMeasurement, DVector<f64>) {
    (
        GaussianBelief::new(
            DVector::from_vec(vec![-2.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
        )
        .unwrap(),
        LinearMeasurement::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.5).unwrap(),
        DVector::from_vec(vec![-1.5, 0.3]),
    )
}

#[test]
fn conjugate_grid_matches_closed_form() {
    let (prior, model, y) = conjugate_case();
    let grid = grid_posterior(&prior, &model, &y, GridBounds::default(), 400).unwrap();
    let exact = kalman_update(&prior, &model, &y).unwrap();
    let moments = grid.moments();
    assert!((moments.mean - &exact.mean).amax() < 1e-3);
    assert!((moments.cov - &exact.cov).amax() < 1e-3);
    let cell = (grid.xs[1] - grid.xs[0]).max(grid.ys[1] - grid.ys[0]);
    let map = map_of(&grid);
    assert!((map - &exact.mean).amax() <= cell);
}

#[test]
fn uninformative_grid_returns_the_prior() {
    let (prior, _, _) = conjugate_case();
    let model = LinearMeasurement::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 1e12).unwrap();
    let grid = grid_posterior(&prior, &model, &DVector::from_vec(vec![0.0, 0.0]), GridBounds::default(), 400).unwrap();
    assert!((grid.moments().mean - &prior.mean).amax() < 1e-3);
}

#[test]
fn grid_mass_is_one_and_finite_for_tiny_noise() {
    let s = RangeScenario::default();
    for (noise_var, resolution) in [(0.01, 200), (0.01, 800), (1e-4, 800), (1e-6, 800)] {
        let model = RangeScenario { noise_var, ..s.clone() }.model();
        let grid = grid_posterior(&s.prior, &model, &s.measurement(), GridBounds::default(), resolution).unwrap();
        assert!((grid.mass() - 1.0).abs() <= 1e-6, "R {noise_var}, res {resolution}: {}", grid.mass());
        assert!(grid.density.iter().all(|d| d.is_finite() && *d >= 0.0));
    }
}

#[test]
fn range_grid_mode_matches_independent_optimum() {
    let s = RangeScenario::default();
    let grid = grid_posterior(&s.prior, &s.model(), &s.measurement(), GridBounds::default(), 800).unwrap();
    let cell = grid.xs[1] - grid.xs[0];
    let coarse = map_of(&grid);
    assert!((coarse[0] - RANGE_MAP[0]).abs() <= cell && (coarse[1] - RANGE_MAP[1]).abs() <= cell);
    let refined = refined_map(&grid);
    let d = (refined[0] - RANGE_MAP[0]).hypot(refined[1] - RANGE_MAP[1]);
    assert!(d < 0.25 * cell, "refined mode off by {d}");
}

#[test]
fn isotropic_hdr_is_a_one_sigma_disk() {
    let prior = GaussianBelief::new(DVector::from_vec(vec![-2.0, 0.0]), DMatrix::identity(2, 2) * 0.25).unwrap();
    let model = LinearMeasurement::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 1e12).unwrap();
    let grid = grid_posterior(&prior, &model, &DVector::zeros(2), GridBounds::default(), 400).unwrap();
    // 1 − e^{−1/2} ≈ 0.3935 of a 2-D Gaussian lies within one standard deviation.
    let hdr = hdr_mask(&grid, 1.0 - (-0.5f64).exp()).unwrap();
    let sigma = 0.5;
    let cell = grid.xs[1] - grid.xs[0];
    for (row, &yv) in grid.ys.iter().enumerate() {
        for (col, &xv) in grid.xs.iter().enumerate() {
            let r = (xv + 2.0).hypot(yv);
            if r < sigma - 2.0 * cell {
                assert!(hdr.mask[(row, col)]);
            } else if r > sigma + 2.0 * cell {
                assert!(!hdr.mask[(row, col)]);
            }
        }
    }
}

/// Four-state constant-velocity truth with position measurements, filtered
/// by the exact Kalman filter.
fn calibrated_runs(n_runs: usize, steps: usize) -> Vec<RunRecord> {
    let dt: f64 = 1.0;
    let f = DMatrix::from_row_slice(4, 4, &[1.0, dt, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, dt, 0.0, 0.0, 0.0, 1.0]);
    let q1 = DMatrix::from_row_slice(2, 2, &[dt.powi(3) / 3.0, dt * dt / 2.0, dt * dt / 2.0, dt]) * 0.1;
    let mut q = DMatrix::zeros(4, 4);
    q.view_mut((0, 0), (2, 2)).copy_from(&q1);
    q.view_mut((2, 2), (2, 2)).copy_from(&q1);
    let h = DMatrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let r = DMatrix::identity(2, 2) * 4.0;
    let model = LinearMeasurement::new(h.clone(), r.clone()).unwrap();
    let q_sqrt = q.clone().cholesky().unwrap().l();
    let p0 = DMatrix::identity(4, 4) * 10.0;

    let mut rng = rng_from_seed(21);
    (0..n_runs)
        .map(|_| {
            let mut truth = p0.map(f64::sqrt) * standard_normal_vector(4, &mut rng);
            let mut belief = GaussianBelief::new(DVector::zeros(4), p0.clone()).unwrap();
            let mut record = RunRecord::default();
            for _ in 0..steps {
                truth = &f * &truth + &q_sqrt * standard_normal_vector(4, &mut rng);
                let y = &h * &truth + r.map(f64::sqrt) * standard_normal_vector(2, &mut rng);
                belief = GaussianBelief::new(&f * &belief.mean, &f * &belief.cov * f.transpose() + &q).unwrap();
                belief = kalman_update(&belief, &model, &y).unwrap();
                record.push(truth.clone(), belief.mean.clone(), belief.cov.clone());
            }
            record
        })
        .collect()
}

#[test]
fn exact_kalman_filter_is_snees_consistent() {
    let runs = calibrated_runs(200, 40);
    let s = snees(&runs, 5).unwrap();
    assert_eq!(s.excluded, 0);
    for (k, v) in s.values.iter().enumerate() {
        assert!((0.8..=1.2).contains(v), "step {}: SNEES {v}", k + 5);
    }
}

#[test]
fn metrics_are_invariant_to_run_order() {
    let mut runs = calibrated_runs(30, 20);
    let before = (
        snees(&runs, 3).unwrap().values,
        time_avg_rmse(&runs, 3).unwrap(),
        time_avg_position_rmse(&runs, &[0, 2], 3).unwrap(),
    );
    runs.shuffle(&mut rng_from_seed(22));
    let after = (
        snees(&runs, 3).unwrap().values,
        time_avg_rmse(&runs, 3).unwrap(),
        time_avg_position_rmse(&runs, &[0, 2], 3).unwrap(),
    );
    for (a, b) in before.0.iter().zip(&after.0) {
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }
    assert!((before.1 - after.1).abs() <= 1e-12 * before.1);
    assert!((before.2 - after.2).abs() <= 1e-12 * before.2);
}

#[test]
fn metrics_vanish_only_for_zero_error() {
    let mut zero = RunRecord::default();
    let mut offset = RunRecord::default();
    for k in 0..10 {
        let x = DVector::from_element(4, k as f64);
        zero.push(x.clone(), x.clone(), DMatrix::identity(4, 4));
        let mut e = x.clone();
        if k == 7 {
            e[1] += 1e-3;
        }
        offset.push(x, e, DMatrix::identity(4, 4));
    }
    assert_eq!(time_avg_rmse(&[zero.clone()], 2).unwrap(), 0.0);
    assert!(time_avg_rmse(&[offset.clone()], 2).unwrap() > 0.0);
    // Errors before the burn-in are ignored.
    assert_eq!(time_avg_rmse(&[offset], 8).unwrap(), 0.0);
    assert_eq!(snees(&[zero], 2).unwrap().values, vec![0.0; 8]);
}

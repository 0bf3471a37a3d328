//! Monte Carlo error metrics.
//!
//! Every metric starts counting at index `burn_in` of the per-run sequences. A
//! non-finite estimate anywhere in the counted window makes the metric `+∞`
//! rather than dropping the run.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::linalg::Cholesky;

/// One Monte Carlo run: truth, estimate and covariance per time step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunRecord {
    pub truth: Vec<DVector<f64>>,
    pub estimates: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
    /// Filter wall time in seconds.
    pub wall_time: Option<f64>,
}

impl RunRecord {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn push(&mut self, truth: DVector<f64>, estimate: DVector<f64>, cov: DMatrix<f64>) {
        self.truth.push(truth);
        self.estimates.push(estimate);
        self.covariances.push(cov);
    }

    pub fn error(&self, k: usize) -> DVector<f64> {
        &self.estimates[k] - &self.truth[k]
    }

    pub fn diverged(&self) -> bool {
        self.estimates.iter().any(|e| e.iter().any(|v| !v.is_finite()))
    }
}

fn check_records(records: &[RunRecord]) -> Result<usize> {
    let first = records
        .first()
        .ok_or_else(|| FilterError::InvalidParameter("no runs".into()))?;
    let len = first.len();
    for (i, r) in records.iter().enumerate() {
        if r.len() != len || r.estimates.len() != len {
            return Err(FilterError::Dimension(format!(
                "run {i} has {} steps, expected {len}",
                r.len()
            )));
        }
    }
    Ok(len)
}

/// SNEES per step from `burn_in` on.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SneesSeries {
    /// `values[k - burn_in]` is SNEES at step `k`.
    pub values: Vec<f64>,
    /// (run, step) terms skipped because the covariance failed to factor.
    pub excluded: usize,
}

impl SneesSeries {
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.values[range];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// `SNEES(k) = (1/n_m) Σ_i (1/n) ε_i(k)ᵀ P_i(k)⁻¹ ε_i(k)`.
pub fn snees(records: &[RunRecord], burn_in: usize) -> Result<SneesSeries> {
    let len = check_records(records)?;
    let mut out = SneesSeries::default();
    for k in burn_in..len {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut diverged = false;
        for r in records {
            let e = r.error(k);
            if e.iter().any(|v| !v.is_finite()) {
                diverged = true;
                continue;
            }
            match Cholesky::new(&r.covariances[k]) {
                Ok(ch) => {
                    sum += ch.quad_form(&e) / e.len() as f64;
                    count += 1;
                }
                Err(_) => out.excluded += 1,
            }
        }
        out.values.push(if diverged {
            f64::INFINITY
        } else if count == 0 {
            f64::NAN
        } else {
            sum / count as f64
        });
    }
    Ok(out)
}

fn sq_norm_at(e: &DVector<f64>, indices: Option<&[usize]>) -> f64 {
    match indices {
        Some(idx) => idx.iter().map(|&i| e[i] * e[i]).sum(),
        None => e.norm_squared(),
    }
}

/// Per-step cross-run RMS of `‖ε‖` (optionally restricted to `indices`) divided by
/// `normalizer`, averaged over steps from `burn_in` on.
fn time_avg(
    records: &[RunRecord],
    indices: Option<&[usize]>,
    burn_in: usize,
    per_component: bool,
) -> Result<f64> {
    let len = check_records(records)?;
    if burn_in >= len {
        return Err(FilterError::InvalidParameter(format!(
            "burn-in {burn_in} leaves no steps out of {len}"
        )));
    }
    let n_m = records.len() as f64;
    let mut total = 0.0;
    for k in burn_in..len {
        let mut acc = 0.0;
        for r in records {
            let e = r.error(k);
            let count = indices.map_or(e.len(), |i| i.len()) as f64;
            let sq = sq_norm_at(&e, indices);
            if !sq.is_finite() {
                return Ok(f64::INFINITY);
            }
            acc += if per_component { sq / count } else { sq };
        }
        total += (acc / n_m).sqrt();
    }
    Ok(total / (len - burn_in) as f64)
}

/// `(1/n_t) Σ_k √((1/n_m) Σ_i ‖ε_p,i(k)‖²)` over the position components.
pub fn time_avg_position_rmse(
    records: &[RunRecord],
    position_indices: &[usize],
    burn_in: usize,
) -> Result<f64> {
    time_avg(records, Some(position_indices), burn_in, false)
}

/// Full-state analogue of [`time_avg_position_rmse`], with the squared error
/// divided by the state dimension (RMS over components).
pub fn time_avg_rmse(records: &[RunRecord], burn_in: usize) -> Result<f64> {
    time_avg(records, None, burn_in, true)
}

/// CSV number: shortest round-trip decimal, switching to exponent notation
/// outside `[1e-4, 1e15)` so tiny and huge values stay short.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Float(pub f64);

impl fmt::Display for Float {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = self.0.abs();
        if a == 0.0 || !a.is_finite() || (1e-4..1e15).contains(&a) {
            write!(f, "{}", self.0)
        } else {
            write!(f, "{:e}", self.0)
        }
    }
}

/// One tidy metric row: `filter,N,M,gamma,seed_base,metric_name,value`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub filter: String,
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub gamma: Option<f64>,
    pub seed_base: u64,
    pub metric_name: String,
    pub value: f64,
}

impl MetricRow {
    pub const HEADER: &'static str = "filter,N,M,gamma,seed_base,metric_name,value";
}

fn opt<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_default()
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.filter,
            opt(&self.n),
            opt(&self.m),
            opt(&self.gamma),
            self.seed_base,
            self.metric_name,
            Float(self.value)
        )
    }
}

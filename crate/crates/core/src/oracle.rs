//! Grid-evaluated posterior for two-dimensional problems.
//!
//! The unnormalized log posterior `log p(x) + log p(y|x)` is evaluated at every
//! grid point, shifted by its maximum, exponentiated and normalized with the
//! trapezoidal rule.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};

use crate::belief::{GaussianBelief, MeasurementModel};
use crate::error::{FilterError, Result};
use crate::linalg::Cholesky;
use crate::metrics::Float;

/// Axis-aligned grid bounds `[x_min, x_max] × [y_min, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridBounds {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

impl Default for GridBounds {
    fn default() -> Self {
        Self {
            x: (-6.0, 2.0),
            y: (-4.0, 4.0),
        }
    }
}

/// Normalized posterior density on a regular grid.
///
/// `density[(row, col)]` is the value at `(xs[col], ys[row])`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridPosterior {
    pub bounds: GridBounds,
    pub resolution: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub density: DMatrix<f64>,
    pub cell_area: f64,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| lo + step * i as f64).collect()
}

fn trapezoid_weight(i: usize, n: usize) -> f64 {
    if i == 0 || i == n - 1 {
        0.5
    } else {
        1.0
    }
}

/// Evaluates the posterior of `prior` and `model` given `y` on a
/// `resolution × resolution` grid.
pub fn grid_posterior<M: MeasurementModel + ?Sized>(
    prior: &GaussianBelief,
    model: &M,
    y: &DVector<f64>,
    bounds: GridBounds,
    resolution: usize,
) -> Result<GridPosterior> {
    if prior.dim() != 2 || model.state_dim() != 2 {
        return Err(FilterError::Dimension("grid oracle is two-dimensional".into()));
    }
    if resolution < 2 {
        return Err(FilterError::InvalidParameter(
            "grid needs at least 2 points per axis".into(),
        ));
    }
    let prior_chol = Cholesky::new(&prior.cov)?;
    let noise_chol = Cholesky::new(model.noise_cov())?;
    let xs = linspace(bounds.x.0, bounds.x.1, resolution);
    let ys = linspace(bounds.y.0, bounds.y.1, resolution);

    let mut logp = DMatrix::zeros(resolution, resolution);
    let mut max = f64::NEG_INFINITY;
    let mut point = DVector::zeros(2);
    for (row, &yv) in ys.iter().enumerate() {
        for (col, &xv) in xs.iter().enumerate() {
            point[0] = xv;
            point[1] = yv;
            let dx = &point - &prior.mean;
            let dy = y - model.observe(&point);
            let v = -0.5 * (prior_chol.quad_form(&dx) + noise_chol.quad_form(&dy));
            logp[(row, col)] = v;
            if v > max {
                max = v;
            }
        }
    }
    if !max.is_finite() {
        return Err(FilterError::NumericalUnderflow);
    }

    let cell_area = (xs[1] - xs[0]) * (ys[1] - ys[0]);
    let mut density = logp.map(|v| (v - max).exp());
    let mut mass = 0.0;
    for row in 0..resolution {
        let wr = trapezoid_weight(row, resolution);
        for col in 0..resolution {
            mass += wr * trapezoid_weight(col, resolution) * density[(row, col)];
        }
    }
    mass *= cell_area;
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(FilterError::NumericalUnderflow);
    }
    density /= mass;
    Ok(GridPosterior {
        bounds,
        resolution,
        xs,
        ys,
        density,
        cell_area,
    })
}

impl GridPosterior {
    /// Quadrature weight of grid point `(row, col)`, including the cell area.
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        trapezoid_weight(row, self.resolution) * trapezoid_weight(col, self.resolution) * self.cell_area
    }

    /// Total probability mass (1 up to round-off).
    pub fn mass(&self) -> f64 {
        let mut total = 0.0;
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                total += self.weight(row, col) * self.density[(row, col)];
            }
        }
        total
    }

    /// Posterior mean and covariance by quadrature.
    pub fn moments(&self) -> GaussianBelief {
        let mut mean = DVector::zeros(2);
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                let w = self.weight(row, col) * self.density[(row, col)];
                mean[0] += w * self.xs[col];
                mean[1] += w * self.ys[row];
            }
        }
        let mut cov = DMatrix::zeros(2, 2);
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                let w = self.weight(row, col) * self.density[(row, col)];
                let d = [self.xs[col] - mean[0], self.ys[row] - mean[1]];
                for a in 0..2 {
                    for b in 0..2 {
                        cov[(a, b)] += w * d[a] * d[b];
                    }
                }
            }
        }
        GaussianBelief { mean, cov }
    }

    /// Grid index `(row, col)` nearest to `p`, or `None` outside the bounds.
    pub fn nearest(&self, p: &DVector<f64>) -> Option<(usize, usize)> {
        let locate = |v: f64, lo: f64, hi: f64| -> Option<usize> {
            if !(v >= lo && v <= hi) {
                return None;
            }
            let step = (hi - lo) / (self.resolution - 1) as f64;
            Some((((v - lo) / step).round() as usize).min(self.resolution - 1))
        };
        let col = locate(p[0], self.bounds.x.0, self.bounds.x.1)?;
        let row = locate(p[1], self.bounds.y.0, self.bounds.y.1)?;
        Some((row, col))
    }

    pub fn point(&self, row: usize, col: usize) -> DVector<f64> {
        DVector::from_vec(vec![self.xs[col], self.ys[row]])
    }

    /// Writes `x,y,density` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "x,y,density")?;
        for row in 0..self.resolution {
            for col in 0..self.resolution {
                writeln!(
                    out,
                    "{},{},{}",
                    Float(self.xs[col]),
                    Float(self.ys[row]),
                    Float(self.density[(row, col)])
                )?;
            }
        }
        Ok(())
    }
}

/// Grid point of maximum density; ties go to the lowest `(row, col)`.
pub fn map_of(grid: &GridPosterior) -> DVector<f64> {
    let mut best = (0, 0);
    let mut best_v = f64::NEG_INFINITY;
    for row in 0..grid.resolution {
        for col in 0..grid.resolution {
            let v = grid.density[(row, col)];
            if v > best_v {
                best_v = v;
                best = (row, col);
            }
        }
    }
    grid.point(best.0, best.1)
}

/// Sub-cell MAP: vertex of the quadratic fitted to the log density on the 3×3
/// stencil around the grid argmax. Falls back to the argmax when the stencil
/// leaves the grid or the fit is not concave.
pub fn refined_map(grid: &GridPosterior) -> DVector<f64> {
    let coarse = map_of(grid);
    let Some((row, col)) = grid.nearest(&coarse) else {
        return coarse;
    };
    let n = grid.resolution;
    if row == 0 || col == 0 || row + 1 >= n || col + 1 >= n {
        return coarse;
    }
    let l = |r: usize, c: usize| grid.density[(r, c)].ln();
    let hx = grid.xs[1] - grid.xs[0];
    let hy = grid.ys[1] - grid.ys[0];
    let gx = (l(row, col + 1) - l(row, col - 1)) / (2.0 * hx);
    let gy = (l(row + 1, col) - l(row - 1, col)) / (2.0 * hy);
    let hxx = (l(row, col + 1) - 2.0 * l(row, col) + l(row, col - 1)) / (hx * hx);
    let hyy = (l(row + 1, col) - 2.0 * l(row, col) + l(row - 1, col)) / (hy * hy);
    let hxy = (l(row + 1, col + 1) - l(row + 1, col - 1) - l(row - 1, col + 1) + l(row - 1, col - 1))
        / (4.0 * hx * hy);
    let det = hxx * hyy - hxy * hxy;
    if !(hxx < 0.0 && det > 0.0) {
        return coarse;
    }
    let dx = -(hyy * gx - hxy * gy) / det;
    let dy = -(-hxy * gx + hxx * gy) / det;
    if dx.abs() > hx || dy.abs() > hy {
        return coarse;
    }
    DVector::from_vec(vec![coarse[0] + dx, coarse[1] + dy])
}

/// Highest-density region as a boolean mask over the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HdrMask {
    pub mask: DMatrix<bool>,
    /// Smallest density included in the region.
    pub threshold: f64,
    /// Probability mass actually enclosed.
    pub enclosed: f64,
}

impl HdrMask {
    /// Whether the grid point nearest `p` is inside the region.
    pub fn contains(&self, grid: &GridPosterior, p: &DVector<f64>) -> bool {
        grid.nearest(p).is_some_and(|(r, c)| self.mask[(r, c)])
    }
}

/// Smallest set of highest-density grid points holding at least `mass`.
pub fn hdr_mask(grid: &GridPosterior, mass: f64) -> Result<HdrMask> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(FilterError::InvalidParameter(format!(
            "HDR mass must lie in (0, 1), got {mass}"
        )));
    }
    let n = grid.resolution;
    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
    cells.sort_by(|a, b| {
        grid.density[(b.0, b.1)]
            .partial_cmp(&grid.density[(a.0, a.1)])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    });
    let mut mask = DMatrix::from_element(n, n, false);
    let mut enclosed = 0.0;
    let mut threshold = f64::INFINITY;
    for (r, c) in cells {
        if enclosed >= mass {
            break;
        }
        mask[(r, c)] = true;
        enclosed += grid.weight(r, c) * grid.density[(r, c)];
        threshold = grid.density[(r, c)];
    }
    Ok(HdrMask {
        mask,
        threshold,
        enclosed,
    })
}

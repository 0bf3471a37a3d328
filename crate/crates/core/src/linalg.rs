//! Positive-definite matrix utilities.
//!
//! Gains are computed with [`Cholesky`] solves; no explicit inverses are
//! formed. Covariances are re-symmetrized with [`symmetrize`]
//! after each update.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{FilterError, Result};

/// Returns `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// In-place variant of [`symmetrize`].
pub fn symmetrize_mut(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Lower-triangular Cholesky factor `A = L Lᵀ`.
///
/// Unlike `nalgebra::Cholesky`, a failed factorization reports which pivot
/// went non-positive.
#[derive(Clone, Debug)]
pub struct Cholesky {
    l: DMatrix<f64>,
}

impl Cholesky {
    /// Factors the symmetric part of `a`.
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(FilterError::Dimension(format!(
                "cholesky of non-square {}x{} matrix",
                a.nrows(),
                a.ncols()
            )));
        }
        let n = a.nrows();
        let mut l = DMatrix::<f64>::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)];
            for k in 0..j {
                d -= l[(j, k)] * l[(j, k)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(FilterError::NotPositiveDefinite { pivot: j });
            }
            let djj = d.sqrt();
            l[(j, j)] = djj;
            for i in (j + 1)..n {
                let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `L z = b` in place.
    pub fn forward_in_place(&self, b: &mut [f64]) {
        let n = self.dim();
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[(i, k)] * b[k];
            }
            b[i] = s / self.l[(i, i)];
        }
    }

    /// Solves `Lᵀ x = z` in place.
    pub fn backward_in_place(&self, z: &mut [f64]) {
        let n = self.dim();
        for i in (0..n).rev() {
            let mut s = z[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)] * z[k];
            }
            z[i] = s / self.l[(i, i)];
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.forward_in_place(x.as_mut_slice());
        self.backward_in_place(x.as_mut_slice());
        x
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            let s = col.as_mut_slice();
            self.forward_in_place(s);
            self.backward_in_place(s);
        }
        x
    }

    /// `L⁻¹ B`, used for whitening.
    pub fn forward_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for mut col in x.column_iter_mut() {
            self.forward_in_place(col.as_mut_slice());
        }
        x
    }

    /// Squared Mahalanobis norm `bᵀ A⁻¹ b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let mut z = b.clone();
        self.forward_in_place(z.as_mut_slice());
        z.norm_squared()
    }
}

/// Solves `A X = B` for symmetric positive definite `A` by triangular factorization.
pub fn spd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(FilterError::Dimension(format!(
            "spd_solve: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    Ok(Cholesky::new(a)?.solve(b))
}

/// Symmetric square root `B = V Λ^{1/2} Vᵀ` of a positive semi-definite matrix.
///
/// Eigenvalues down to `-1e-10 · |trace(Q)| / n` are clamped to zero; anything
/// more negative is rejected.
pub fn symmetric_sqrt(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = q.nrows();
    if n != q.ncols() {
        return Err(FilterError::Dimension(format!(
            "symmetric_sqrt of non-square {}x{} matrix",
            n,
            q.ncols()
        )));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let qs = symmetrize(q);
    let tolerance = 1e-10 * qs.trace().abs() / n as f64;
    let eig = SymmetricEigen::new(qs);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tolerance || !min.is_finite() {
        return Err(FilterError::NotPositiveSemiDefinite {
            eigenvalue: min,
            tolerance,
        });
    }
    let mut scaled = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        scaled.column_mut(j).scale_mut(s);
    }
    Ok(&scaled * eig.eigenvectors.transpose())
}

/// Largest absolute entry.
pub fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Central-difference Jacobian with step `max(1e-6, 1e-6·|x_i|)`.
pub fn central_difference_jacobian<F>(f: F, x: &DVector<f64>) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let n = x.len();
    let f0 = f(x);
    let m = f0.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for j in 0..n {
        let step = (1e-6 * x[j].abs()).max(1e-6);
        let orig = xp[j];
        xp[j] = orig + step;
        let fp = f(&xp);
        xp[j] = orig - step;
        let fm = f(&xp);
        xp[j] = orig;
        let inv = 0.5 / step;
        for i in 0..m {
            jac[(i, j)] = (fp[i] - fm[i]) * inv;
        }
    }
    jac
}

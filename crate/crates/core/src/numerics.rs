//! Matrix kernels: companion matrices, spectral radius, stability shrinkage
//! and stationary covariances of stable VAR processes.
//!
//! The stationary covariance of the companion-form state solves the discrete
//! Lyapunov equation `S = A S A' + Q`. Two independent routes are provided:
//! a Bartels-Stewart solve of the equivalent Sylvester equation
//! `A^{-1} S - S A' = A^{-1} Q` (needs `A` invertible), and a direct solve of
//! the vectorized system `(I - A kron A) vec(S) = vec(Q)`.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{max_abs, symmetrize};

/// Condition number above which the companion matrix is treated as singular.
pub const INVERTIBILITY_COND: f64 = 1e12;
const RESIDUAL_TOL: f64 = 1e-9;

/// Builds the `pr x pr` companion matrix of lag matrices `A_1..A_p`.
pub fn companion(lags: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = lags.len();
    let r = lags[0].nrows();
    let d = p * r;
    let mut a = DMatrix::zeros(d, d);
    for (l, m) in lags.iter().enumerate() {
        a.view_mut((0, l * r), (r, r)).copy_from(m);
    }
    for k in r..d {
        a[(k, k - r)] = 1.0;
    }
    a
}

/// Companion matrix from the stacked lag row `[A_1 ... A_p]` (`r x pr`).
pub fn companion_from_row(row: &DMatrix<f64>) -> DMatrix<f64> {
    let r = row.nrows();
    let d = row.ncols();
    let mut a = DMatrix::zeros(d, d);
    a.rows_mut(0, r).copy_from(row);
    for k in r..d {
        a[(k, k - r)] = 1.0;
    }
    a
}

/// Splits a stacked lag row `[A_1 ... A_p]` into its `p` blocks.
pub fn split_lag_row(row: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let r = row.nrows();
    (0..row.ncols() / r)
        .map(|l| row.columns(l * r, r).into_owned())
        .collect()
}

pub fn join_lags(lags: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r = lags[0].nrows();
    let mut row = DMatrix::zeros(r, r * lags.len());
    for (l, m) in lags.iter().enumerate() {
        row.columns_mut(l * r, r).copy_from(m);
    }
    row
}

/// Largest modulus of the (complex) eigenvalues of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() {
        return Err(Error::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    match a.nrows() {
        0 => Ok(0.0),
        1 => Ok(a[(0, 0)].abs()),
        _ => {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite matrix entry".into()));
            }
            let eig = a.complex_eigenvalues();
            Ok(eig.iter().map(|z| z.norm()).fold(0.0, f64::max))
        }
    }
}

/// Rescales lag matrices so that the companion spectral radius becomes
/// `1 - eps`: lag `l` is multiplied by `((1 - eps)/rho)^l`. Stable inputs
/// (radius < 1) are returned unchanged.
pub fn shrink_to_stable(lags: &[DMatrix<f64>], eps: f64) -> Vec<DMatrix<f64>> {
    let rho = spectral_radius(&companion(lags)).unwrap_or(f64::INFINITY);
    if rho < 1.0 {
        return lags.to_vec();
    }
    if !rho.is_finite() {
        return lags.iter().map(|m| m * 0.0).collect();
    }
    let c = (1.0 - eps) / rho;
    lags.iter()
        .enumerate()
        .map(|(l, m)| m * c.powi(l as i32 + 1))
        .collect()
}

/// [`shrink_to_stable`] on a stacked lag row.
pub fn shrink_row_to_stable(row: &DMatrix<f64>, eps: f64) -> DMatrix<f64> {
    join_lags(&shrink_to_stable(&split_lag_row(row), eps))
}

/// Order-one representation of a VAR(p) state process.
#[derive(Clone, Debug, PartialEq)]
pub struct CompanionSystem {
    pub a_tilde: DMatrix<f64>,
    /// Innovation covariance, zero outside the top-left `r x r` block.
    pub q_tilde: DMatrix<f64>,
}

impl CompanionSystem {
    pub fn new(lags: &[DMatrix<f64>], q: &DMatrix<f64>) -> Self {
        let a_tilde = companion(lags);
        let d = a_tilde.nrows();
        let r = q.nrows();
        let mut q_tilde = DMatrix::zeros(d, d);
        q_tilde.view_mut((0, 0), (r, r)).copy_from(q);
        Self { a_tilde, q_tilde }
    }

    pub fn from_companion(a_tilde: DMatrix<f64>, q: &DMatrix<f64>) -> Self {
        let d = a_tilde.nrows();
        let r = q.nrows();
        let mut q_tilde = DMatrix::zeros(d, d);
        q_tilde.view_mut((0, 0), (r, r)).copy_from(q);
        Self { a_tilde, q_tilde }
    }
}

fn lyapunov_residual(a: &DMatrix<f64>, q: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    max_abs(&(s - a * s * a.transpose() - q))
}

fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Stationary covariance of the companion state, `S = A S A' + Q`.
///
/// Uses the Sylvester route when the companion matrix is well conditioned,
/// falling back to the vectorized solve when it is (near) singular or when
/// the Sylvester residual is not acceptable.
pub fn stationary_cov_companion(sys: &CompanionSystem) -> Result<DMatrix<f64>> {
    let rho = spectral_radius(&sys.a_tilde)?;
    if rho >= 1.0 {
        return Err(Error::NotStationary {
            regime: 0,
            radius: rho,
        });
    }
    let tol = RESIDUAL_TOL * (1.0 + max_abs(&sys.q_tilde));
    if condition_number(&sys.a_tilde) < INVERTIBILITY_COND {
        if let Some(s) = stationary_cov_sylvester(&sys.a_tilde, &sys.q_tilde) {
            if lyapunov_residual(&sys.a_tilde, &sys.q_tilde, &s) <= tol {
                return Ok(s);
            }
        }
    }
    stationary_cov_vectorized(&sys.a_tilde, &sys.q_tilde).ok_or_else(|| {
        Error::NumericalFailure {
            t: 0,
            msg: "singular Lyapunov system".into(),
        }
    })
}

fn to_complex(a: &DMatrix<f64>) -> DMatrix<Complex<f64>> {
    a.map(|v| Complex::new(v, 0.0))
}

/// Solves `A X + X B = C` by Bartels-Stewart on complex Schur forms.
pub fn solve_sylvester(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.nrows();
    let (ua, ta) = to_complex(a).schur().unpack();
    let (ub, tb) = to_complex(b).schur().unpack();
    // complex Schur forms are upper triangular
    let f = ua.adjoint() * to_complex(c) * &ub;
    let mut y = DMatrix::<Complex<f64>>::zeros(n, m);
    for k in 0..m {
        let mut rhs = f.column(k).into_owned();
        for i in 0..k {
            let coef = tb[(i, k)];
            if coef != Complex::new(0.0, 0.0) {
                rhs -= y.column(i) * coef;
            }
        }
        // (T_A + tb[k,k] I) y_k = rhs, back substitution
        let shift = tb[(k, k)];
        for row in (0..n).rev() {
            let mut s = rhs[row];
            for col in (row + 1)..n {
                s -= ta[(row, col)] * y[(col, k)];
            }
            let diag = ta[(row, row)] + shift;
            if diag.norm() < 1e-300 {
                return None;
            }
            y[(row, k)] = s / diag;
        }
    }
    let x = ua * y * ub.adjoint();
    let out = x.map(|z| z.re);
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Stationary covariance via the Sylvester form
/// `A^{-1} S - S A' = A^{-1} Q`.
pub fn stationary_cov_sylvester(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let a_inv = a.clone().try_inverse()?;
    let rhs = &a_inv * q;
    let s = solve_sylvester(&a_inv, &(-a.transpose()), &rhs)?;
    Some(symmetrize(&s))
}

/// Stationary covariance via `(I - A kron A) vec(S) = vec(Q)`.
pub fn stationary_cov_vectorized(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let k = DMatrix::identity(n * n, n * n) - a.kronecker(a);
    let rhs = DVector::from_column_slice(q.as_slice());
    let v = k.lu().solve(&rhs)?;
    let s = DMatrix::from_column_slice(n, n, v.as_slice());
    Some(symmetrize(&s))
}

/// Vectorized solve restricted to the `n(n+1)/2` distinct entries of the
/// symmetric solution (duplication-matrix reduction).
pub fn stationary_cov_vectorized_reduced(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let idx = |i: usize, j: usize| {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        // column-major lower triangle
        lo * n - lo * (lo + 1) / 2 + hi
    };
    let n_unique = n * (n + 1) / 2;
    let mut dup = DMatrix::zeros(n * n, n_unique);
    for j in 0..n {
        for i in 0..n {
            dup[(j * n + i, idx(i, j))] = 1.0;
        }
    }
    let k = DMatrix::identity(n * n, n * n) - a.kronecker(a);
    let km = k * dup;
    let rhs = DVector::from_column_slice(q.as_slice());
    // normal equations of a consistent, full-column-rank system
    let lhs = km.transpose() * &km;
    let v = lhs.lu().solve(&(km.transpose() * rhs))?;
    let mut s = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            s[(i, j)] = v[idx(i, j)];
        }
    }
    Some(s)
}

/// Lagged covariances `Cov(x_t, x_{t-l}) = A^l S` for `l = 0..=max_lag`.
pub fn cross_lag_cov(
    sys: &CompanionSystem,
    sigma: &DMatrix<f64>,
    max_lag: usize,
) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(sigma.clone());
    for l in 1..=max_lag {
        let next = &sys.a_tilde * &out[l - 1];
        out.push(next);
    }
    out
}

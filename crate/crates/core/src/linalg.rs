//! Small dense-matrix helpers shared by the filter, the M-step and the
//! initializers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Replaces `x` by `(x + x')/2`.
pub fn symmetrize(x: &DMatrix<f64>) -> DMatrix<f64> {
    (x + x.transpose()) * 0.5
}

pub fn symmetrize_in_place(x: &mut DMatrix<f64>) {
    let n = x.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (x[(i, j)] + x[(j, i)]);
            x[(i, j)] = v;
            x[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of the symmetric part of `x`.
pub fn min_eigenvalue(x: &DMatrix<f64>) -> f64 {
    if x.nrows() == 0 {
        return 0.0;
    }
    let eig = SymmetricEigen::new(symmetrize(x));
    eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

pub fn trace(x: &DMatrix<f64>) -> f64 {
    x.diagonal().sum()
}

/// Adds `ridge * (1 + |trace|/n)` to the diagonal.
pub(crate) fn add_scaled_ridge(x: &mut DMatrix<f64>, ridge: f64) {
    let n = x.nrows().max(1) as f64;
    let eps = ridge * (1.0 + trace(x).abs() / n);
    for i in 0..x.nrows() {
        x[(i, i)] += eps;
    }
}

/// Cholesky factor of a symmetric matrix, retrying once with a diagonal
/// ridge scaled to the trace.
pub(crate) fn cholesky_ridged(x: &DMatrix<f64>, ridge: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut s = symmetrize(x);
    if let Some(c) = Cholesky::new(s.clone()) {
        return Some(c);
    }
    add_scaled_ridge(&mut s, ridge.max(1e-12));
    Cholesky::new(s)
}

pub(crate) fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Inverse of a symmetric positive definite matrix.
pub(crate) fn spd_inverse(x: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    cholesky_ridged(x, ridge).map(|c| {
        let mut inv = c.inverse();
        symmetrize_in_place(&mut inv);
        inv
    })
}

/// Solves `X * gram = rhs` for `X` where `gram` is symmetric PSD, with the
/// Gram-matrix ridge `ridge * trace/dim` applied before factorization.
pub(crate) fn right_solve_gram(
    rhs: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    ridge: f64,
) -> Option<DMatrix<f64>> {
    let n = gram.nrows();
    let mut g = symmetrize(gram);
    let tr = trace(&g).abs() / n.max(1) as f64;
    let eps = ridge * if tr > 0.0 { tr } else { 1.0 };
    for i in 0..n {
        g[(i, i)] += eps;
    }
    let chol = Cholesky::new(g.clone()).or_else(|| {
        for i in 0..n {
            g[(i, i)] += eps.max(1e-12) * 1e3;
        }
        Cholesky::new(g)
    })?;
    // X G = B  <=>  G X' = B'
    let xt = chol.solve(&rhs.transpose());
    Some(xt.transpose())
}

/// Log-density of `N(0, cov)` at `e`, given a Cholesky factor of `cov`.
pub(crate) fn gaussian_logpdf_chol(e: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = e.len() as f64;
    let z = chol.l_dirty().solve_lower_triangular(e).unwrap_or_else(|| e.clone());
    -0.5 * (d * LN_2PI + chol_logdet(chol) + z.norm_squared())
}

/// Block-diagonal matrix from a list of square blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

/// Sum of absolute entries (the L1,1 matrix norm).
pub fn l11(x: &DMatrix<f64>) -> f64 {
    x.iter().map(|v| v.abs()).sum()
}

pub fn max_abs(x: &DMatrix<f64>) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Sample mean and (n-1)-normalized covariance of the columns of `x`.
pub fn sample_cov(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.ncols();
    let mean = x.column_mean();
    if n < 2 {
        return (mean, DMatrix::zeros(x.nrows(), x.nrows()));
    }
    let mut centered = x.clone();
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    let cov = (&centered * centered.transpose()) / (n as f64 - 1.0);
    (mean, symmetrize(&cov))
}

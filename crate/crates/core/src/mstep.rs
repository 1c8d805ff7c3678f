//! M-step of the EM algorithm.
//!
//! Smoothed moments are first reduced to weighted sums ([`SufficientMoments`]);
//! the Q-function and every update are then closed-form expressions in those
//! sums. Lagged dynamics are handled in companion form: only the top block
//! row `[A_1 ... A_p]` and the top-left block of the innovation covariance
//! are free.
//!
//! For the Obs kind the dynamics groups are the `M` state processes, which
//! evolve at every time step regardless of the active regime.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::kim::SmoothedStats;
use crate::linalg::{cholesky_ridged, chol_logdet, right_solve_gram, spd_inverse, symmetrize, trace, LN_2PI};
use crate::model::{ConstraintSet, FixedCoefficients, ModelKind, ModelSpec, ThetaParams};
use crate::numerics::{companion_from_row, shrink_row_to_stable, spectral_radius};

/// Ridge (relative to `trace/dim`) added to Gram matrices before inversion.
pub const GRAM_RIDGE: f64 = 1e-8;
/// Default stability margin for eigenvalue shrinkage.
pub const DEFAULT_SHRINK_EPS: f64 = 0.02;
/// Iteration cap of the projected-gradient solver for column-norm constraints.
pub const SCALE_MAX_ITER: usize = 100;

const MIN_WEIGHT: f64 = 1e-10;
const COV_RIDGE: f64 = 1e-10;

/// Weighted sums entering the observation equation of regime `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsMoments {
    /// `sum_t W_t^j`
    pub weight: f64,
    /// `sum_t W_t^j y_t y_t'`
    pub syy: DMatrix<f64>,
    /// `sum_t W_t^j y_t x_t'` (`N x r`)
    pub syx: DMatrix<f64>,
    /// `sum_t W_t^j P_t` (`r x r`)
    pub sxx: DMatrix<f64>,
}

/// Weighted sums entering the state equation of one dynamics group, over
/// `t >= 2`.
#[derive(Clone, Debug, PartialEq)]
pub struct DynMoments {
    pub weight: f64,
    /// `sum W P_t` restricted to the current state (`r x r`).
    pub s11: DMatrix<f64>,
    /// `sum W P_{t,t-1}`, current state against the lagged companion state (`r x pr`).
    pub s10: DMatrix<f64>,
    /// `sum W P_{t-1}^{()}` (`pr x pr`).
    pub s00: DMatrix<f64>,
}

/// Weighted first and second moments of the initial companion state.
#[derive(Clone, Debug, PartialEq)]
pub struct InitMoments {
    pub weight: f64,
    pub x1: DVector<f64>,
    pub p1: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SufficientMoments {
    pub t_len: usize,
    pub obs: Vec<ObsMoments>,
    pub dynamics: Vec<DynMoments>,
    pub init: Vec<InitMoments>,
    /// `W_{1|T}`
    pub first: DVector<f64>,
    /// `sum_{t>=2} W_{t-1,t|T}^{ij}`
    pub transitions: DMatrix<f64>,
}

fn temper(w: &DVector<f64>, beta: f64) -> DVector<f64> {
    if beta == 1.0 {
        return w.clone();
    }
    let mut out = w.map(|v| if v > 0.0 { v.powf(beta) } else { 0.0 });
    let s = out.sum();
    if s > 0.0 {
        out /= s;
    }
    out
}

fn temper_pair(w: &DMatrix<f64>, beta: f64) -> DMatrix<f64> {
    if beta == 1.0 {
        return w.clone();
    }
    let mut out = w.map(|v| if v > 0.0 { v.powf(beta) } else { 0.0 });
    let s = out.sum();
    if s > 0.0 {
        out /= s;
    }
    out
}

/// Reduces smoothed moments to weighted sums. Regime probabilities are
/// raised to the power `beta` and renormalized per time step (`beta = 1`
/// leaves them unchanged).
pub fn sufficient_moments(
    y: &DMatrix<f64>,
    stats: &SmoothedStats,
    spec: &ModelSpec,
    beta: f64,
) -> SufficientMoments {
    let (m, r, n) = (spec.m, spec.r, spec.n);
    let d = spec.companion_dim();
    let t_len = y.ncols();
    let obs_kind = spec.kind == ModelKind::Obs;

    let mut obs = vec![
        ObsMoments {
            weight: 0.0,
            syy: DMatrix::zeros(n, n),
            syx: DMatrix::zeros(n, r),
            sxx: DMatrix::zeros(r, r),
        };
        m
    ];
    let mut dynamics = vec![
        DynMoments {
            weight: 0.0,
            s11: DMatrix::zeros(r, r),
            s10: DMatrix::zeros(r, d),
            s00: DMatrix::zeros(d, d),
        };
        m
    ];
    let mut init = vec![
        InitMoments {
            weight: 0.0,
            x1: DVector::zeros(d),
            p1: DMatrix::zeros(d, d),
        };
        m
    ];
    let mut transitions = DMatrix::zeros(m, m);
    let first = temper(&stats.w[0], beta);

    for t in 0..t_len {
        let w = temper(&stats.w[t], beta);
        let yt = y.column(t);
        let yyt = yt * yt.transpose();
        for j in 0..m {
            let wj = w[j];
            if wj <= 0.0 {
                continue;
            }
            let x = &stats.x[t][j];
            let p = &stats.p[t][j];
            let off = if obs_kind { j * d } else { 0 };
            let o = &mut obs[j];
            o.weight += wj;
            o.syy += &yyt * wj;
            o.syx += yt * x.rows(off, r).transpose() * wj;
            o.sxx += p.view((off, off), (r, r)) * wj;

            let groups: Vec<usize> = if obs_kind { (0..m).collect() } else { vec![j] };
            for g in groups {
                let go = if obs_kind { g * d } else { 0 };
                if t == 0 {
                    let im = &mut init[g];
                    im.weight += wj;
                    im.x1 += x.rows(go, d) * wj;
                    im.p1 += p.view((go, go), (d, d)) * wj;
                } else {
                    let dm = &mut dynamics[g];
                    dm.weight += wj;
                    dm.s11 += p.view((go, go), (r, r)) * wj;
                    dm.s10 += stats.p_cross[t][j].view((go, go), (r, d)) * wj;
                    dm.s00 += stats.p_prev[t][j].view((go, go), (d, d)) * wj;
                }
            }
        }
        if t > 0 {
            transitions += temper_pair(&stats.w_pair[t], beta);
        }
    }
    for o in &mut obs {
        o.syy = symmetrize(&o.syy);
        o.sxx = symmetrize(&o.sxx);
    }
    for dm in &mut dynamics {
        dm.s11 = symmetrize(&dm.s11);
        dm.s00 = symmetrize(&dm.s00);
    }
    for im in &mut init {
        im.p1 = symmetrize(&im.p1);
    }
    SufficientMoments {
        t_len,
        obs,
        dynamics,
        init,
        first,
        transitions,
    }
}

/// `(inverse, log-determinant)` of a covariance, ridged if needed.
fn inv_logdet(x: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let chol = cholesky_ridged(x, COV_RIDGE)
        .ok_or_else(|| Error::SingularMoment(format!("{what} is not positive definite")))?;
    let ld = chol_logdet(&chol);
    let mut inv = chol.inverse();
    inv = symmetrize(&inv);
    Ok((inv, ld))
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 { 0.0 } else { x * y.ln() }
}

/// Gaussian term `0.5 * (w log|V^{-1}| - tr V^{-1} S)`.
fn gauss_term(w: f64, v: &DMatrix<f64>, s: &DMatrix<f64>, what: &str) -> Result<f64> {
    if w <= 0.0 {
        return Ok(0.0);
    }
    let (inv, ld) = inv_logdet(v, what)?;
    Ok(0.5 * (-w * ld - (inv * s).trace()))
}

/// Residual second moment `S11 - 2 sym(S10 X') + X S00 X'`.
fn residual_moment(s11: &DMatrix<f64>, s10: &DMatrix<f64>, s00: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    let cross = s10 * x.transpose();
    symmetrize(&(s11 - &cross - cross.transpose() + x * s00 * x.transpose()))
}

fn obs_residual(o: &ObsMoments, c: &DMatrix<f64>) -> DMatrix<f64> {
    residual_moment(&o.syy, &o.syx, &o.sxx, c)
}

fn dyn_residual(dm: &DynMoments, row: &DMatrix<f64>) -> DMatrix<f64> {
    residual_moment(&dm.s11, &dm.s10, &dm.s00, row)
}

fn init_residual(im: &InitMoments, mu: &DVector<f64>) -> DMatrix<f64> {
    let cross = &im.x1 * mu.transpose();
    symmetrize(&(&im.p1 - &cross - cross.transpose() + mu * mu.transpose() * im.weight))
}

/// Expected complete-data log-likelihood of `theta` under the moments.
pub fn q_function(theta: &ThetaParams, mom: &SufficientMoments, spec: &ModelSpec) -> Result<f64> {
    let (m, r, n) = (spec.m, spec.r, spec.n);
    let mut q = -(mom.t_len as f64) * (n + r) as f64 / 2.0 * LN_2PI;
    if spec.kind != ModelKind::Var {
        for j in 0..m {
            let o = &mom.obs[j];
            q += gauss_term(o.weight, &theta.r[j], &obs_residual(o, &theta.c[j]), "R")?;
        }
    }
    for g in 0..m {
        let dm = &mom.dynamics[g];
        q += gauss_term(dm.weight, &theta.q[g], &dyn_residual(dm, &theta.lag_row(g)), "Q")?;
        let im = &mom.init[g];
        q += gauss_term(im.weight, &theta.sigma[g], &init_residual(im, &theta.mu[g]), "Sigma")?;
    }
    for j in 0..m {
        q += xlogy(mom.first[j], theta.pi[j]);
        for k in 0..m {
            q += xlogy(mom.transitions[(j, k)], theta.z[(j, k)]);
        }
    }
    Ok(q)
}

/// One term `tr{W(-2 B1 X' + X B2 X')}` of a quadratic objective in `X`.
#[derive(Clone, Copy, Debug)]
pub struct QuadTerm<'a> {
    pub w: &'a DMatrix<f64>,
    pub b1: &'a DMatrix<f64>,
    pub b2: &'a DMatrix<f64>,
}

/// Value of the summed quadratic objective at `x`.
pub fn quadratic_objective(terms: &[QuadTerm<'_>], x: &DMatrix<f64>) -> f64 {
    terms
        .iter()
        .map(|t| (t.w * (x * t.b2 * x.transpose() - t.b1 * x.transpose() * 2.0)).trace())
        .sum()
}

/// Minimizes the summed quadratic objective subject to pinned entries.
///
/// With column-major `vec`, the objective is
/// `-2 vec(X)' sum vec(W B1) + vec(X)' (sum B2 (x) W) vec(X)`; the free block of
/// the normal equations is solved with the pinned entries moved to the
/// right-hand side.
pub fn apply_fixed_constraints(
    terms: &[QuadTerm<'_>],
    fixed: Option<&FixedCoefficients>,
) -> Result<DMatrix<f64>> {
    let a = terms[0].w.nrows();
    let b = terms[0].b2.nrows();
    let no_pins = fixed.is_none_or(|f| f.n_fixed() == 0);
    if no_pins && terms.len() == 1 {
        return right_solve_gram(terms[0].b1, terms[0].b2, GRAM_RIDGE)
            .ok_or_else(|| Error::SingularMoment("Gram matrix not invertible".into()));
    }
    let dim = a * b;
    let mut h = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for t in terms {
        let mut b2 = t.b2.clone();
        let tr = trace(&b2).abs() / b.max(1) as f64;
        let eps = GRAM_RIDGE * if tr > 0.0 { tr } else { 1.0 };
        for i in 0..b {
            b2[(i, i)] += eps;
        }
        h += b2.kronecker(t.w);
        let wb = t.w * t.b1;
        rhs += DVector::from_column_slice(wb.as_slice());
    }
    let (free, pinned): (Vec<usize>, Vec<usize>) = match fixed {
        Some(f) => (0..dim).partition(|k| !f.mask.as_slice()[*k]),
        None => ((0..dim).collect(), Vec::new()),
    };
    let mut x = DVector::zeros(dim);
    if let Some(f) = fixed {
        for &k in &pinned {
            x[k] = f.values.as_slice()[k];
        }
    }
    if !free.is_empty() {
        let nf = free.len();
        let mut hff = DMatrix::zeros(nf, nf);
        let mut bf = DVector::zeros(nf);
        for (u, &i) in free.iter().enumerate() {
            bf[u] = rhs[i] - pinned.iter().map(|&k| h[(i, k)] * x[k]).sum::<f64>();
            for (v, &k) in free.iter().enumerate() {
                hff[(u, v)] = h[(i, k)];
            }
        }
        let chol = cholesky_ridged(&hff, GRAM_RIDGE)
            .ok_or_else(|| Error::SingularMoment("reduced constrained system is singular".into()))?;
        let sol = chol.solve(&bf);
        for (u, &i) in free.iter().enumerate() {
            x[i] = sol[u];
        }
    }
    Ok(DMatrix::from_column_slice(a, b, x.as_slice()))
}

fn largest_eigenvalue(x: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(x))
        .eigenvalues
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

fn project_columns(c: &mut DMatrix<f64>, targets: &[f64]) {
    for (k, mut col) in c.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm > 0.0 {
            col *= targets[k] / norm;
        } else {
            let len = col.len();
            col.fill(0.0);
            col[k.min(len - 1)] = targets[k];
        }
    }
}

/// Projected gradient for `min tr{W(-2 B1 C' + C B2 C')}` subject to column
/// `k` of `C` having norm `targets[k]`. Pinned entries, if any, are held at
/// their values. Returns the best feasible iterate.
pub fn apply_scaling_constraint(
    c0: &DMatrix<f64>,
    targets: &[f64],
    term: QuadTerm<'_>,
    fixed: Option<&FixedCoefficients>,
    max_iter: usize,
) -> DMatrix<f64> {
    let lmax = largest_eigenvalue(term.w) * largest_eigenvalue(term.b2);
    let step = if lmax > 0.0 { 1.0 / lmax } else { 0.0 };
    let terms = [term];
    let feasible = |x: &mut DMatrix<f64>| {
        if let Some(f) = fixed {
            f.impose(x);
        }
        project_columns(x, targets);
    };
    let mut best = c0.clone();
    feasible(&mut best);
    let mut f_best = quadratic_objective(&terms, &best);
    let mut cur = best.clone();
    let mut f_cur = f_best;
    for _ in 0..max_iter {
        let mut grad = term.w * (&cur * term.b2 - term.b1);
        if let Some(f) = fixed {
            for (g, pinned) in grad.iter_mut().zip(f.mask.iter()) {
                if *pinned {
                    *g = 0.0;
                }
            }
        }
        cur -= grad * step;
        feasible(&mut cur);
        let f_new = quadratic_objective(&terms, &cur);
        if f_new < f_best {
            best = cur.clone();
            f_best = f_new;
        }
        if (f_cur - f_new).abs() < 1e-8 * (1.0 + f_new.abs()) {
            break;
        }
        f_cur = f_new;
    }
    best
}

/// Eigenvalue constraint on one lag row: stable updates pass through;
/// otherwise the shrunken update replaces `current` only if it lowers the
/// quadratic objective (raises the Q-function).
pub fn apply_eigen_constraint(
    update: &DMatrix<f64>,
    current: &DMatrix<f64>,
    eps: f64,
    term: QuadTerm<'_>,
) -> DMatrix<f64> {
    let rho = spectral_radius(&companion_from_row(update)).unwrap_or(f64::INFINITY);
    if rho < 1.0 {
        return update.clone();
    }
    let shrunk = shrink_row_to_stable(update, eps);
    let terms = [term];
    if quadratic_objective(&terms, &shrunk) < quadratic_objective(&terms, current) {
        shrunk
    } else {
        current.clone()
    }
}

/// Raises every eigenvalue of a covariance to at least `floor`.
fn floor_eigenvalues(x: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(x));
    if eig.eigenvalues.iter().all(|v| *v >= floor) {
        return symmetrize(x);
    }
    let d = eig.eigenvalues.map(|v| v.max(floor));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

fn diagonal_only(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_diagonal(&x.diagonal())
}

fn q_inverse(theta: &ThetaParams, g: usize) -> Result<DMatrix<f64>> {
    spd_inverse(&theta.q[g], COV_RIDGE).ok_or_else(|| Error::SingularMoment("Q is not positive definite".into()))
}

fn r_inverse(theta: &ThetaParams) -> Result<DMatrix<f64>> {
    spd_inverse(&theta.r[0], COV_RIDGE).ok_or_else(|| Error::SingularMoment("R is not positive definite".into()))
}

/// Lag rows, with fixed-coefficient, equality and eigenvalue constraints.
pub fn update_a(theta: &ThetaParams, mom: &SufficientMoments, cons: &ConstraintSet) -> Result<ThetaParams> {
    let m = theta.n_regimes();
    let mut out = theta.clone();
    let qinv: Vec<DMatrix<f64>> = (0..m).map(|g| q_inverse(theta, g)).collect::<Result<_>>()?;
    let active: Vec<usize> = (0..m).filter(|g| mom.dynamics[*g].weight > MIN_WEIGHT).collect();
    if active.is_empty() {
        return Ok(out);
    }
    let term = |g: usize| QuadTerm {
        w: &qinv[g],
        b1: &mom.dynamics[g].s10,
        b2: &mom.dynamics[g].s00,
    };
    let mut rows: Vec<Option<DMatrix<f64>>> = vec![None; m];
    if cons.equal.a {
        let terms: Vec<QuadTerm<'_>> = active.iter().map(|g| term(*g)).collect();
        let shared = apply_fixed_constraints(&terms, cons.fixed_a.as_ref())?;
        for row in rows.iter_mut() {
            *row = Some(shared.clone());
        }
    } else {
        for &g in &active {
            rows[g] = Some(apply_fixed_constraints(&[term(g)], cons.fixed_a.as_ref())?);
        }
    }
    for g in 0..m {
        if let Some(mut row) = rows[g].take() {
            if let Some(eps) = cons.stable_a {
                if active.contains(&g) {
                    row = apply_eigen_constraint(&row, &theta.lag_row(g), eps, term(g));
                } else if spectral_radius(&companion_from_row(&row))? >= 1.0 {
                    row = theta.lag_row(g);
                }
            }
            out.set_lag_row(g, &row);
        }
    }
    Ok(out)
}

/// Innovation covariances given the current lag rows.
pub fn update_q(theta: &ThetaParams, mom: &SufficientMoments, cons: &ConstraintSet) -> Result<ThetaParams> {
    let m = theta.n_regimes();
    let mut out = theta.clone();
    let resid: Vec<DMatrix<f64>> = (0..m).map(|g| dyn_residual(&mom.dynamics[g], &theta.lag_row(g))).collect();
    let finish = |q: DMatrix<f64>| if cons.diag_q { diagonal_only(&q) } else { q };
    if cons.equal.q {
        let w: f64 = mom.dynamics.iter().map(|d| d.weight).sum();
        if w > MIN_WEIGHT {
            let s = resid.iter().fold(DMatrix::zeros(theta.state_size(), theta.state_size()), |acc, x| acc + x);
            let q = finish(s / w);
            out.q = vec![q; m];
        }
    } else {
        for g in 0..m {
            let w = mom.dynamics[g].weight;
            if w > MIN_WEIGHT {
                out.q[g] = finish(&resid[g] / w);
            }
        }
    }
    Ok(out)
}

/// Observation matrices: pooled when shared across regimes, per regime
/// otherwise; fixed-coefficient and column-norm constraints applied.
pub fn update_c(theta: &ThetaParams, mom: &SufficientMoments, spec: &ModelSpec) -> Result<ThetaParams> {
    let cons = &spec.constraints;
    let m = spec.m;
    let mut out = theta.clone();
    if spec.kind == ModelKind::Var {
        return Ok(out);
    }
    let rinv = r_inverse(theta)?;
    let solve = |b1: &DMatrix<f64>, b2: &DMatrix<f64>, c0: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let term = QuadTerm { w: &rinv, b1, b2 };
        let c = apply_fixed_constraints(&[term], cons.fixed_c.as_ref())?;
        Ok(match &cons.scale_c {
            Some(targets) => {
                let start = if c.iter().all(|v| v.is_finite()) { c } else { c0.clone() };
                apply_scaling_constraint(&start, targets, term, cons.fixed_c.as_ref(), SCALE_MAX_ITER)
            }
            None => c,
        })
    };
    if spec.shared_c() || cons.equal.c {
        let b1 = mom.obs.iter().fold(DMatrix::zeros(spec.n, spec.r), |acc, o| acc + &o.syx);
        let b2 = mom.obs.iter().fold(DMatrix::zeros(spec.r, spec.r), |acc, o| acc + &o.sxx);
        let c = solve(&b1, &b2, &theta.c[0])?;
        out.c = vec![c; m];
    } else {
        for j in 0..m {
            if mom.obs[j].weight > MIN_WEIGHT {
                out.c[j] = solve(&mom.obs[j].syx, &mom.obs[j].sxx, &theta.c[j])?;
            }
        }
    }
    Ok(out)
}

/// Measurement covariance, pooled over regimes.
pub fn update_r(theta: &ThetaParams, mom: &SufficientMoments, spec: &ModelSpec) -> Result<ThetaParams> {
    let mut out = theta.clone();
    if spec.kind == ModelKind::Var {
        return Ok(out);
    }
    let w: f64 = mom.obs.iter().map(|o| o.weight).sum();
    if w <= MIN_WEIGHT {
        return Ok(out);
    }
    let mut s = DMatrix::zeros(spec.n, spec.n);
    for (j, o) in mom.obs.iter().enumerate() {
        s += obs_residual(o, &theta.c[j]);
    }
    let mut r = s / w;
    if spec.constraints.diag_r {
        r = diagonal_only(&r);
    }
    out.r = vec![r; spec.m];
    Ok(out)
}

/// Initial-state mean and covariance.
pub fn update_init(theta: &ThetaParams, mom: &SufficientMoments, cons: &ConstraintSet) -> Result<ThetaParams> {
    let m = theta.n_regimes();
    let d = theta.a[0].nrows();
    let mut out = theta.clone();
    let active: Vec<usize> = (0..m).filter(|g| mom.init[*g].weight > MIN_WEIGHT).collect();
    if active.is_empty() {
        return Ok(out);
    }
    if cons.equal.mu {
        let w: f64 = active.iter().map(|g| mom.init[*g].weight).sum();
        let x = active.iter().fold(DVector::zeros(d), |acc, g| acc + &mom.init[*g].x1);
        out.mu = vec![x / w; m];
    } else {
        for &g in &active {
            out.mu[g] = &mom.init[g].x1 / mom.init[g].weight;
        }
    }
    let finish = |s: DMatrix<f64>, _g: usize| if cons.diag_sigma { diagonal_only(&s) } else { s };
    if cons.equal.sigma {
        let w: f64 = active.iter().map(|g| mom.init[*g].weight).sum();
        let s = active
            .iter()
            .fold(DMatrix::zeros(d, d), |acc, g| acc + init_residual(&mom.init[*g], &out.mu[*g]));
        let sig = finish(s / w, active[0]);
        out.sigma = vec![sig; m];
    } else {
        for &g in &active {
            out.sigma[g] = finish(init_residual(&mom.init[g], &out.mu[g]) / mom.init[g].weight, g);
        }
    }
    Ok(out)
}

/// Initial and transition probabilities; rows without any expected visits
/// keep their current values.
pub fn update_probabilities(theta: &ThetaParams, mom: &SufficientMoments) -> ThetaParams {
    let m = theta.n_regimes();
    let mut out = theta.clone();
    let s = mom.first.sum();
    if s > 0.0 {
        out.pi = &mom.first / s;
    }
    for i in 0..m {
        let row: f64 = mom.transitions.row(i).sum();
        if row > MIN_WEIGHT {
            for k in 0..m {
                out.z[(i, k)] = mom.transitions[(i, k)] / row;
            }
        }
    }
    out
}

/// Closed-form maximizer of the Q-function without constraints (beyond the
/// structural sharing of C and R implied by the model kind).
pub fn update_unconstrained(theta: &ThetaParams, mom: &SufficientMoments, spec: &ModelSpec) -> Result<ThetaParams> {
    let free = ConstraintSet::default();
    let plain = ModelSpec {
        constraints: free.clone(),
        ..spec.clone()
    };
    let mut out = update_a(theta, mom, &free)?;
    out = update_q(&out, mom, &free)?;
    out = update_c(&out, mom, &plain)?;
    out = update_r(&out, mom, &plain)?;
    out = update_init(&out, mom, &free)?;
    Ok(update_probabilities(&out, mom))
}

/// Keeps covariances away from singularity: eigenvalues of Q and R are
/// floored at `1e-10` times their mean, those of Sigma at `1e-6` times the
/// mean innovation variance of the group. The initial-state covariance of a
/// VAR model is otherwise driven to zero, since its first observation is
/// the state itself.
pub fn floor_covariances(theta: &mut ThetaParams) {
    let mean_eig = |x: &DMatrix<f64>| (trace(x).abs() / x.nrows().max(1) as f64).max(f64::MIN_POSITIVE);
    for g in 0..theta.n_regimes() {
        let qs = mean_eig(&theta.q[g]);
        theta.q[g] = floor_eigenvalues(&theta.q[g], 1e-10 * qs);
        theta.sigma[g] = floor_eigenvalues(&theta.sigma[g], 1e-6 * qs);
    }
    if theta.r.iter().any(|r| trace(r) > 0.0) {
        for r in theta.r.iter_mut() {
            let s = mean_eig(r);
            *r = floor_eigenvalues(r, 1e-10 * s);
        }
    }
}

/// Full constrained M-step. Parameter groups are updated in the order
/// A, Q, C, R, (mu, Sigma), (pi, Z); each update is kept only if it does not
/// lower the Q-function.
pub fn m_step(theta: &ThetaParams, mom: &SufficientMoments, spec: &ModelSpec) -> Result<ThetaParams> {
    let cons = &spec.constraints;
    let mut cur = theta.clone();
    let mut q_cur = q_function(&cur, mom, spec)?;
    let mut gate = |cand: ThetaParams, cur: &mut ThetaParams, name: &str| -> Result<()> {
        let q_new = q_function(&cand, mom, spec)?;
        if q_new.is_finite() && q_new >= q_cur - 1e-10 * (1.0 + q_cur.abs()) {
            *cur = cand;
            q_cur = q_new;
        } else {
            log::debug!("{name} update rejected: Q {q_new} < {q_cur}");
        }
        Ok(())
    };
    let cand = update_a(&cur, mom, cons)?;
    gate(cand, &mut cur, "A")?;
    let mut cand = update_q(&cur, mom, cons)?;
    floor_covariances(&mut cand);
    gate(cand, &mut cur, "Q")?;
    let cand = update_c(&cur, mom, spec)?;
    gate(cand, &mut cur, "C")?;
    let mut cand = update_r(&cur, mom, spec)?;
    floor_covariances(&mut cand);
    gate(cand, &mut cur, "R")?;
    let mut cand = update_init(&cur, mom, cons)?;
    floor_covariances(&mut cand);
    gate(cand, &mut cur, "initial state")?;
    let cand = update_probabilities(&cur, mom);
    gate(cand, &mut cur, "regime probabilities")?;
    Ok(cur)
}

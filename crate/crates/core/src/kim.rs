//! Kim filter and smoother.
//!
//! The forward pass runs one Kalman prediction/update per regime pair
//! `(S_{t-1}, S_t)`, weights the pairs with the Hamilton recursion and
//! collapses the `M^2` Gaussian posteriors to one moment-matched Gaussian per
//! regime. The backward pass mirrors it: a Rauch-Tung-Striebel step per pair
//! `(S_t, S_{t+1})`, Kim's approximation for the pair probabilities, and
//! collapsing over `S_{t+1}`.
//!
//! All three model kinds are mapped onto one generic switching system in
//! companion form; for the Obs kind the state stacks the `M` processes.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{block_diag, chol_logdet, gaussian_logpdf_chol, symmetrize, symmetrize_in_place, trace, LN_2PI};
use crate::model::{ModelKind, ModelSpec, RegimeSequence, ThetaParams};

/// Relative ridge added to innovation covariances before factorization.
const INNOVATION_RIDGE: f64 = 1e-10;
/// Floor for pair weights before normalization.
const WEIGHT_FLOOR: f64 = 1e-300;

/// Per-regime matrices of the order-one switching system
/// `x_t = F_j x_{t-1} + v_t`, `y_t = H_j x_t + w_t`.
#[derive(Clone, Debug)]
pub(crate) struct SwitchingSystem {
    pub f: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub h: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub m0: Vec<DVector<f64>>,
    pub p0: Vec<DMatrix<f64>>,
    pub pi: DVector<f64>,
    pub z: DMatrix<f64>,
}

impl SwitchingSystem {
    pub fn new(theta: &ThetaParams, spec: &ModelSpec) -> Self {
        let (m, r, n) = (spec.m, spec.r, spec.n);
        let d = spec.companion_dim();
        match spec.kind {
            ModelKind::Dyn | ModelKind::Var => {
                let h = (0..m)
                    .map(|j| {
                        let mut h = DMatrix::zeros(n, d);
                        if spec.kind == ModelKind::Var {
                            h.view_mut((0, 0), (n, n)).fill_with_identity();
                        } else {
                            h.view_mut((0, 0), (n, r)).copy_from(&theta.c[j]);
                        }
                        h
                    })
                    .collect();
                let r_mats = match spec.kind {
                    ModelKind::Var => vec![DMatrix::zeros(n, n); m],
                    _ => theta.r.clone(),
                };
                Self {
                    f: theta.a.clone(),
                    g: (0..m).map(|j| theta.q_companion(j)).collect(),
                    h,
                    r: r_mats,
                    m0: theta.mu.clone(),
                    p0: theta.sigma.clone(),
                    pi: theta.pi.clone(),
                    z: theta.z.clone(),
                }
            }
            ModelKind::Obs => {
                let big = m * d;
                let f = block_diag(&theta.a);
                let g = block_diag(&(0..m).map(|j| theta.q_companion(j)).collect::<Vec<_>>());
                let mut m0 = DVector::zeros(big);
                for j in 0..m {
                    m0.rows_mut(j * d, d).copy_from(&theta.mu[j]);
                }
                let p0 = block_diag(&theta.sigma);
                let h = (0..m)
                    .map(|j| {
                        let mut h = DMatrix::zeros(n, big);
                        h.view_mut((0, j * d), (n, r)).copy_from(&theta.c[j]);
                        h
                    })
                    .collect();
                Self {
                    f: vec![f; m],
                    g: vec![g; m],
                    h,
                    r: theta.r.clone(),
                    m0: vec![m0; m],
                    p0: vec![p0; m],
                    pi: theta.pi.clone(),
                    z: theta.z.clone(),
                }
            }
        }
    }

    pub fn n_regimes(&self) -> usize {
        self.pi.len()
    }
}

/// Forward-pass output.
#[derive(Clone, Debug)]
pub struct FilterStats {
    /// `W_{t|t-1}^j`
    pub pred_prob: Vec<DVector<f64>>,
    /// `W_{t|t}^j`
    pub filt_prob: Vec<DVector<f64>>,
    /// `x_{t|t-1}^j`, collapsed over `S_{t-1}`.
    pub pred_mean: Vec<Vec<DVector<f64>>>,
    /// `V_{t|t-1}^j`
    pub pred_cov: Vec<Vec<DMatrix<f64>>>,
    pub filt_mean: Vec<Vec<DVector<f64>>>,
    pub filt_cov: Vec<Vec<DMatrix<f64>>>,
    /// `log P(y_t | y_{1:t-1})`
    pub loglik_increments: Vec<f64>,
    pub loglik: f64,
}

/// Smoothed moments, all conditional on `y_{1:T}`.
///
/// Entries at `t = 0` of the lagged quantities are zero.
#[derive(Clone, Debug)]
pub struct SmoothedStats {
    /// `W_{t|T}^j`
    pub w: Vec<DVector<f64>>,
    /// `W_{t-1,t|T}^{ij}` at `(i, j)`.
    pub w_pair: Vec<DMatrix<f64>>,
    /// `x_{t|T}^j`
    pub x: Vec<Vec<DVector<f64>>>,
    /// `P_{t|T}^j = E(x_t x_t' | S_t = j, y)`
    pub p: Vec<Vec<DMatrix<f64>>>,
    /// `P_{t-1|T}^{()j} = E(x_{t-1} x_{t-1}' | S_t = j, y)`
    pub p_prev: Vec<Vec<DMatrix<f64>>>,
    /// `P_{t,t-1|T}^j = E(x_t x_{t-1}' | S_t = j, y)`
    pub p_cross: Vec<Vec<DMatrix<f64>>>,
    pub loglik: f64,
    pub filter: FilterStats,
}

impl SmoothedStats {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn n_regimes(&self) -> usize {
        self.w.first().map_or(0, |w| w.len())
    }
}

struct Updated {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    loglik: f64,
}

fn innovation_chol(s: &mut DMatrix<f64>, t: usize) -> Result<Cholesky<f64, Dyn>> {
    let n = s.nrows().max(1) as f64;
    let eps = INNOVATION_RIDGE * (1.0 + trace(s).abs() / n);
    symmetrize_in_place(s);
    for i in 0..s.nrows() {
        s[(i, i)] += eps;
    }
    Cholesky::new(s.clone()).ok_or_else(|| Error::NumericalFailure {
        t,
        msg: "innovation covariance not positive definite".into(),
    })
}

fn kalman_update(
    xp: &DVector<f64>,
    vp: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
    t: usize,
) -> Result<Updated> {
    let pht = vp * h.transpose();
    let mut s = h * &pht + r;
    let chol = innovation_chol(&mut s, t)?;
    let e = y - h * xp;
    let loglik = gaussian_logpdf_chol(&e, &chol);
    // K' = S^{-1} H P
    let kt = chol.solve(&pht.transpose());
    let mean = xp + kt.transpose() * e;
    let mut cov = vp - pht * kt;
    symmetrize_in_place(&mut cov);
    if !loglik.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure {
            t,
            msg: "non-finite filter output".into(),
        });
    }
    Ok(Updated { mean, cov, loglik })
}

/// Observation-side quantities for the Woodbury form of the update, used
/// when `R_j` is positive definite and `N` exceeds the state dimension.
struct InfoObs {
    /// `H' R^{-1}`
    hr: DMatrix<f64>,
    /// `H' R^{-1} H`
    g: DMatrix<f64>,
    rinv: DMatrix<f64>,
    logdet_r: f64,
}

impl InfoObs {
    fn new(h: &DMatrix<f64>, r: &DMatrix<f64>) -> Option<Self> {
        if h.nrows() <= h.ncols() {
            return None;
        }
        let chol = Cholesky::new(symmetrize(r))?;
        let logdet_r = chol_logdet(&chol);
        let rinv = chol.inverse();
        let hr = h.transpose() * &rinv;
        let g = symmetrize(&(&hr * h));
        Some(Self { hr, g, rinv, logdet_r })
    }
}

/// Same update as [`kalman_update`] through `d x d` algebra only:
/// `S^{-1} = R^{-1} - R^{-1} H V (I + G V)^{-1} H' R^{-1}` with `G = H'R^{-1}H`
/// and `det S = det R det(I + G V)`.
fn info_update(
    xp: &DVector<f64>,
    vp: &DMatrix<f64>,
    hry: &DVector<f64>,
    yry: f64,
    info: &InfoObs,
    n: usize,
    t: usize,
) -> Result<Updated> {
    let d = xp.len();
    let gx = &info.g * xp;
    let u = hry - &gx;
    let quad_e = yry - 2.0 * xp.dot(hry) + xp.dot(&gx);
    let gv = &info.g * vp;
    let mut k = gv.clone();
    for i in 0..d {
        k[(i, i)] += 1.0;
    }
    let lu = k.lu();
    let det = lu.determinant();
    let fail = |msg: &str| Error::NumericalFailure { t, msg: msg.into() };
    let sol_u = lu.solve(&u).ok_or_else(|| fail("singular update system"))?;
    let sol_g = lu.solve(&gv).ok_or_else(|| fail("singular update system"))?;
    let vsu = vp * &sol_u;
    let quad = quad_e - u.dot(&vsu);
    let loglik = -0.5 * (n as f64 * LN_2PI + info.logdet_r + det.ln() + quad);
    let mean = xp + vsu;
    let mut cov = vp - vp * sol_g;
    symmetrize_in_place(&mut cov);
    if !(det > 0.0) || !loglik.is_finite() || mean.iter().any(|v| !v.is_finite()) {
        return Err(fail("non-finite filter output"));
    }
    Ok(Updated { mean, cov, loglik })
}

/// Observation update for regime `j`, picking the cheaper form.
struct ObsUpdater<'a> {
    sys: &'a SwitchingSystem,
    info: Vec<Option<InfoObs>>,
}

impl<'a> ObsUpdater<'a> {
    fn new(sys: &'a SwitchingSystem) -> Self {
        let info = sys.h.iter().zip(&sys.r).map(|(h, r)| InfoObs::new(h, r)).collect();
        Self { sys, info }
    }

    /// Per-time data terms `(H'R^{-1}y, y'R^{-1}y)` for every regime.
    fn data_terms(&self, y: &DVector<f64>) -> Vec<Option<(DVector<f64>, f64)>> {
        self.info
            .iter()
            .map(|i| i.as_ref().map(|i| (&i.hr * y, y.dot(&(&i.rinv * y)))))
            .collect()
    }

    fn update(
        &self,
        j: usize,
        xp: &DVector<f64>,
        vp: &DMatrix<f64>,
        y: &DVector<f64>,
        terms: &[Option<(DVector<f64>, f64)>],
        t: usize,
    ) -> Result<Updated> {
        match (&self.info[j], &terms[j]) {
            (Some(info), Some((hry, yry))) => info_update(xp, vp, hry, *yry, info, y.len(), t),
            _ => kalman_update(xp, vp, y, &self.sys.h[j], &self.sys.r[j], t),
        }
    }
}

fn collapse(
    weights: &[f64],
    means: &[&DVector<f64>],
    covs: &[&DMatrix<f64>],
) -> (DVector<f64>, DMatrix<f64>) {
    let d = means[0].len();
    let total: f64 = weights.iter().sum();
    let mut mean = DVector::zeros(d);
    if total <= 0.0 {
        // unreachable regime: keep an arbitrary but finite moment
        let k = weights.len().min(means.len()) - 1;
        return (means[k].clone(), covs[k].clone());
    }
    for (w, m) in weights.iter().zip(means) {
        if *w > 0.0 {
            mean.axpy(*w / total, *m, 1.0);
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for ((w, m), c) in weights.iter().zip(means).zip(covs) {
        if *w > 0.0 {
            let dm = *m - &mean;
            cov += (*c + &dm * dm.transpose()) * (*w / total);
        }
    }
    symmetrize_in_place(&mut cov);
    (mean, cov)
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn columns(y: &DMatrix<f64>) -> Vec<DVector<f64>> {
    y.column_iter().map(|c| c.into_owned()).collect()
}

fn check_dims(y: &DMatrix<f64>, spec: &ModelSpec) -> Result<()> {
    if y.nrows() != spec.n {
        return Err(Error::InvalidInput(format!(
            "data has {} channels, model expects N = {}",
            y.nrows(),
            spec.n
        )));
    }
    if y.ncols() == 0 {
        return Err(Error::InvalidInput("empty time series".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite observation".into()));
    }
    Ok(())
}

/// Forward pass. When `forced` is given, only that regime path receives
/// weight and the output is the exact Kalman filter along it, with the
/// log-likelihood of `(y, S)`.
pub(crate) fn filter_system(
    y: &[DVector<f64>],
    sys: &SwitchingSystem,
    forced: Option<&RegimeSequence>,
) -> Result<FilterStats> {
    let t_len = y.len();
    let m = sys.n_regimes();
    let allowed = |t: usize, j: usize| forced.is_none_or(|s| s.labels[t] == j);
    let updater = ObsUpdater::new(sys);

    let mut out = FilterStats {
        pred_prob: Vec::with_capacity(t_len),
        filt_prob: Vec::with_capacity(t_len),
        pred_mean: Vec::with_capacity(t_len),
        pred_cov: Vec::with_capacity(t_len),
        filt_mean: Vec::with_capacity(t_len),
        filt_cov: Vec::with_capacity(t_len),
        loglik_increments: Vec::with_capacity(t_len),
        loglik: 0.0,
    };

    // t = 0: prior N(m0_j, P0_j) with probability pi_j
    {
        let mut logw = vec![f64::NEG_INFINITY; m];
        let mut means = Vec::with_capacity(m);
        let mut covs = Vec::with_capacity(m);
        let mut pred = DVector::zeros(m);
        let terms = updater.data_terms(&y[0]);
        for j in 0..m {
            let prior = if forced.is_some() {
                if allowed(0, j) { sys.pi[j].max(WEIGHT_FLOOR) } else { 0.0 }
            } else {
                sys.pi[j]
            };
            pred[j] = if forced.is_some() { f64::from(u8::from(allowed(0, j))) } else { sys.pi[j] };
            if prior > 0.0 {
                let u = updater.update(j, &sys.m0[j], &sys.p0[j], &y[0], &terms, 0)?;
                logw[j] = prior.ln() + u.loglik;
                means.push(u.mean);
                covs.push(u.cov);
            } else {
                means.push(sys.m0[j].clone());
                covs.push(sys.p0[j].clone());
            }
        }
        let lse = log_sum_exp(&logw);
        if !lse.is_finite() {
            return Err(Error::NumericalFailure {
                t: 0,
                msg: "all regime weights vanished".into(),
            });
        }
        let probs = normalize_logw(&logw, lse);
        out.pred_prob.push(pred);
        out.pred_mean.push(sys.m0.clone());
        out.pred_cov.push(sys.p0.clone());
        out.filt_prob.push(probs);
        out.filt_mean.push(means);
        out.filt_cov.push(covs);
        out.loglik_increments.push(lse);
    }

    let mut pair_means: Vec<DVector<f64>> = Vec::with_capacity(m * m);
    let mut pair_covs: Vec<DMatrix<f64>> = Vec::with_capacity(m * m);
    let mut pred_means: Vec<DVector<f64>> = Vec::with_capacity(m * m);
    let mut pred_covs: Vec<DMatrix<f64>> = Vec::with_capacity(m * m);
    for t in 1..t_len {
        let prev_prob = &out.filt_prob[t - 1];
        let prev_mean = &out.filt_mean[t - 1];
        let prev_cov = &out.filt_cov[t - 1];
        let mut logw = vec![f64::NEG_INFINITY; m * m];
        let mut prior_w = vec![0.0; m * m];
        pair_means.clear();
        pair_covs.clear();
        pred_means.clear();
        pred_covs.clear();
        let terms = updater.data_terms(&y[t]);
        for i in 0..m {
            for j in 0..m {
                let mut prior = prev_prob[i] * sys.z[(i, j)];
                if forced.is_some() {
                    prior = if allowed(t, j) && allowed(t - 1, i) {
                        sys.z[(i, j)].max(WEIGHT_FLOOR)
                    } else {
                        0.0
                    };
                }
                if forced.is_some() && prior == 0.0 {
                    // pairs off the pinned path never receive weight
                    pair_means.push(prev_mean[i].clone());
                    pair_covs.push(prev_cov[i].clone());
                    pred_means.push(prev_mean[i].clone());
                    pred_covs.push(prev_cov[i].clone());
                    continue;
                }
                let xp = &sys.f[j] * &prev_mean[i];
                let mut vp = &sys.f[j] * &prev_cov[i] * sys.f[j].transpose() + &sys.g[j];
                symmetrize_in_place(&mut vp);
                if prior > 0.0 {
                    let u = updater.update(j, &xp, &vp, &y[t], &terms, t)?;
                    logw[i * m + j] = prior.ln() + u.loglik;
                    prior_w[i * m + j] = prior;
                    pair_means.push(u.mean);
                    pair_covs.push(u.cov);
                } else {
                    pair_means.push(xp.clone());
                    pair_covs.push(vp.clone());
                }
                pred_means.push(xp);
                pred_covs.push(vp);
            }
        }
        let lse = log_sum_exp(&logw);
        if !lse.is_finite() {
            return Err(Error::NumericalFailure {
                t,
                msg: "all regime-pair weights vanished".into(),
            });
        }
        let pair_prob = normalize_logw(&logw, lse);

        let mut filt_prob = DVector::zeros(m);
        let mut pred_prob = DVector::zeros(m);
        let mut f_means = Vec::with_capacity(m);
        let mut f_covs = Vec::with_capacity(m);
        let mut p_means = Vec::with_capacity(m);
        let mut p_covs = Vec::with_capacity(m);
        for j in 0..m {
            let idx: Vec<usize> = (0..m).map(|i| i * m + j).collect();
            let pw: Vec<f64> = idx.iter().map(|k| pair_prob[*k]).collect();
            let prw: Vec<f64> = idx.iter().map(|k| prior_w[*k]).collect();
            filt_prob[j] = pw.iter().sum();
            pred_prob[j] = prw.iter().sum();
            let (fm, fc) = collapse(
                &pw,
                &idx.iter().map(|k| &pair_means[*k]).collect::<Vec<_>>(),
                &idx.iter().map(|k| &pair_covs[*k]).collect::<Vec<_>>(),
            );
            let (pm, pc) = collapse(
                &prw,
                &idx.iter().map(|k| &pred_means[*k]).collect::<Vec<_>>(),
                &idx.iter().map(|k| &pred_covs[*k]).collect::<Vec<_>>(),
            );
            f_means.push(fm);
            f_covs.push(fc);
            p_means.push(pm);
            p_covs.push(pc);
        }
        let s = pred_prob.sum();
        if s > 0.0 {
            pred_prob /= s;
        }
        let s = filt_prob.sum();
        filt_prob /= s;
        out.pred_prob.push(pred_prob);
        out.filt_prob.push(filt_prob);
        out.pred_mean.push(p_means);
        out.pred_cov.push(p_covs);
        out.filt_mean.push(f_means);
        out.filt_cov.push(f_covs);
        out.loglik_increments.push(lse);
    }
    out.loglik = out.loglik_increments.iter().sum();
    Ok(out)
}

fn normalize_logw(logw: &[f64], lse: f64) -> DVector<f64> {
    let mut p = DVector::from_iterator(
        logw.len(),
        logw.iter().map(|l| {
            let v = (l - lse).exp();
            if v < WEIGHT_FLOOR { 0.0 } else { v }
        }),
    );
    let s = p.sum();
    p /= s;
    p
}

/// `B V^{-1}` for a symmetric PSD `V`, with a ridge fallback and a
/// pseudo-inverse as last resort.
fn right_solve_psd(b: &DMatrix<f64>, v: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(v.clone()) {
        return c.solve(&b.transpose()).transpose();
    }
    let mut vr = v.clone();
    let n = v.nrows().max(1) as f64;
    let eps = 1e-12 * (1.0 + trace(v).abs() / n);
    for i in 0..v.nrows() {
        vr[(i, i)] += eps;
    }
    if let Some(c) = Cholesky::new(vr) {
        return c.solve(&b.transpose()).transpose();
    }
    let pinv = v.clone().pseudo_inverse(1e-14 * (1.0 + trace(v).abs())).unwrap_or_else(|_| DMatrix::zeros(v.nrows(), v.ncols()));
    b * pinv
}

pub(crate) fn smooth_system(
    y: &[DVector<f64>],
    sys: &SwitchingSystem,
    forced: Option<&RegimeSequence>,
) -> Result<SmoothedStats> {
    let filter = filter_system(y, sys, forced)?;
    let t_len = y.len();
    let m = sys.n_regimes();
    let d = sys.m0[0].len();

    let zero_vecs = vec![DVector::zeros(d); m];
    let zero_mats = vec![DMatrix::zeros(d, d); m];
    let mut w = vec![DVector::zeros(m); t_len];
    let mut w_pair = vec![DMatrix::zeros(m, m); t_len];
    let mut x = vec![zero_vecs.clone(); t_len];
    let mut v = vec![zero_mats.clone(); t_len];
    let mut p_prev = vec![zero_mats.clone(); t_len];
    let mut p_cross = vec![zero_mats; t_len];

    let last = t_len - 1;
    w[last] = filter.filt_prob[last].clone();
    x[last] = filter.filt_mean[last].clone();
    v[last] = filter.filt_cov[last].clone();

    let allowed = |t: usize, j: usize| forced.is_none_or(|s| s.labels[t] == j);

    for t in (0..last).rev() {
        let fp = &filter.filt_prob[t];
        // Kim's approximation: P(S_t=j | S_{t+1}=k, y) ~ P(S_t=j | S_{t+1}=k, y_{1:t})
        let mut cond = DMatrix::<f64>::zeros(m, m);
        for k in 0..m {
            let mut tot = 0.0;
            for j in 0..m {
                let wjk = if forced.is_some() {
                    f64::from(u8::from(allowed(t, j) && allowed(t + 1, k)))
                } else {
                    fp[j] * sys.z[(j, k)]
                };
                cond[(j, k)] = wjk;
                tot += wjk;
            }
            if tot > 0.0 {
                for j in 0..m {
                    cond[(j, k)] /= tot;
                }
            }
        }
        let mut pair = DMatrix::<f64>::zeros(m, m);
        for j in 0..m {
            for k in 0..m {
                pair[(j, k)] = w[t + 1][k] * cond[(j, k)];
            }
        }
        let s = pair.sum();
        if s > 0.0 {
            pair /= s;
        }

        let mut pair_x: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(m); m];
        let mut pair_v: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(m); m];
        let mut pair_j: Vec<Vec<DMatrix<f64>>> = vec![Vec::with_capacity(m); m];
        for j in 0..m {
            for k in 0..m {
                if cond[(j, k)] <= 0.0 {
                    pair_x[j].push(filter.filt_mean[t][j].clone());
                    pair_v[j].push(filter.filt_cov[t][j].clone());
                    pair_j[j].push(DMatrix::zeros(d, d));
                    continue;
                }
                let xf = &filter.filt_mean[t][j];
                let vf = &filter.filt_cov[t][j];
                let xp = &sys.f[k] * xf;
                let mut vp = &sys.f[k] * vf * sys.f[k].transpose() + &sys.g[k];
                symmetrize_in_place(&mut vp);
                let gain = right_solve_psd(&(vf * sys.f[k].transpose()), &vp);
                let xs = xf + &gain * (&x[t + 1][k] - xp);
                let mut vs = vf + &gain * (&v[t + 1][k] - vp) * gain.transpose();
                symmetrize_in_place(&mut vs);
                pair_x[j].push(xs);
                pair_v[j].push(vs);
                pair_j[j].push(gain);
            }
        }

        let mut wt = DVector::zeros(m);
        for j in 0..m {
            let weights: Vec<f64> = (0..m).map(|k| pair[(j, k)]).collect();
            wt[j] = weights.iter().sum();
            let (xm, vm) = if wt[j] > 0.0 {
                collapse(
                    &weights,
                    &pair_x[j].iter().collect::<Vec<_>>(),
                    &pair_v[j].iter().collect::<Vec<_>>(),
                )
            } else {
                (filter.filt_mean[t][j].clone(), filter.filt_cov[t][j].clone())
            };
            x[t][j] = xm;
            v[t][j] = vm;
        }
        let s = wt.sum();
        wt /= s;
        w[t] = wt;
        w_pair[t + 1] = pair;

        // moments of x_t conditional on S_{t+1} = k
        for k in 0..m {
            let mut pp = DMatrix::zeros(d, d);
            let mut pc = DMatrix::zeros(d, d);
            let xk = &x[t + 1][k];
            let vk = &v[t + 1][k];
            for j in 0..m {
                let om = cond[(j, k)];
                if om <= 0.0 {
                    continue;
                }
                let xs = &pair_x[j][k];
                pp += (&pair_v[j][k] + xs * xs.transpose()) * om;
                pc += (vk * pair_j[j][k].transpose() + xk * xs.transpose()) * om;
            }
            symmetrize_in_place(&mut pp);
            p_prev[t + 1][k] = pp;
            p_cross[t + 1][k] = pc;
        }
    }

    let p = x
        .iter()
        .zip(&v)
        .map(|(xs, vs)| {
            xs.iter()
                .zip(vs)
                .map(|(xi, vi)| symmetrize(&(vi + xi * xi.transpose())))
                .collect()
        })
        .collect();

    Ok(SmoothedStats {
        w,
        w_pair,
        x,
        p,
        p_prev,
        p_cross,
        loglik: filter.loglik,
        filter,
    })
}

/// Forward Kim filter.
pub fn kim_filter(y: &DMatrix<f64>, theta: &ThetaParams, spec: &ModelSpec) -> Result<FilterStats> {
    check_dims(y, spec)?;
    filter_system(&columns(y), &SwitchingSystem::new(theta, spec), None)
}

/// Forward filter and backward smoother.
pub fn kim_smoother(y: &DMatrix<f64>, theta: &ThetaParams, spec: &ModelSpec) -> Result<SmoothedStats> {
    check_dims(y, spec)?;
    smooth_system(&columns(y), &SwitchingSystem::new(theta, spec), None)
}

/// Kalman smoother along a known regime path. The reported log-likelihood
/// is `log P(y, S)`.
pub fn fixed_regime_smoother(
    y: &DMatrix<f64>,
    theta: &ThetaParams,
    spec: &ModelSpec,
    s: &RegimeSequence,
) -> Result<SmoothedStats> {
    check_dims(y, spec)?;
    if s.len() != y.ncols() {
        return Err(Error::InvalidInput("regime path length differs from T".into()));
    }
    if s.labels.iter().any(|l| *l >= spec.m) {
        return Err(Error::InvalidInput("regime label out of range".into()));
    }
    smooth_system(&columns(y), &SwitchingSystem::new(theta, spec), Some(s))
}

/// Most likely regime at each time; ties go to the smallest label.
pub fn decode_regimes(stats: &SmoothedStats) -> RegimeSequence {
    let labels = stats
        .w
        .iter()
        .map(|w| {
            let mut best = 0;
            for j in 1..w.len() {
                if w[j] > w[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    RegimeSequence { labels }
}

/// Time-averaged smoothed regime probabilities.
pub fn dwell_times(stats: &SmoothedStats) -> Vec<f64> {
    let m = stats.n_regimes();
    let mut out = vec![0.0; m];
    for w in &stats.w {
        for j in 0..m {
            out[j] += w[j];
        }
    }
    let t = stats.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= t);
    out
}

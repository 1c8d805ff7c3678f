//! The EM driver: plain EM, deterministic annealing, the fixed-regime EM
//! and the alternating acceleration scheme, plus model-selection scores.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kim::{decode_regimes, fixed_regime_smoother, kim_smoother, SmoothedStats};
use crate::model::{validate, ModelKind, ModelSpec, RegimeSequence, ThetaParams};
use crate::mstep::{m_step, sufficient_moments};

/// Budgets and tolerances of the acceleration scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct AccelerateOptions {
    /// Switching-EM iterations per outer phase.
    pub outer_iters: usize,
    /// Relative tolerance of the outer phases.
    pub outer_tol: f64,
    /// Fixed-regime EM iterations per inner phase.
    pub inner_iters: usize,
    /// Relative tolerance of the inner phases.
    pub inner_tol: f64,
    /// Upper bound on the number of outer phases.
    pub max_cycles: usize,
}

impl Default for AccelerateOptions {
    fn default() -> Self {
        Self {
            outer_iters: 20,
            outer_tol: 1e-4,
            inner_iters: 500,
            inner_tol: 1e-6,
            max_cycles: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Iterations whose relative log-likelihood gain is below this count as
    /// non-improving.
    pub tol_rel: f64,
    /// Consecutive non-improving iterations before stopping.
    pub patience: usize,
    /// Inverse temperatures for annealing; must end at 1.
    pub daem: Option<Vec<f64>>,
    pub accelerate: Option<AccelerateOptions>,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol_rel: 1e-6,
            patience: 5,
            daem: None,
            accelerate: None,
            seed: 0,
        }
    }
}

impl FitOptions {
    pub fn check(&self) -> Result<()> {
        if !(self.tol_rel > 0.0) {
            return Err(Error::InvalidInput("tol_rel must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::InvalidInput("patience must be at least 1".into()));
        }
        if let Some(s) = &self.daem {
            let ok = !s.is_empty()
                && s.iter().all(|b| *b > 0.0 && *b <= 1.0)
                && s.windows(2).all(|w| w[0] <= w[1])
                && *s.last().unwrap() == 1.0;
            if !ok {
                return Err(Error::InvalidInput(
                    "annealing schedule must be nondecreasing in (0, 1] and end at 1".into(),
                ));
            }
        }
        if let Some(a) = &self.accelerate {
            if a.outer_iters == 0 || a.inner_iters == 0 || a.max_cycles == 0 {
                return Err(Error::InvalidInput("acceleration budgets must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Information criteria and prediction error of a fitted model.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionScores {
    pub aic: f64,
    pub bic: f64,
    /// Mean absolute one-step prediction error, normalized by `(T - p) r`.
    pub mape: f64,
    pub n_free_params: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Highest-likelihood iterate.
    pub theta: ThetaParams,
    /// Smoother output at `theta`.
    pub stats: SmoothedStats,
    /// Log-likelihood of every E-step, in order.
    pub loglik_trace: Vec<f64>,
    pub s_hat: RegimeSequence,
    pub scores: SelectionScores,
    /// Number of switching-smoother passes.
    pub smoother_passes: usize,
    pub stop: StopReason,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        self.stats.loglik
    }
}

/// Best-so-far bookkeeping shared by all drivers.
struct Tracker {
    best: Option<(ThetaParams, SmoothedStats)>,
    trace: Vec<f64>,
    passes: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            best: None,
            trace: Vec::new(),
            passes: 0,
        }
    }

    fn best_loglik(&self) -> f64 {
        self.best.as_ref().map_or(f64::NEG_INFINITY, |(_, s)| s.loglik)
    }

    fn record(&mut self, theta: &ThetaParams, stats: &SmoothedStats) {
        self.trace.push(stats.loglik);
        if stats.loglik > self.best_loglik() {
            self.best = Some((theta.clone(), stats.clone()));
        }
    }

    fn fail(&self, iteration: usize, source: Error) -> Error {
        Error::Fit {
            iteration,
            source: Box::new(source),
            best: self.best.as_ref().map(|(t, _)| Box::new(t.clone())),
        }
    }

    fn finish(self, y: &DMatrix<f64>, spec: &ModelSpec, stop: StopReason) -> Result<FitResult> {
        let (theta, stats) = self
            .best
            .ok_or_else(|| Error::InvalidInput("no EM iteration was run".into()))?;
        let s_hat = decode_regimes(&stats);
        let scores = selection_scores(&theta, &stats, &s_hat, spec, y);
        Ok(FitResult {
            theta,
            stats,
            loglik_trace: self.trace,
            s_hat,
            scores,
            smoother_passes: self.passes,
            stop,
        })
    }
}

fn rel_gain(new: f64, old: f64) -> f64 {
    (new - old) / old.abs().max(f64::MIN_POSITIVE)
}

/// Runs switching EM from `theta` for at most `budget` E-steps, recording
/// into `tr`. Returns the last iterate and whether the stopping rule fired.
fn run_switching(
    y: &DMatrix<f64>,
    spec: &ModelSpec,
    theta: ThetaParams,
    beta: f64,
    budget: usize,
    tol: f64,
    patience: usize,
    tr: &mut Tracker,
) -> Result<(ThetaParams, bool)> {
    let mut theta = theta;
    let mut prev = f64::NEG_INFINITY;
    let mut stalled = 0;
    for _ in 0..budget {
        let iteration = tr.trace.len();
        let stats = kim_smoother(y, &theta, spec).map_err(|e| tr.fail(iteration, e))?;
        tr.passes += 1;
        if !stats.loglik.is_finite() {
            return Err(tr.fail(
                iteration,
                Error::NumericalFailure {
                    t: 0,
                    msg: "non-finite log-likelihood".into(),
                },
            ));
        }
        tr.record(&theta, &stats);
        if prev.is_finite() && rel_gain(stats.loglik, prev) < tol {
            stalled += 1;
            if stalled >= patience {
                return Ok((theta, true));
            }
        } else {
            stalled = 0;
        }
        prev = stats.loglik;
        let mom = sufficient_moments(y, &stats, spec, beta);
        theta = m_step(&theta, &mom, spec).map_err(|e| tr.fail(iteration, e))?;
    }
    Ok((theta, false))
}

fn check_start(y: &DMatrix<f64>, spec: &ModelSpec, theta0: &ThetaParams, opts: &FitOptions) -> Result<()> {
    spec.check()?;
    opts.check()?;
    if y.nrows() != spec.n {
        return Err(Error::InvalidInput(format!(
            "data has {} channels, model expects N = {}",
            y.nrows(),
            spec.n
        )));
    }
    let v = validate(theta0, spec);
    if !v.is_empty() {
        return Err(Error::InvalidParams(v));
    }
    Ok(())
}

/// Plain EM from `theta0`. Stops after `max_iter` E-steps or `patience`
/// consecutive iterations with relative gain below `tol_rel`; returns the
/// best iterate.
pub fn em_fit(y: &DMatrix<f64>, spec: &ModelSpec, theta0: &ThetaParams, opts: &FitOptions) -> Result<FitResult> {
    check_start(y, spec, theta0, opts)?;
    let mut tr = Tracker::new();
    let (_, conv) = run_switching(y, spec, theta0.clone(), 1.0, opts.max_iter, opts.tol_rel, opts.patience, &mut tr)?;
    tr.finish(y, spec, if conv { StopReason::Converged } else { StopReason::MaxIter })
}

/// Deterministic annealing EM: one EM run per inverse temperature in the
/// schedule, each started where the previous one ended. `max_iter` applies
/// per stage.
pub fn daem_fit(y: &DMatrix<f64>, spec: &ModelSpec, theta0: &ThetaParams, opts: &FitOptions) -> Result<FitResult> {
    check_start(y, spec, theta0, opts)?;
    let schedule = opts.daem.clone().unwrap_or_else(|| vec![1.0]);
    let mut tr = Tracker::new();
    let mut theta = theta0.clone();
    let mut conv = false;
    for beta in schedule {
        let (next, c) = run_switching(y, spec, theta, beta, opts.max_iter, opts.tol_rel, opts.patience, &mut tr)?;
        theta = next;
        conv = c;
    }
    tr.finish(y, spec, if conv { StopReason::Converged } else { StopReason::MaxIter })
}

/// Output of [`fixed_regime_em`].
#[derive(Clone, Debug)]
pub struct FixedRegimeFit {
    pub theta: ThetaParams,
    /// `log P(y, S)` at every E-step.
    pub loglik_trace: Vec<f64>,
}

/// Exact EM with the regime path pinned to `s`. The objective is the joint
/// log-likelihood `log P(y, S)`, which never decreases.
pub fn fixed_regime_em(
    y: &DMatrix<f64>,
    spec: &ModelSpec,
    s: &RegimeSequence,
    theta0: &ThetaParams,
    max_iter: usize,
    tol_rel: f64,
) -> Result<FixedRegimeFit> {
    let mut theta = theta0.clone();
    let mut best = (f64::NEG_INFINITY, theta0.clone());
    let mut trace = Vec::new();
    for iteration in 0..max_iter {
        let fail = |e: Error, best: &ThetaParams| Error::Fit {
            iteration,
            source: Box::new(e),
            best: Some(Box::new(best.clone())),
        };
        let stats = fixed_regime_smoother(y, &theta, spec, s).map_err(|e| fail(e, &best.1))?;
        let ll = stats.loglik;
        trace.push(ll);
        let prev = best.0;
        if ll > best.0 {
            best = (ll, theta.clone());
        }
        if prev.is_finite() && rel_gain(ll, prev) < tol_rel {
            break;
        }
        let mom = sufficient_moments(y, &stats, spec, 1.0);
        theta = m_step(&theta, &mom, spec).map_err(|e| fail(e, &best.1))?;
    }
    Ok(FixedRegimeFit {
        theta: best.1,
        loglik_trace: trace,
    })
}

/// Alternates short switching-EM phases with long fixed-regime EM phases on
/// the decoded regimes. Ends when an outer phase improves the best
/// switching log-likelihood by less than `tol_rel` (relative).
pub fn accelerated_fit(
    y: &DMatrix<f64>,
    spec: &ModelSpec,
    theta0: &ThetaParams,
    opts: &FitOptions,
) -> Result<FitResult> {
    check_start(y, spec, theta0, opts)?;
    let acc = opts.accelerate.clone().unwrap_or_default();
    let mut tr = Tracker::new();
    let mut theta = theta0.clone();
    let mut last_best = f64::NEG_INFINITY;
    let mut conv = false;
    for _ in 0..acc.max_cycles {
        // outer phases stop at the first insufficient increase
        run_switching(y, spec, theta, 1.0, acc.outer_iters, acc.outer_tol, 1, &mut tr)?;
        let (best_theta, best_stats) = tr.best.clone().expect("outer phase ran");
        if last_best.is_finite() && rel_gain(best_stats.loglik, last_best) < opts.tol_rel {
            conv = true;
            break;
        }
        last_best = best_stats.loglik;
        let s_hat = decode_regimes(&best_stats);
        let iteration = tr.trace.len();
        theta = fixed_regime_em(y, spec, &s_hat, &best_theta, acc.inner_iters, acc.inner_tol)
            .map_err(|e| tr.fail(iteration, e))?
            .theta;
    }
    tr.finish(y, spec, if conv { StopReason::Converged } else { StopReason::MaxIter })
}

/// Dispatches on the options: acceleration, annealing or plain EM.
pub fn fit(y: &DMatrix<f64>, spec: &ModelSpec, theta0: &ThetaParams, opts: &FitOptions) -> Result<FitResult> {
    if opts.accelerate.is_some() {
        accelerated_fit(y, spec, theta0, opts)
    } else if opts.daem.is_some() {
        daem_fit(y, spec, theta0, opts)
    } else {
        em_fit(y, spec, theta0, opts)
    }
}

fn sym_count(d: usize, diag: bool) -> usize {
    if diag {
        d
    } else {
        d * (d + 1) / 2
    }
}

/// Number of free parameters after pinned, tied and diagonal constraints.
pub fn n_free_params(spec: &ModelSpec) -> usize {
    let c = &spec.constraints;
    let (m, p, r, n) = (spec.m, spec.p, spec.r, spec.n);
    let d = p * r;
    let groups = |tied: bool| if tied { 1 } else { m };
    let a_fixed = c.fixed_a.as_ref().map_or(0, |f| f.n_fixed());
    let mut k = groups(c.equal.a) * (p * r * r - a_fixed);
    k += groups(c.equal.q) * sym_count(r, c.diag_q);
    if spec.kind != ModelKind::Var {
        let c_fixed = c.fixed_c.as_ref().map_or(0, |f| f.n_fixed());
        let per_c = n * r - c_fixed - if c.scale_c.is_some() { r } else { 0 };
        k += groups(spec.shared_c()) * per_c;
        k += sym_count(n, c.diag_r);
    }
    k += groups(c.equal.mu) * d;
    k += groups(c.equal.sigma) * sym_count(d, c.diag_sigma);
    k += (m - 1) + m * (m - 1);
    k
}

/// `-2 log L + k * n_free` for `k = 2` (AIC) and `k = ln T` (BIC).
pub fn information_criteria(loglik: f64, n_free: usize, t_len: usize) -> (f64, f64) {
    let nf = n_free as f64;
    (-2.0 * loglik + 2.0 * nf, -2.0 * loglik + (t_len as f64).ln() * nf)
}

/// One-step-ahead predictions `y_{t|t-1}` for `t >= p` (zero-based),
/// following the fitted kind.
pub fn one_step_predictions(
    theta: &ThetaParams,
    stats: &SmoothedStats,
    s_hat: &RegimeSequence,
    spec: &ModelSpec,
    y: &DMatrix<f64>,
) -> Vec<DVector<f64>> {
    let (m, p, r, n) = (spec.m, spec.p, spec.r, spec.n);
    let d = spec.companion_dim();
    let f = &stats.filter;
    (p..y.ncols())
        .map(|t| match spec.kind {
            ModelKind::Dyn => {
                let mut out = DVector::zeros(n);
                for j in 0..m {
                    out += &theta.c[j] * f.pred_mean[t][j].rows(0, r) * f.pred_prob[t][j];
                }
                out
            }
            ModelKind::Var => {
                let prev = s_hat.labels[t - 1];
                let mut out = DVector::zeros(n);
                for j in 0..m {
                    let mut pj = DVector::zeros(n);
                    for l in 0..p {
                        pj += theta.lag(j, l + 1) * y.column(t - 1 - l);
                    }
                    out += pj * theta.z[(prev, j)];
                }
                out
            }
            ModelKind::Obs => {
                let prev = s_hat.labels[t - 1];
                let mut state = DVector::zeros(m * d);
                for i in 0..m {
                    state += &f.pred_mean[t][i] * f.pred_prob[t][i];
                }
                let mut out = DVector::zeros(n);
                for j in 0..m {
                    out += &theta.c[j] * state.rows(j * d, r) * theta.z[(prev, j)];
                }
                out
            }
        })
        .collect()
}

/// Mean absolute prediction error over `t > p`, divided by `(T - p) r`.
pub fn mape(y: &DMatrix<f64>, predictions: &[DVector<f64>], p: usize, r: usize) -> f64 {
    let t_len = y.ncols();
    if t_len <= p {
        return 0.0;
    }
    let total: f64 = predictions
        .iter()
        .enumerate()
        .map(|(k, yp)| (y.column(p + k) - yp).abs().sum())
        .sum();
    total / ((t_len - p) * r) as f64
}

pub fn selection_scores(
    theta: &ThetaParams,
    stats: &SmoothedStats,
    s_hat: &RegimeSequence,
    spec: &ModelSpec,
    y: &DMatrix<f64>,
) -> SelectionScores {
    let k = n_free_params(spec);
    let (aic, bic) = information_criteria(stats.loglik, k, y.ncols());
    let preds = one_step_predictions(theta, stats, s_hat, spec, y);
    SelectionScores {
        aic,
        bic,
        mape: mape(y, &preds, spec.p, spec.r),
        n_free_params: k,
    }
}

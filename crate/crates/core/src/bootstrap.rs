//! Parametric bootstrap of fitted parameters: resampling under the fitted
//! model, refitting, resolving label switching and building confidence
//! intervals.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::em::{accelerated_fit, FitOptions};
use crate::error::{Error, Result};
use crate::init::{initialize, InitOptions};
use crate::matching::{for_each_permutation, MAX_MATCH_REGIMES};
use crate::model::{permute_regimes, validate, ModelKind, ModelSpec, ThetaParams};
use crate::simulate::{rng_for, simulate_model};
use crate::stationary::{stationary_measures, StationaryMeasures, DEFAULT_MAX_LAG};

/// Largest tolerated fraction of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.2;
/// Replicate count below which quantile intervals are unreliable.
pub const MIN_QUANTILE_REPLICATES: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub t_len: usize,
    pub seed: u64,
    pub fit: FitOptions,
}

#[derive(Clone, Debug)]
pub struct BootstrapEnsemble {
    /// Refitted parameters of the surviving replicates.
    pub replicates: Vec<ThetaParams>,
    /// Stationary measures of each replicate (`None` when a regime is not
    /// stationary).
    pub measures: Vec<Option<StationaryMeasures>>,
    pub logliks: Vec<f64>,
    /// Index of each survivor among the requested replicates.
    pub indices: Vec<usize>,
    pub requested: usize,
    pub failed: usize,
    pub seed: u64,
}

impl BootstrapEnsemble {
    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }
}

struct Replicate {
    theta: ThetaParams,
    loglik: f64,
}

fn one_replicate(theta_hat: &ThetaParams, spec: &ModelSpec, opts: &BootstrapOptions, stream: u64) -> Result<Replicate> {
    let mut rng = rng_for(opts.seed, stream);
    let sim = simulate_model(theta_hat, spec, opts.t_len, &mut rng)?;
    let init = initialize(
        &sim.y,
        spec,
        &InitOptions {
            seed: opts.seed.wrapping_add(stream),
            ..Default::default()
        },
    )?;
    let fit_opts = FitOptions {
        accelerate: Some(opts.fit.accelerate.clone().unwrap_or_default()),
        ..opts.fit.clone()
    };
    let fit = accelerated_fit(&sim.y, spec, &init.theta, &fit_opts)?;
    Ok(Replicate {
        theta: fit.theta,
        loglik: fit.stats.loglik,
    })
}

/// Simulates `replicates` series of length `t_len` under `theta_hat`,
/// initializes and refits each one. Replicates run in parallel on the
/// current rayon pool, each from its own random stream, so the ensemble
/// does not depend on the number of threads. A failed replicate is retried
/// once on a fresh stream and then dropped with a warning.
pub fn parametric_bootstrap(theta_hat: &ThetaParams, spec: &ModelSpec, opts: &BootstrapOptions) -> Result<BootstrapEnsemble> {
    let v = validate(theta_hat, spec);
    if !v.is_empty() {
        return Err(Error::InvalidParams(v));
    }
    for (j, rho) in theta_hat.spectral_radii()?.into_iter().enumerate() {
        if rho >= 1.0 {
            return Err(Error::NotStationary { regime: j, radius: rho });
        }
    }
    if opts.replicates < 2 {
        return Err(Error::InvalidInput("need at least 2 bootstrap replicates".into()));
    }
    let results: Vec<Option<Replicate>> = (0..opts.replicates)
        .into_par_iter()
        .map(|b| {
            let first = 2 * b as u64;
            match one_replicate(theta_hat, spec, opts, first) {
                Ok(r) => Some(r),
                Err(e) => {
                    log::warn!("bootstrap replicate {} failed ({e}); retrying", b + 1);
                    match one_replicate(theta_hat, spec, opts, first + 1) {
                        Ok(r) => Some(r),
                        Err(e) => {
                            log::warn!("bootstrap replicate {} dropped: {e}", b + 1);
                            None
                        }
                    }
                }
            }
        })
        .collect();
    let failed = results.iter().filter(|r| r.is_none()).count();
    if failed as f64 > MAX_FAILURE_RATE * opts.replicates as f64 {
        return Err(Error::EnsembleFailure {
            failed,
            total: opts.replicates,
        });
    }
    let mut ens = BootstrapEnsemble {
        replicates: Vec::new(),
        measures: Vec::new(),
        logliks: Vec::new(),
        indices: Vec::new(),
        requested: opts.replicates,
        failed,
        seed: opts.seed,
    };
    for (b, r) in results.into_iter().enumerate() {
        if let Some(r) = r {
            ens.measures.push(stationary_measures(&r.theta, spec, DEFAULT_MAX_LAG).ok());
            ens.replicates.push(r.theta);
            ens.logliks.push(r.loglik);
            ens.indices.push(b);
        }
    }
    Ok(ens)
}

/// How replicate regimes are aligned with the reference fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MatchKey {
    /// Initial probabilities (L1 distance).
    #[default]
    Pi,
    /// Companion transition matrices (squared Frobenius distance).
    A,
    /// Stationary observation covariances (squared Frobenius distance).
    Cov,
}

/// Permutation `sigma` (old label `j` becomes `sigma[j]`) of `candidate`
/// that best matches `reference` under `key`. Ties go to the first
/// permutation in lexicographic order.
pub fn best_permutation(
    candidate: &ThetaParams,
    reference: &ThetaParams,
    spec: &ModelSpec,
    key: MatchKey,
) -> Result<Vec<usize>> {
    let m = spec.m;
    if m > MAX_MATCH_REGIMES {
        return Err(Error::TooManyRegimes(m));
    }
    let covs = |theta: &ThetaParams| -> Option<Vec<nalgebra::DMatrix<f64>>> {
        stationary_measures(theta, spec, 0)
            .ok()
            .map(|s| s.regimes.into_iter().map(|g| g.cov).collect())
    };
    let (cand_cov, ref_cov) = match key {
        MatchKey::Cov => (covs(candidate), covs(reference)),
        _ => (None, None),
    };
    let cost = |sigma: &[usize]| -> f64 {
        (0..m)
            .map(|j| {
                let k = sigma[j];
                match key {
                    MatchKey::Pi => (candidate.pi[j] - reference.pi[k]).abs(),
                    MatchKey::A => (&candidate.a[j] - &reference.a[k]).norm_squared(),
                    MatchKey::Cov => match (&cand_cov, &ref_cov) {
                        (Some(c), Some(r)) => (&c[j] - &r[k]).norm_squared(),
                        _ => (&candidate.a[j] - &reference.a[k]).norm_squared(),
                    },
                }
            })
            .sum()
    };
    let mut best = ((0..m).collect::<Vec<_>>(), f64::INFINITY);
    for_each_permutation(m, |sigma| {
        let c = cost(sigma);
        if c < best.1 {
            best = (sigma.to_vec(), c);
        }
    });
    Ok(best.0)
}

/// Relabels every replicate to match `theta_hat`.
pub fn match_replicates(
    ens: &BootstrapEnsemble,
    theta_hat: &ThetaParams,
    spec: &ModelSpec,
    key: MatchKey,
) -> Result<BootstrapEnsemble> {
    let mut out = ens.clone();
    for (b, theta) in ens.replicates.iter().enumerate() {
        let sigma = best_permutation(theta, theta_hat, spec, key)?;
        out.replicates[b] = permute_regimes(theta, &sigma)?;
        if let Some(meas) = &ens.measures[b] {
            let mut regimes = meas.regimes.clone();
            for (j, g) in meas.regimes.iter().enumerate() {
                regimes[sigma[j]] = g.clone();
            }
            out.measures[b] = Some(StationaryMeasures { regimes });
        }
    }
    Ok(out)
}

/// Families of scalar quantities that bootstrap intervals can target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    Pi,
    Z,
    /// Lag coefficients of every regime.
    A,
    Q,
    R,
    /// Observation-space projection `C C'`.
    Cct,
    /// Stationary observation covariances.
    Cov,
    Corr,
    /// Autocorrelations at lags `1..=max_lag`.
    Acf,
    /// Partial correlations.
    Pcorr,
}

impl Target {
    pub const ALL: [Target; 10] = [
        Target::Pi,
        Target::Z,
        Target::A,
        Target::Q,
        Target::R,
        Target::Cct,
        Target::Cov,
        Target::Corr,
        Target::Acf,
        Target::Pcorr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Target::Pi => "pi",
            Target::Z => "Z",
            Target::A => "A",
            Target::Q => "Q",
            Target::R => "R",
            Target::Cct => "CCt",
            Target::Cov => "cov",
            Target::Corr => "corr",
            Target::Acf => "acf",
            Target::Pcorr => "pcorr",
        }
    }

    /// Whether the target is a function of the stationary measures.
    pub fn needs_measures(self) -> bool {
        matches!(self, Target::Cov | Target::Corr | Target::Acf | Target::Pcorr)
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim();
        Target::ALL
            .into_iter()
            .find(|t| t.name().eq_ignore_ascii_case(key))
            .ok_or_else(|| Error::InvalidInput(format!("unknown bootstrap target '{key}'")))
    }
}

/// One scalar target. `index` is 1-based: regime first where the target
/// is regime-specific, then the entry, e.g. `"2:1,3"`. Autocorrelations
/// are indexed `regime:channel,lag`; `A` is `regime:lag:row,col`.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetValue {
    pub target: Target,
    pub index: String,
    pub value: f64,
}

fn push_matrix(out: &mut Vec<TargetValue>, target: Target, prefix: &str, x: &nalgebra::DMatrix<f64>, lower_only: bool, skip_diag: bool) {
    for row in 0..x.nrows() {
        for col in 0..x.ncols() {
            if (lower_only && col > row) || (skip_diag && col == row) {
                continue;
            }
            out.push(TargetValue {
                target,
                index: format!("{prefix}{},{}", row + 1, col + 1),
                value: x[(row, col)],
            });
        }
    }
}

/// Values of the requested target families, in a fixed order. Symmetric
/// matrices contribute their lower triangle; correlation-type matrices
/// skip the unit diagonal. Measure-based targets are omitted when
/// `measures` is `None`. `C C'` and `R` are absent in the Var kind and
/// listed once when shared across regimes.
pub fn target_values(
    theta: &ThetaParams,
    measures: Option<&StationaryMeasures>,
    spec: &ModelSpec,
    targets: &[Target],
) -> Vec<TargetValue> {
    let m = spec.m;
    let mut out = Vec::new();
    let shared = spec.shared_c();
    for &target in targets {
        match target {
            Target::Pi => {
                for j in 0..m {
                    out.push(TargetValue {
                        target,
                        index: format!("{}", j + 1),
                        value: theta.pi[j],
                    });
                }
            }
            Target::Z => push_matrix(&mut out, target, "", &theta.z, false, false),
            Target::A => {
                for j in 0..m {
                    for l in 1..=spec.p {
                        push_matrix(&mut out, target, &format!("{}:{}:", j + 1, l), &theta.lag(j, l), false, false);
                    }
                }
            }
            Target::Q => {
                for j in 0..m {
                    push_matrix(&mut out, target, &format!("{}:", j + 1), &theta.q[j], true, false);
                }
            }
            Target::R | Target::Cct if spec.kind == ModelKind::Var => {}
            Target::R | Target::Cct => {
                let regimes = if shared { 1 } else { m };
                for j in 0..regimes {
                    let prefix = if shared { String::new() } else { format!("{}:", j + 1) };
                    let x = if target == Target::R {
                        theta.r[j].clone()
                    } else {
                        &theta.c[j] * theta.c[j].transpose()
                    };
                    push_matrix(&mut out, target, &prefix, &x, true, false);
                }
            }
            Target::Cov | Target::Corr | Target::Acf | Target::Pcorr => {
                let Some(meas) = measures else { continue };
                for (j, g) in meas.regimes.iter().enumerate() {
                    let prefix = format!("{}:", j + 1);
                    match target {
                        Target::Cov => push_matrix(&mut out, target, &prefix, &g.cov, true, false),
                        Target::Corr => push_matrix(&mut out, target, &prefix, &g.corr, true, true),
                        Target::Pcorr => push_matrix(&mut out, target, &prefix, &g.pcorr, true, true),
                        _ => push_matrix(&mut out, target, &prefix, &g.acf, false, false),
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CiMethod {
    Percentile,
    Basic,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceBands {
    pub intervals: Vec<Interval>,
    pub method: CiMethod,
    /// Nominal coverage.
    pub level: f64,
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n - 1) q`).
pub fn quantile_type7(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Confidence intervals at coverage `level` for each scalar target.
/// `samples[b][k]` is target `k` in replicate `b`; `estimate[k]` is the
/// value at the original fit. Non-finite sample values mark targets that
/// are undefined in a replicate and are left out of that target's
/// interval; a target with fewer than two usable values gets a NaN
/// interval.
pub fn confidence_intervals(samples: &[Vec<f64>], estimate: &[f64], level: f64, method: CiMethod) -> Result<ConfidenceBands> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level {level} outside (0, 1)")));
    }
    let b = samples.len();
    if b < 2 {
        return Err(Error::InvalidInput("need at least 2 surviving replicates".into()));
    }
    if samples.iter().any(|s| s.len() != estimate.len()) {
        return Err(Error::InvalidInput("replicate targets differ in length from the estimate".into()));
    }
    if method != CiMethod::Normal && b < MIN_QUANTILE_REPLICATES {
        log::warn!("only {b} replicates for quantile intervals");
    }
    let alpha = 1.0 - level;
    let z = Normal::standard().inverse_cdf(1.0 - alpha / 2.0);
    let intervals = (0..estimate.len())
        .map(|k| {
            let mut col: Vec<f64> = samples.iter().map(|s| s[k]).filter(|v| v.is_finite()).collect();
            if col.len() < 2 {
                return Interval {
                    lower: f64::NAN,
                    upper: f64::NAN,
                };
            }
            col.sort_by(|a, b| a.total_cmp(b));
            let b = col.len();
            let lo = quantile_type7(&col, alpha / 2.0);
            let hi = quantile_type7(&col, 1.0 - alpha / 2.0);
            let est = estimate[k];
            match method {
                CiMethod::Percentile => Interval { lower: lo, upper: hi },
                CiMethod::Basic => Interval {
                    lower: 2.0 * est - hi,
                    upper: 2.0 * est - lo,
                },
                CiMethod::Normal => {
                    let mean = col.iter().sum::<f64>() / b as f64;
                    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (b - 1) as f64).sqrt();
                    let centre = est - (mean - est);
                    Interval {
                        lower: centre - z * sd,
                        upper: centre + z * sd,
                    }
                }
            }
        })
        .collect();
    Ok(ConfidenceBands { intervals, method, level })
}

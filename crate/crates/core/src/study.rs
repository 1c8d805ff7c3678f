//! Simulation-study harness: draw a parameter set, simulate, run the
//! competing estimators and score them against the truth.

use nalgebra::DMatrix;

use crate::em::{em_fit, fixed_regime_em, FitOptions};
use crate::error::{Error, Result};
use crate::init::{initialize, sliding_window_km, InitOptions, Segmentation, DEFAULT_WINDOW};
use crate::kim::{decode_regimes, kim_smoother};
use crate::linalg::l11;
use crate::matching::match_regimes_by_classification;
use crate::model::{permute_regimes, ModelKind, ModelSpec, RegimeSequence, ThetaParams};
use crate::simulate::{make_study_theta, rng_for, simulate_model};
use crate::stationary::stationary_measures;

/// Estimators compared in the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    /// Sliding-window covariances clustered by K-means.
    SwKm,
    /// The EM initializer on its own.
    SsmOls,
    /// EM maximum likelihood from the initializer.
    SsmMl,
    /// The initializer given the true regimes.
    OrOls,
    /// Fixed-regime EM at the true regimes.
    OrMl,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::SwKm, Method::SsmOls, Method::SsmMl, Method::OrOls, Method::OrMl];

    pub fn name(self) -> &'static str {
        match self {
            Method::SwKm => "SW-KM",
            Method::SsmOls => "SSM-OLS",
            Method::SsmMl => "SSM-ML",
            Method::OrOls => "OR-OLS",
            Method::OrMl => "OR-ML",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let key = s.trim().to_ascii_uppercase().replace('_', "-");
        Method::ALL.into_iter().find(|m| m.name() == key)
    }
}

/// Relative L1,1 errors aggregated across regimes. An entry is `None` when
/// the true quantity is identically zero (e.g. `R` in the Var kind) or
/// could not be computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelativeErrors {
    pub a: Option<f64>,
    pub c: Option<f64>,
    pub q: Option<f64>,
    pub r: Option<f64>,
    pub z: Option<f64>,
    /// Stationary observation covariances.
    pub cov: Option<f64>,
}

impl RelativeErrors {
    /// `(name, value)` pairs in a fixed order.
    pub fn entries(&self) -> [(&'static str, Option<f64>); 6] {
        [
            ("A", self.a),
            ("C", self.c),
            ("Q", self.q),
            ("R", self.r),
            ("Z", self.z),
            ("cov", self.cov),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub classification: Option<f64>,
    pub errors: RelativeErrors,
    /// Failure message when the estimator did not run to completion.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Replication {
    pub seed: u64,
    pub truth: ThetaParams,
    pub s_true: RegimeSequence,
    pub outcomes: Vec<MethodOutcome>,
}

impl Replication {
    pub fn outcome(&self, method: Method) -> Option<&MethodOutcome> {
        self.outcomes.iter().find(|o| o.method == method)
    }
}

#[derive(Clone, Debug)]
pub struct StudyOptions {
    pub methods: Vec<Method>,
    pub fit: FitOptions,
    pub window: usize,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            fit: FitOptions::default(),
            window: DEFAULT_WINDOW,
        }
    }
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0 && num.is_finite()).then(|| num / den)
}

/// The matrix `B = (Ĉ'Ĉ)⁻¹ Ĉ'C` that best maps `Ĉ` onto `C`.
pub fn alignment(c_hat: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ct = c_hat.transpose();
    (&ct * c_hat).try_inverse().map(|g| g * ct * c)
}

/// Orthogonal projection onto the column space of `c`.
pub fn projection(c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let ct = c.transpose();
    (&ct * c).try_inverse().map(|g| c * g * ct)
}

/// Relative errors of an estimate whose regimes are already aligned with
/// the truth. `A` and `Q` are compared after the change of basis
/// `B⁻¹ Â B`, `B⁻¹ Q̂ B⁻ᵀ`; `C` through its column-space projection.
pub fn relative_errors(est: &ThetaParams, truth: &ThetaParams, spec: &ModelSpec) -> RelativeErrors {
    let m = spec.m;
    let mut out = RelativeErrors::default();

    let mut basis = Vec::with_capacity(m);
    for j in 0..m {
        let b = alignment(&est.c[j], &truth.c[j]).and_then(|b| b.clone().try_inverse().map(|bi| (b, bi)));
        basis.push(b);
    }
    if basis.iter().all(Option::is_some) {
        let (mut num_a, mut den_a, mut num_q, mut den_q) = (0.0, 0.0, 0.0, 0.0);
        for (j, bb) in basis.iter().enumerate() {
            let (b, bi) = bb.as_ref().expect("checked");
            for l in 1..=spec.p {
                let a = truth.lag(j, l);
                num_a += l11(&(bi * est.lag(j, l) * b - &a));
                den_a += l11(&a);
            }
            num_q += l11(&(bi * &est.q[j] * bi.transpose() - &truth.q[j]));
            den_q += l11(&truth.q[j]);
        }
        out.a = ratio(num_a, den_a);
        out.q = ratio(num_q, den_q);
    }

    // a shared C (or R) is counted once
    let c_regimes = if spec.kind == ModelKind::Obs { m } else { 1 };
    let (mut num_c, mut den_c) = (0.0, 0.0);
    let mut c_ok = true;
    for j in 0..c_regimes {
        match (projection(&est.c[j]), projection(&truth.c[j])) {
            (Some(ph), Some(pt)) => {
                num_c += l11(&(ph - &pt));
                den_c += l11(&pt);
            }
            _ => c_ok = false,
        }
    }
    if c_ok {
        out.c = ratio(num_c, den_c);
    }
    out.r = ratio(l11(&(&est.r[0] - &truth.r[0])), l11(&truth.r[0]));
    out.z = ratio(l11(&(&est.z - &truth.z)), l11(&truth.z));

    if let (Ok(se), Ok(st)) = (stationary_measures(est, spec, 0), stationary_measures(truth, spec, 0)) {
        let covs_hat: Vec<DMatrix<f64>> = se.regimes.into_iter().map(|g| g.cov).collect();
        let covs: Vec<DMatrix<f64>> = st.regimes.into_iter().map(|g| g.cov).collect();
        out.cov = covariance_error(&covs_hat, &covs);
    }
    out
}

/// Relative L1,1 error of regime covariances, aggregated across regimes.
pub fn covariance_error(est: &[DMatrix<f64>], truth: &[DMatrix<f64>]) -> Option<f64> {
    let num: f64 = est.iter().zip(truth).map(|(a, b)| l11(&(a - b))).sum();
    let den: f64 = truth.iter().map(l11).sum();
    ratio(num, den)
}

/// Matches `theta_hat` to the truth through its decoded regimes and scores it.
fn score_parametric(
    method: Method,
    theta_hat: &ThetaParams,
    s_hat: &RegimeSequence,
    truth: &ThetaParams,
    s_true: &RegimeSequence,
    spec: &ModelSpec,
) -> Result<MethodOutcome> {
    let (sigma, rate) = match_regimes_by_classification(s_hat, s_true, spec.m)?;
    let aligned = permute_regimes(theta_hat, &sigma)?;
    Ok(MethodOutcome {
        method,
        classification: Some(rate),
        errors: relative_errors(&aligned, truth, spec),
        failure: None,
    })
}

fn failed(method: Method, e: &Error) -> MethodOutcome {
    log::warn!("{} failed: {e}", method.name());
    MethodOutcome {
        method,
        classification: None,
        errors: RelativeErrors::default(),
        failure: Some(e.to_string()),
    }
}

/// Scores the requested estimators on a simulated data set.
pub fn evaluate_methods(
    y: &DMatrix<f64>,
    truth: &ThetaParams,
    s_true: &RegimeSequence,
    spec: &ModelSpec,
    opts: &StudyOptions,
    seed: u64,
) -> Vec<MethodOutcome> {
    let init_opts = InitOptions {
        seed,
        ..Default::default()
    };
    let wanted = |m: Method| opts.methods.contains(&m);
    let mut out = Vec::new();

    if wanted(Method::SwKm) {
        let run = || -> Result<MethodOutcome> {
            let (s_hat, covs) = sliding_window_km(y, spec.m, opts.window, 1, seed)?;
            let (sigma, rate) = match_regimes_by_classification(&s_hat, s_true, spec.m)?;
            let mut aligned = covs.clone();
            for (j, c) in covs.into_iter().enumerate() {
                aligned[sigma[j]] = c;
            }
            let truth_covs: Vec<DMatrix<f64>> =
                stationary_measures(truth, spec, 0)?.regimes.into_iter().map(|g| g.cov).collect();
            Ok(MethodOutcome {
                method: Method::SwKm,
                classification: Some(rate),
                errors: RelativeErrors {
                    cov: covariance_error(&aligned, &truth_covs),
                    ..Default::default()
                },
                failure: None,
            })
        };
        out.push(run().unwrap_or_else(|e| failed(Method::SwKm, &e)));
    }

    if wanted(Method::SsmOls) || wanted(Method::SsmMl) {
        match initialize(y, spec, &init_opts) {
            Ok(init) => {
                if wanted(Method::SsmOls) {
                    let run = || -> Result<MethodOutcome> {
                        let s_hat = decode_regimes(&kim_smoother(y, &init.theta, spec)?);
                        score_parametric(Method::SsmOls, &init.theta, &s_hat, truth, s_true, spec)
                    };
                    out.push(run().unwrap_or_else(|e| failed(Method::SsmOls, &e)));
                }
                if wanted(Method::SsmMl) {
                    let run = || -> Result<MethodOutcome> {
                        let fit = em_fit(y, spec, &init.theta, &opts.fit)?;
                        score_parametric(Method::SsmMl, &fit.theta, &fit.s_hat, truth, s_true, spec)
                    };
                    out.push(run().unwrap_or_else(|e| failed(Method::SsmMl, &e)));
                }
            }
            Err(e) => {
                for m in [Method::SsmOls, Method::SsmMl] {
                    if wanted(m) {
                        out.push(failed(m, &e));
                    }
                }
            }
        }
    }

    if wanted(Method::OrOls) || wanted(Method::OrMl) {
        let oracle_opts = InitOptions {
            segmentation: Segmentation::Known(s_true.labels.clone()),
            seed,
        };
        match initialize(y, spec, &oracle_opts) {
            Ok(init) => {
                if wanted(Method::OrOls) {
                    out.push(
                        score_parametric(Method::OrOls, &init.theta, s_true, truth, s_true, spec)
                            .unwrap_or_else(|e| failed(Method::OrOls, &e)),
                    );
                }
                if wanted(Method::OrMl) {
                    let run = || -> Result<MethodOutcome> {
                        let fit = fixed_regime_em(y, spec, s_true, &init.theta, opts.fit.max_iter, opts.fit.tol_rel)?;
                        score_parametric(Method::OrMl, &fit.theta, s_true, truth, s_true, spec)
                    };
                    out.push(run().unwrap_or_else(|e| failed(Method::OrMl, &e)));
                }
            }
            Err(e) => {
                for m in [Method::OrOls, Method::OrMl] {
                    if wanted(m) {
                        out.push(failed(m, &e));
                    }
                }
            }
        }
    }
    out
}

/// One study replication: parameters from stream 0 of `seed`, data from
/// stream 1, then every requested estimator.
pub fn run_replication(spec: &ModelSpec, t_len: usize, seed: u64, opts: &StudyOptions) -> Result<Replication> {
    let truth = make_study_theta(spec, &mut rng_for(seed, 0))?;
    let sim = simulate_model(&truth, spec, t_len, &mut rng_for(seed, 1))?;
    let outcomes = evaluate_methods(&sim.y, &truth, &sim.s, spec, opts, seed);
    Ok(Replication {
        seed,
        truth,
        s_true: sim.s,
        outcomes,
    })
}

/// Mean of the successful classification rates of `method`.
pub fn mean_classification(reps: &[Replication], method: Method) -> Option<f64> {
    let v: Vec<f64> = reps
        .iter()
        .filter_map(|r| r.outcome(method).and_then(|o| o.classification))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

//! Model specification, parameter container and label permutations.
//!
//! Three instances of the switching linear state-space model are supported:
//!
//! ```text
//! Dyn:  y_t = C x_t + w_t,          x_t = sum_l A_{l,S_t} x_{t-l} + v_t
//! Var:  y_t = sum_l A_{l,S_t} y_{t-l} + v_t
//! Obs:  y_t = C_{S_t} x_{t,S_t} + w_t,  x_{t,j} = sum_l A_{l,j} x_{t-l,j} + v_{t,j}
//! ```
//!
//! with `w_t ~ N(0, R)`, `v_t ~ N(0, Q_{S_t})` and `S_t` a Markov chain with
//! initial probabilities `pi` and transition matrix `Z`. Regime labels are
//! zero-based in memory and one-based in files and messages.

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{min_eigenvalue, symmetrize};
use crate::numerics::{companion, spectral_radius};

const SYM_TOL: f64 = 1e-10;
const PROB_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    /// Switching dynamics: common observation matrix, switching state VAR.
    Dyn,
    /// Switching VAR directly on the observations.
    Var,
    /// Switching observations: one VAR state process per regime.
    Obs,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dyn => "dyn",
            ModelKind::Var => "var",
            ModelKind::Obs => "obs",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dyn" => Ok(ModelKind::Dyn),
            "var" => Ok(ModelKind::Var),
            "obs" => Ok(ModelKind::Obs),
            other => Err(Error::InvalidSpec(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Pinned coefficients of a matrix parameter: `values[(i,j)]` is imposed
/// wherever `mask[(i,j)]` is true.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedCoefficients {
    pub mask: DMatrix<bool>,
    pub values: DMatrix<f64>,
}

impl FixedCoefficients {
    pub fn new(mask: DMatrix<bool>, values: DMatrix<f64>) -> Result<Self> {
        if mask.shape() != values.shape() {
            return Err(Error::InvalidSpec(format!(
                "fixed-coefficient mask {:?} and values {:?} differ in shape",
                mask.shape(),
                values.shape()
            )));
        }
        for (m, v) in mask.iter().zip(values.iter()) {
            if *m && !v.is_finite() {
                return Err(Error::InvalidSpec("pinned value is not finite".into()));
            }
        }
        Ok(Self { mask, values })
    }

    pub fn n_fixed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// Overwrites pinned entries of `x`.
    pub fn impose(&self, x: &mut DMatrix<f64>) {
        for (k, m) in self.mask.iter().enumerate() {
            if *m {
                x[k] = self.values[k];
            }
        }
    }
}

/// Parameters tied across regimes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EqualityConstraints {
    pub a: bool,
    pub c: bool,
    pub q: bool,
    pub sigma: bool,
    pub mu: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConstraintSet {
    /// Pinned entries of the `r x pr` lag block row `[A_1 ... A_p]`, shared by all regimes.
    pub fixed_a: Option<FixedCoefficients>,
    /// Pinned entries of the `N x r` observation matrix.
    pub fixed_c: Option<FixedCoefficients>,
    pub diag_q: bool,
    pub diag_r: bool,
    pub diag_sigma: bool,
    /// Target Euclidean norm of each column of C.
    pub scale_c: Option<Vec<f64>>,
    pub equal: EqualityConstraints,
    /// Stability margin: when set, every companion matrix keeps spectral
    /// radius at most `1 - eps`.
    pub stable_a: Option<f64>,
}

impl ConstraintSet {
    pub fn stable(eps: f64) -> Self {
        Self {
            stable_a: Some(eps),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Number of regimes.
    pub m: usize,
    /// Autoregressive order.
    pub p: usize,
    /// State dimension (equal to `n` for the VAR kind).
    pub r: usize,
    /// Observation dimension.
    pub n: usize,
    pub constraints: ConstraintSet,
}

impl ModelSpec {
    pub fn new(kind: ModelKind, m: usize, p: usize, r: usize, n: usize) -> Result<Self> {
        let r = if kind == ModelKind::Var { n } else { r };
        let spec = Self {
            kind,
            m,
            p,
            r,
            n,
            constraints: ConstraintSet::default(),
        };
        spec.check()?;
        Ok(spec)
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Result<Self> {
        self.constraints = constraints;
        self.check()?;
        Ok(self)
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.m < 1 || self.p < 1 || self.r < 1 || self.n < 1 {
            return bad(format!(
                "need M, p, r, N >= 1 (got M={}, p={}, r={}, N={})",
                self.m, self.p, self.r, self.n
            ));
        }
        if self.r > self.n {
            return bad(format!("r = {} exceeds N = {}", self.r, self.n));
        }
        if self.kind == ModelKind::Var && self.r != self.n {
            return bad("VAR kind requires r = N".into());
        }
        let c = &self.constraints;
        if let Some(eps) = c.stable_a {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(format!("stability margin {eps} not in (0,1)"));
            }
        }
        if let Some(f) = &c.fixed_a {
            if f.mask.shape() != (self.r, self.p * self.r) {
                return bad(format!(
                    "fixed_a mask shape {:?}, expected ({}, {})",
                    f.mask.shape(),
                    self.r,
                    self.p * self.r
                ));
            }
        }
        if let Some(f) = &c.fixed_c {
            if f.mask.shape() != (self.n, self.r) {
                return bad(format!(
                    "fixed_c mask shape {:?}, expected ({}, {})",
                    f.mask.shape(),
                    self.n,
                    self.r
                ));
            }
        }
        if let Some(s) = &c.scale_c {
            if s.len() != self.r || s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return bad("scale_c needs r positive finite targets".into());
            }
        }
        if self.kind == ModelKind::Var && (c.fixed_c.is_some() || c.scale_c.is_some()) {
            return bad("VAR kind has no free observation matrix".into());
        }
        Ok(())
    }

    /// Dimension of the companion-form state of one process (`p r`).
    pub fn companion_dim(&self) -> usize {
        self.p * self.r
    }

    /// Dimension of the full filter state (`M p r` for Obs, `p r` otherwise).
    pub fn state_dim(&self) -> usize {
        match self.kind {
            ModelKind::Obs => self.m * self.p * self.r,
            _ => self.p * self.r,
        }
    }

    /// Whether C and R are shared across regimes by the model structure or
    /// by constraint.
    pub fn shared_c(&self) -> bool {
        self.kind == ModelKind::Dyn || self.constraints.equal.c
    }
}

/// Full parameter set in companion form.
///
/// `a[j]` is the `pr x pr` companion matrix of regime `j`; its top block row
/// holds the lag matrices `[A_{1j} ... A_{pj}]` and the rest is the fixed
/// shift structure. `c` and `r` are regime-indexed even when shared.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    pub a: Vec<DMatrix<f64>>,
    pub c: Vec<DMatrix<f64>>,
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
    pub pi: DVector<f64>,
    pub z: DMatrix<f64>,
}

impl ThetaParams {
    /// Builds parameters from lag blocks `lags[j][l]` (each `r x r`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_lags(
        lags: &[Vec<DMatrix<f64>>],
        c: Vec<DMatrix<f64>>,
        q: Vec<DMatrix<f64>>,
        r: Vec<DMatrix<f64>>,
        mu: Vec<DVector<f64>>,
        sigma: Vec<DMatrix<f64>>,
        pi: DVector<f64>,
        z: DMatrix<f64>,
    ) -> Self {
        let a = lags.iter().map(|l| companion(l)).collect();
        Self {
            a,
            c,
            q,
            r,
            mu,
            sigma,
            pi,
            z,
        }
    }

    pub fn n_regimes(&self) -> usize {
        self.pi.len()
    }

    pub fn state_size(&self) -> usize {
        self.q[0].nrows()
    }

    pub fn order(&self) -> usize {
        self.a[0].nrows() / self.state_size().max(1)
    }

    /// Top block row `[A_{1j} ... A_{pj}]` (`r x pr`).
    pub fn lag_row(&self, j: usize) -> DMatrix<f64> {
        let r = self.state_size();
        self.a[j].rows(0, r).into_owned()
    }

    /// Lag matrix `A_{l j}` for `l` in `1..=p`.
    pub fn lag(&self, j: usize, l: usize) -> DMatrix<f64> {
        let r = self.state_size();
        self.a[j].view((0, (l - 1) * r), (r, r)).into_owned()
    }

    pub fn lags(&self, j: usize) -> Vec<DMatrix<f64>> {
        (1..=self.order()).map(|l| self.lag(j, l)).collect()
    }

    pub fn set_lag_row(&mut self, j: usize, row: &DMatrix<f64>) {
        let r = self.state_size();
        self.a[j].rows_mut(0, r).copy_from(row);
    }

    /// `pr x pr` innovation covariance with `Q_j` in the top-left block.
    pub fn q_companion(&self, j: usize) -> DMatrix<f64> {
        let d = self.a[j].nrows();
        let r = self.state_size();
        let mut out = DMatrix::zeros(d, d);
        out.view_mut((0, 0), (r, r)).copy_from(&self.q[j]);
        out
    }

    pub fn spectral_radii(&self) -> Result<Vec<f64>> {
        self.a.iter().map(spectral_radius).collect()
    }

    /// Replaces every covariance by its symmetric part.
    pub fn symmetrize_covariances(&mut self) {
        for x in self
            .q
            .iter_mut()
            .chain(self.r.iter_mut())
            .chain(self.sigma.iter_mut())
        {
            *x = symmetrize(x);
        }
    }
}

/// Hidden regime path, labels in `0..M`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegimeSequence {
    pub labels: Vec<usize>,
}

impl RegimeSequence {
    pub fn new(labels: Vec<usize>, m: usize) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|l| **l >= m) {
            return Err(Error::InvalidInput(format!(
                "regime label {} outside 1..{}",
                bad + 1,
                m
            )));
        }
        Ok(Self { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of time spent in each regime.
    pub fn frequencies(&self, m: usize) -> Vec<f64> {
        let mut f = vec![0.0; m];
        for &l in &self.labels {
            f[l] += 1.0;
        }
        let t = self.labels.len().max(1) as f64;
        f.iter_mut().for_each(|v| *v /= t);
        f
    }
}

/// One failed parameter invariant.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub param: String,
    pub index: Vec<usize>,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.rule)
    }
}

fn fmt_num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Checks every parameter invariant and returns the list of violations
/// (empty when the parameters are well formed).
pub fn validate(theta: &ThetaParams, spec: &ModelSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |param: &str, index: Vec<usize>, rule: String| {
        out.push(Violation {
            param: param.to_string(),
            index,
            rule,
        })
    };
    let (m, r, n, d) = (spec.m, spec.r, spec.n, spec.companion_dim());

    let counts = [
        ("A", theta.a.len()),
        ("C", theta.c.len()),
        ("Q", theta.q.len()),
        ("R", theta.r.len()),
        ("mu", theta.mu.len()),
        ("Sigma", theta.sigma.len()),
    ];
    let mut shapes_ok = true;
    for (name, len) in counts {
        if len != m {
            push(name, vec![], format!("{name} has {len} regimes, expected {m}"));
            shapes_ok = false;
        }
    }
    if theta.pi.len() != m {
        push("pi", vec![], format!("pi has length {}, expected {m}", theta.pi.len()));
        shapes_ok = false;
    }
    if theta.z.shape() != (m, m) {
        push("Z", vec![], format!("Z has shape {:?}, expected ({m}, {m})", theta.z.shape()));
        shapes_ok = false;
    }
    if !shapes_ok {
        return out;
    }

    for j in 0..m {
        let shape_checks = [
            ("A", theta.a[j].shape(), (d, d)),
            ("C", theta.c[j].shape(), (n, r)),
            ("Q", theta.q[j].shape(), (r, r)),
            ("R", theta.r[j].shape(), (n, n)),
            ("Sigma", theta.sigma[j].shape(), (d, d)),
            ("mu", (theta.mu[j].len(), 1), (d, 1)),
        ];
        let mut regime_ok = true;
        for (name, got, want) in shape_checks {
            if got != want {
                push(
                    name,
                    vec![j],
                    format!("{name}_{} has shape {got:?}, expected {want:?}", j + 1),
                );
                regime_ok = false;
            }
        }
        if !regime_ok {
            continue;
        }

        let all_finite = theta.a[j].iter().all(|v| v.is_finite())
            && theta.c[j].iter().all(|v| v.is_finite())
            && theta.q[j].iter().all(|v| v.is_finite())
            && theta.r[j].iter().all(|v| v.is_finite())
            && theta.sigma[j].iter().all(|v| v.is_finite())
            && theta.mu[j].iter().all(|v| v.is_finite());
        if !all_finite {
            push("theta", vec![j], format!("regime {} has non-finite entries", j + 1));
            continue;
        }

        // companion shift structure
        for row in r..d {
            for col in 0..d {
                let want = if col + r == row { 1.0 } else { 0.0 };
                if theta.a[j][(row, col)] != want {
                    push(
                        "A",
                        vec![j, row, col],
                        format!(
                            "A_{} companion entry ({},{}) must be {want}",
                            j + 1,
                            row + 1,
                            col + 1
                        ),
                    );
                }
            }
        }

        for (name, x) in [
            ("Q", &theta.q[j]),
            ("R", &theta.r[j]),
            ("Sigma", &theta.sigma[j]),
        ] {
            let scale = 1.0 + x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            let asym = (x - x.transpose()).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if asym > SYM_TOL * scale {
                push(name, vec![j], format!("{name}_{} is not symmetric", j + 1));
            }
            let lam = min_eigenvalue(x);
            if lam < -SYM_TOL * scale {
                push(
                    name,
                    vec![j],
                    format!(
                        "{name}_{} is not PSD (min eigenvalue {})",
                        j + 1,
                        fmt_num(lam)
                    ),
                );
            }
        }

        if spec.kind == ModelKind::Var {
            if theta.c[j] != DMatrix::identity(n, n) {
                push("C", vec![j], format!("C_{} must be the identity for VAR", j + 1));
            }
            if theta.r[j].iter().any(|v| *v != 0.0) {
                push("R", vec![j], format!("R_{} must be zero for VAR", j + 1));
            }
        }

        if let Some(eps) = spec.constraints.stable_a {
            match spectral_radius(&theta.a[j]) {
                Ok(rho) if rho < 1.0 => {}
                Ok(rho) => push(
                    "A",
                    vec![j],
                    format!(
                        "A_{} companion spectral radius {} >= 1 (margin {})",
                        j + 1,
                        fmt_num(rho),
                        fmt_num(eps)
                    ),
                ),
                Err(e) => push("A", vec![j], format!("A_{}: {e}", j + 1)),
            }
        }
    }

    let prob_ok = |v: f64| (-PROB_TOL..=1.0 + PROB_TOL).contains(&v);
    for (i, v) in theta.pi.iter().enumerate() {
        if !prob_ok(*v) {
            push("pi", vec![i], format!("pi entry {} = {} outside [0,1]", i + 1, fmt_num(*v)));
        }
    }
    let s = theta.pi.sum();
    if (s - 1.0).abs() > PROB_TOL {
        push("pi", vec![], format!("pi sums to {}", fmt_num(s)));
    }
    for i in 0..m {
        let row = theta.z.row(i);
        for (k, v) in row.iter().enumerate() {
            if !prob_ok(*v) {
                push(
                    "Z",
                    vec![i, k],
                    format!("Z entry ({},{}) = {} outside [0,1]", i + 1, k + 1, fmt_num(*v)),
                );
            }
        }
        let s = row.sum();
        if (s - 1.0).abs() > PROB_TOL {
            push("Z", vec![i], format!("Z row {} sums to {}", i + 1, fmt_num(s)));
        }
    }
    out
}

/// Checks that `sigma` is a bijection of `0..m`.
pub fn check_permutation(sigma: &[usize], m: usize) -> Result<()> {
    if sigma.len() != m {
        return Err(Error::NotAPermutation(m));
    }
    let mut seen = vec![false; m];
    for &s in sigma {
        if s >= m || seen[s] {
            return Err(Error::NotAPermutation(m));
        }
        seen[s] = true;
    }
    Ok(())
}

/// Relabels regimes: old regime `j` becomes regime `sigma[j]`.
///
/// The transition matrix is permuted on both axes, so
/// `Z'(sigma(i), sigma(k)) = Z(i, k)`.
pub fn permute_regimes(theta: &ThetaParams, sigma: &[usize]) -> Result<ThetaParams> {
    let m = theta.n_regimes();
    check_permutation(sigma, m)?;
    let mut out = theta.clone();
    for j in 0..m {
        let k = sigma[j];
        out.a[k] = theta.a[j].clone();
        out.c[k] = theta.c[j].clone();
        out.q[k] = theta.q[j].clone();
        out.r[k] = theta.r[j].clone();
        out.mu[k] = theta.mu[j].clone();
        out.sigma[k] = theta.sigma[j].clone();
        out.pi[k] = theta.pi[j];
        for i in 0..m {
            out.z[(sigma[i], k)] = theta.z[(i, j)];
        }
    }
    Ok(out)
}

pub fn invert_permutation(sigma: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; sigma.len()];
    for (i, &s) in sigma.iter().enumerate() {
        inv[s] = i;
    }
    inv
}

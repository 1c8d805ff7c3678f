//! Sampling regime paths, latent states and observations, plus the
//! parameter generators of the simulation study.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::trace;
use crate::model::{ModelKind, ModelSpec, RegimeSequence, ThetaParams};
use crate::numerics::{companion, spectral_radius, stationary_cov_companion, CompanionSystem};

pub type SimRng = ChaCha8Rng;

/// Rejection-sampling cap for the study generators.
pub const MAX_DRAWS: usize = 1000;

/// Deterministic generator for `(seed, stream)`. Different streams of the
/// same seed are independent.
pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimOutput {
    /// Observations, `N x T`.
    pub y: DMatrix<f64>,
    /// Latent state paths, each `r x T` (one per regime for the Obs kind).
    pub x: Vec<DMatrix<f64>>,
    pub s: RegimeSequence,
    pub seed: Option<u64>,
}

fn check_probabilities(pi: &DVector<f64>, z: &DMatrix<f64>) -> Result<()> {
    let m = pi.len();
    let ok = |v: &f64| v.is_finite() && *v >= -1e-12 && *v <= 1.0 + 1e-12;
    if z.shape() != (m, m) {
        return Err(Error::InvalidInput("Z must be M x M".into()));
    }
    if !pi.iter().all(ok) || (pi.sum() - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput("pi is not a probability vector".into()));
    }
    for i in 0..m {
        if !z.row(i).iter().all(ok) || (z.row(i).sum() - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput(format!("Z row {} is not a probability vector", i + 1)));
        }
    }
    Ok(())
}

fn draw_categorical<R: Rng + ?Sized>(probs: impl Iterator<Item = f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (k, p) in probs.enumerate() {
        if p > 0.0 {
            last_positive = k;
        }
        acc += p;
        if u < acc {
            return k;
        }
    }
    last_positive
}

/// Samples a Markov chain path of length `t`.
pub fn simulate_chain<R: Rng + ?Sized>(
    pi: &DVector<f64>,
    z: &DMatrix<f64>,
    t: usize,
    rng: &mut R,
) -> Result<RegimeSequence> {
    check_probabilities(pi, z)?;
    let mut labels = Vec::with_capacity(t);
    if t == 0 {
        return Ok(RegimeSequence { labels });
    }
    let mut s = draw_categorical(pi.iter().cloned(), rng);
    labels.push(s);
    for _ in 1..t {
        s = draw_categorical(z.row(s).iter().cloned(), rng);
        labels.push(s);
    }
    Ok(RegimeSequence { labels })
}

/// Square root `L` of a PSD matrix with `L L' = cov`.
pub(crate) fn psd_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if cov.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(cov.nrows(), cov.ncols());
    }
    if let Some(c) = cov.clone().cholesky() {
        return c.l();
    }
    let eig = SymmetricEigen::new(crate::linalg::symmetrize(cov));
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d)
}

fn std_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn check_stable(theta: &ThetaParams, spec: &ModelSpec) -> Result<()> {
    if spec.constraints.stable_a.is_some() {
        for (j, a) in theta.a.iter().enumerate() {
            let rho = spectral_radius(a)?;
            if rho >= 1.0 {
                return Err(Error::NotStationary { regime: j, radius: rho });
            }
        }
    }
    Ok(())
}

/// Samples a regime path, the latent states and the observations.
pub fn simulate_model<R: Rng + ?Sized>(
    theta: &ThetaParams,
    spec: &ModelSpec,
    t: usize,
    rng: &mut R,
) -> Result<SimOutput> {
    if t == 0 {
        return Err(Error::InvalidInput("series length must be positive".into()));
    }
    check_stable(theta, spec)?;
    let s = simulate_chain(&theta.pi, &theta.z, t, rng)?;
    simulate_given_regimes(theta, spec, s, rng)
}

/// Samples states and observations along a given regime path.
pub fn simulate_given_regimes<R: Rng + ?Sized>(
    theta: &ThetaParams,
    spec: &ModelSpec,
    s: RegimeSequence,
    rng: &mut R,
) -> Result<SimOutput> {
    let t = s.len();
    let (m, r, n) = (spec.m, spec.r, spec.n);
    let q_sqrt: Vec<_> = theta.q.iter().map(psd_sqrt).collect();
    let r_sqrt: Vec<_> = theta.r.iter().map(psd_sqrt).collect();
    let sigma_sqrt: Vec<_> = theta.sigma.iter().map(psd_sqrt).collect();
    let n_proc = if spec.kind == ModelKind::Obs { m } else { 1 };
    let mut x: Vec<DMatrix<f64>> = vec![DMatrix::zeros(r, t); n_proc];
    let mut y = DMatrix::zeros(n, t);

    // companion-form state of each process
    let mut state: Vec<DVector<f64>> = Vec::with_capacity(n_proc);
    for k in 0..n_proc {
        let j = if n_proc == 1 { s.labels[0] } else { k };
        let e = std_normal_vec(theta.mu[j].len(), rng);
        state.push(&theta.mu[j] + &sigma_sqrt[j] * e);
    }
    for tt in 0..t {
        let st = s.labels[tt];
        if tt > 0 {
            for (k, xs) in state.iter_mut().enumerate() {
                let j = if n_proc == 1 { st } else { k };
                let v = &q_sqrt[j] * std_normal_vec(r, rng);
                let mut next = &theta.a[j] * &*xs;
                let mut top = next.rows_mut(0, r);
                top += v;
                *xs = next;
            }
        }
        for (k, xs) in state.iter().enumerate() {
            x[k].column_mut(tt).copy_from(&xs.rows(0, r));
        }
        let observed = if n_proc == 1 { 0 } else { st };
        match spec.kind {
            ModelKind::Var => {
                y.column_mut(tt).copy_from(&state[0].rows(0, r));
            }
            _ => {
                let w = &r_sqrt[st] * std_normal_vec(n, rng);
                let obs = &theta.c[st] * state[observed].rows(0, r) + w;
                y.column_mut(tt).copy_from(&obs);
            }
        }
    }
    Ok(SimOutput { y, x, s, seed: None })
}

/// Wishart draw with `df` degrees of freedom and scale matrix `scale`
/// (Bartlett decomposition).
pub fn sample_wishart<R: Rng + ?Sized>(df: usize, scale: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
    let p = scale.nrows();
    let l = psd_sqrt(scale);
    let mut a = DMatrix::zeros(p, p);
    for i in 0..p {
        let k = (df - i) as f64;
        let chi = ChiSquared::new(k).expect("positive degrees of freedom");
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    crate::linalg::symmetrize(&(&la * la.transpose()))
}

/// `N x r` matrix with orthonormal columns: the left singular vectors of a
/// standard normal matrix.
pub fn random_orthonormal<R: Rng + ?Sized>(n: usize, r: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(rng));
    let svd = g.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    // singular values come sorted; keep the first r columns
    u.columns(0, r).into_owned()
}

fn study_z(m: usize) -> (DVector<f64>, DMatrix<f64>) {
    let mut pi = DVector::zeros(m);
    pi[0] = 1.0;
    let z = if m == 1 {
        DMatrix::identity(1, 1)
    } else {
        DMatrix::from_fn(m, m, |i, j| if i == j { 0.98 } else { 0.02 / (m as f64 - 1.0) })
    };
    (pi, z)
}

fn lag_draw<R: Rng + ?Sized>(r: usize, p: usize, rng: &mut R) -> Vec<DMatrix<f64>> {
    (0..p)
        .map(|l| match l {
            0 => DMatrix::from_fn(r, r, |_, _| rng.random_range(0.0..0.7)),
            1 => DMatrix::from_fn(r, r, |_, _| rng.random_range(0.0..0.3)),
            _ => DMatrix::zeros(r, r),
        })
        .collect()
}

/// Signal-to-noise ratio `tr V(C x) / tr R` of regime `j` at stationarity.
pub fn signal_to_noise(theta: &ThetaParams, j: usize) -> Result<f64> {
    let r = theta.state_size();
    let sys = CompanionSystem::from_companion(theta.a[j].clone(), &theta.q[j]);
    let s = stationary_cov_companion(&sys)?;
    let sx = s.view((0, 0), (r, r));
    let signal = trace(&(&theta.c[j] * sx * theta.c[j].transpose()));
    Ok(signal / trace(&theta.r[j]))
}

/// Draws a parameter set following the simulation-study recipe.
pub fn make_study_theta<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ThetaParams> {
    let (m, p, r, n) = (spec.m, spec.p, spec.r, spec.n);
    let d = p * r;
    let (pi, z) = study_z(m);
    let mu = vec![DVector::zeros(d); m];
    let sigma = vec![DMatrix::identity(d, d) * 0.1; m];

    if spec.kind == ModelKind::Var {
        let mut lags = Vec::with_capacity(m);
        let mut q = Vec::with_capacity(m);
        for _ in 0..m {
            let mut drawn = None;
            for _ in 0..MAX_DRAWS {
                let l: Vec<DMatrix<f64>> = (0..p)
                    .map(|l| match l {
                        0 => DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.85..0.95))),
                        1 => DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(-0.05..0.05))),
                        _ => DMatrix::zeros(n, n),
                    })
                    .collect();
                if spectral_radius(&companion(&l))? < 1.0 {
                    drawn = Some(l);
                    break;
                }
            }
            lags.push(drawn.ok_or(Error::SamplingExhausted {
                attempts: MAX_DRAWS,
                what: "stable VAR lags".into(),
            })?);
            q.push(sample_wishart(n, &(DMatrix::identity(n, n) * (0.01 / n as f64)), rng));
        }
        return Ok(ThetaParams::from_lags(
            &lags,
            vec![DMatrix::identity(n, n); m],
            q,
            vec![DMatrix::zeros(n, n); m],
            mu,
            sigma,
            pi,
            z,
        ));
    }

    let sigma_r = 0.005 / n as f64;
    let rho = 0.1;
    let r_mat = DMatrix::from_fn(n, n, |i, j| if i == j { sigma_r } else { rho * sigma_r });
    let q_scale = DMatrix::identity(r, r) * 0.005;

    for _ in 0..MAX_DRAWS {
        let c: Vec<DMatrix<f64>> = match spec.kind {
            ModelKind::Obs => (0..m).map(|_| random_orthonormal(n, r, rng)).collect(),
            _ => vec![random_orthonormal(n, r, rng); m],
        };
        let mut lags = Vec::with_capacity(m);
        let mut q = Vec::with_capacity(m);
        for _ in 0..m {
            let mut drawn = None;
            for _ in 0..MAX_DRAWS {
                let l = lag_draw(r, p, rng);
                if spectral_radius(&companion(&l))? < 1.0 {
                    drawn = Some(l);
                    break;
                }
            }
            lags.push(drawn.ok_or(Error::SamplingExhausted {
                attempts: MAX_DRAWS,
                what: "stable state lags".into(),
            })?);
            q.push(sample_wishart(r, &q_scale, rng));
        }
        let theta = ThetaParams::from_lags(
            &lags,
            c,
            q,
            vec![r_mat.clone(); m],
            mu.clone(),
            sigma.clone(),
            pi.clone(),
            z.clone(),
        );
        let mut ok = true;
        for j in 0..m {
            let snr = signal_to_noise(&theta, j)?;
            if !(5.0..=10.0).contains(&snr) {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(theta);
        }
    }
    Err(Error::SamplingExhausted {
        attempts: MAX_DRAWS,
        what: "signal-to-noise ratio in [5, 10]".into(),
    })
}

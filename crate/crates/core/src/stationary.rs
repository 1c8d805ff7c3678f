//! Regime-wise stationary covariance, correlation, autocorrelation and
//! partial correlation of the observations, and distances between the
//! resulting connectivity features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, symmetrize};
use crate::model::{ModelKind, ModelSpec, ThetaParams};
use crate::numerics::{cross_lag_cov, stationary_cov_companion, CompanionSystem};

/// Default number of autocorrelation lags.
pub const DEFAULT_MAX_LAG: usize = 5;

/// Stationary measures of one regime.
#[derive(Clone, Debug, PartialEq)]
pub struct RegimeMeasures {
    pub cov: DMatrix<f64>,
    pub corr: DMatrix<f64>,
    /// `acf[(k, l - 1)]` is the lag-`l` autocorrelation of channel `k`.
    pub acf: DMatrix<f64>,
    pub pcorr: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationaryMeasures {
    pub regimes: Vec<RegimeMeasures>,
}

fn normalize_by_diagonal(x: &DMatrix<f64>, diag: &DVector<f64>) -> DMatrix<f64> {
    let s = diag.map(|v| if v > 0.0 { v.sqrt().recip() } else { 0.0 });
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, k| (x[(i, k)] * s[i] * s[k]).clamp(-1.0, 1.0))
}

/// Partial correlations `-P_ik / sqrt(P_ii P_kk)` from the precision
/// matrix `P`, with unit diagonal.
pub fn partial_correlation(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let prec = spd_inverse(cov, 1e-12).ok_or_else(|| Error::SingularMoment("stationary covariance is singular".into()))?;
    let mut out = normalize_by_diagonal(&prec, &prec.diagonal()).map(|v| -v);
    out.fill_diagonal(1.0);
    Ok(out)
}

/// Stationary measures of every regime. The observation covariance is
/// `C_j S_j C_j' + R` where `S_j` solves `S = A_j S A_j' + Q_j`; the noise
/// `R` enters the lag-0 moments only.
pub fn stationary_measures(theta: &ThetaParams, spec: &ModelSpec, max_lag: usize) -> Result<StationaryMeasures> {
    let r = spec.r;
    let regimes = (0..spec.m)
        .map(|j| {
            let sys = CompanionSystem::from_companion(theta.a[j].clone(), &theta.q[j]);
            let sx = stationary_cov_companion(&sys).map_err(|e| match e {
                Error::NotStationary { radius, .. } => Error::NotStationary { regime: j, radius },
                other => other,
            })?;
            let lagged = cross_lag_cov(&sys, &sx, max_lag);
            let c = &theta.c[j];
            let observe = |s: &DMatrix<f64>| c * s.view((0, 0), (r, r)) * c.transpose();
            let mut cov = observe(&lagged[0]);
            if spec.kind != ModelKind::Var {
                cov += &theta.r[j];
            }
            let cov = symmetrize(&cov);
            let var = cov.diagonal();
            let corr = normalize_by_diagonal(&cov, &var);
            let mut acf = DMatrix::zeros(spec.n, max_lag);
            for l in 1..=max_lag {
                let cl = observe(&lagged[l]).diagonal();
                for k in 0..spec.n {
                    acf[(k, l - 1)] = if var[k] > 0.0 { (cl[k] / var[k]).clamp(-1.0, 1.0) } else { 0.0 };
                }
            }
            let pcorr = partial_correlation(&cov)?;
            Ok(RegimeMeasures { cov, corr, acf, pcorr })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StationaryMeasures { regimes })
}

/// Long-run regime frequencies of the chain: the solution of `w' Z = w'`
/// with `sum w = 1`. Reducible chains have several solutions; the one
/// returned solves the least-squares system and is clipped at zero.
pub fn regime_frequencies(z: &DMatrix<f64>) -> Result<DVector<f64>> {
    let m = z.nrows();
    if z.ncols() != m {
        return Err(Error::NotSquare { rows: m, cols: z.ncols() });
    }
    // stack (Z' - I) with a row of ones
    let mut a = DMatrix::zeros(m + 1, m);
    a.view_mut((0, 0), (m, m)).copy_from(&(z.transpose() - DMatrix::identity(m, m)));
    a.row_mut(m).fill(1.0);
    let mut b = DVector::zeros(m + 1);
    b[m] = 1.0;
    let w = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::InvalidInput(format!("no stationary distribution: {e}")))?;
    let w = w.map(|v| v.max(0.0));
    let total = w.sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("no stationary distribution".into()));
    }
    Ok(w / total)
}

/// Lower triangle (with diagonal) of a covariance, column by column,
/// scaled to unit Euclidean norm.
pub fn fc_feature(cov: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = cov.nrows();
    let mut v = Vec::with_capacity(n * (n + 1) / 2);
    for k in 0..n {
        for i in k..n {
            v.push(cov[(i, k)]);
        }
    }
    let v = DVector::from_vec(v);
    let norm = v.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidInput("cannot normalize a zero covariance".into()));
    }
    Ok(v / norm)
}

fn check_features(feats: &[DVector<f64>], weights: &[f64]) -> Result<()> {
    if feats.is_empty() {
        return Err(Error::InvalidInput("empty feature set".into()));
    }
    if feats.len() != weights.len() {
        return Err(Error::InvalidInput("features and weights differ in length".into()));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-8 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::InvalidInput("weights must be nonnegative and sum to 1".into()));
    }
    Ok(())
}

/// Weighted average distance between two sets of regime features: each
/// feature is compared with its nearest neighbour in the other set.
pub fn weighted_fc_distance(
    a: &[DVector<f64>],
    wa: &[f64],
    b: &[DVector<f64>],
    wb: &[f64],
) -> Result<f64> {
    check_features(a, wa)?;
    check_features(b, wb)?;
    let nearest = |x: &DVector<f64>, set: &[DVector<f64>]| {
        set.iter().map(|y| (x - y).norm_squared()).fold(f64::INFINITY, f64::min)
    };
    let ab: f64 = a.iter().zip(wa).map(|(x, w)| w * nearest(x, b)).sum();
    let ba: f64 = b.iter().zip(wb).map(|(x, w)| w * nearest(x, a)).sum();
    Ok(0.5 * (ab + ba))
}

/// Weighted spread of one feature set,
/// `(1 - sum w_i^2)^{-1} sum_{i,j} w_i w_j |a_i - a_j|^2`.
pub fn weighted_fc_variance(feats: &[DVector<f64>], weights: &[f64]) -> Result<f64> {
    check_features(feats, weights)?;
    let denom = 1.0 - weights.iter().map(|w| w * w).sum::<f64>();
    if denom <= 1e-12 {
        return Err(Error::InvalidInput("weighted variance undefined for a single effective regime".into()));
    }
    let mut total = 0.0;
    for (i, a) in feats.iter().enumerate() {
        for (j, b) in feats.iter().enumerate() {
            total += weights[i] * weights[j] * (a - b).norm_squared();
        }
    }
    Ok(total / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::l11;
    use crate::simulate::{make_study_theta, random_orthonormal, rng_for, simulate_given_regimes};
    use crate::model::RegimeSequence;
    use proptest::prelude::*;

    #[test]
    fn two_state_frequencies() {
        // w = (b, a) / (a + b) for switching probabilities a, b
        let (a, b) = (0.1, 0.3);
        let z = DMatrix::from_row_slice(2, 2, &[1.0 - a, a, b, 1.0 - b]);
        let w = regime_frequencies(&z).unwrap();
        assert!((w[0] - b / (a + b)).abs() < 1e-12);
        assert!((w[1] - a / (a + b)).abs() < 1e-12);
        let w3 = regime_frequencies(&(DMatrix::from_element(3, 3, 1.0 / 3.0))).unwrap();
        assert!(w3.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    fn scalar_var(a: f64, q: f64) -> (ThetaParams, ModelSpec) {
        let spec = ModelSpec::new(ModelKind::Var, 1, 1, 1, 1).unwrap();
        let one = |v: f64| DMatrix::from_element(1, 1, v);
        let theta = ThetaParams::from_lags(
            &[vec![one(a)]],
            vec![one(1.0)],
            vec![one(q)],
            vec![one(0.0)],
            vec![DVector::zeros(1)],
            vec![one(1.0)],
            DVector::from_element(1, 1.0),
            one(1.0),
        );
        (theta, spec)
    }

    #[test]
    fn ar1_closed_form() {
        let (theta, spec) = scalar_var(0.5, 0.75);
        let m = stationary_measures(&theta, &spec, 4).unwrap();
        let g = &m.regimes[0];
        assert!((g.cov[(0, 0)] - 1.0).abs() < 1e-12);
        for l in 1..=4 {
            assert!((g.acf[(0, l - 1)] - 0.5f64.powi(l as i32)).abs() < 1e-12);
        }
        assert_eq!(g.corr[(0, 0)], 1.0);
    }

    #[test]
    fn noiseless_dyn_is_projected_state_covariance() {
        let spec = ModelSpec::new(ModelKind::Dyn, 1, 1, 2, 4).unwrap();
        let mut rng = rng_for(1, 0);
        let c = random_orthonormal(4, 2, &mut rng);
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, -0.2, 0.3]);
        let q = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let theta = ThetaParams::from_lags(
            &[vec![a.clone()]],
            vec![c.clone()],
            vec![q.clone()],
            vec![DMatrix::zeros(4, 4)],
            vec![DVector::zeros(2)],
            vec![DMatrix::identity(2, 2)],
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        );
        // fixed-point iteration as an independent Lyapunov solution
        let mut s = q.clone();
        for _ in 0..2000 {
            s = &a * &s * a.transpose() + &q;
        }
        let m = stationary_measures(&theta, &spec, 2).unwrap();
        let want = &c * s * c.transpose();
        assert!((&m.regimes[0].cov - want).amax() < 1e-10);
    }

    #[test]
    fn diagonal_system_has_zero_partial_correlation() {
        let spec = ModelSpec::new(ModelKind::Var, 1, 1, 3, 3).unwrap();
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, -0.2, 0.7]));
        let q = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 0.5]));
        let theta = ThetaParams::from_lags(
            &[vec![a]],
            vec![DMatrix::identity(3, 3)],
            vec![q],
            vec![DMatrix::zeros(3, 3)],
            vec![DVector::zeros(3)],
            vec![DMatrix::identity(3, 3)],
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, 1.0),
        );
        let m = stationary_measures(&theta, &spec, 1).unwrap();
        let p = &m.regimes[0].pcorr;
        for i in 0..3 {
            for k in 0..3 {
                assert!((p[(i, k)] - if i == k { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tridiagonal_precision_gives_banded_partial_correlation() {
        let n = 5;
        let prec = DMatrix::from_fn(n, n, |i, k| match i.abs_diff(k) {
            0 => 2.0,
            1 => -0.6,
            _ => 0.0,
        });
        let cov = prec.try_inverse().unwrap();
        let p = partial_correlation(&cov).unwrap();
        for i in 0..n {
            for k in 0..n {
                if i.abs_diff(k) > 1 {
                    assert!(p[(i, k)].abs() < 1e-8);
                }
            }
        }
        assert!((p[(0, 1)] - 0.3).abs() < 1e-10);
    }

    #[test]
    fn unstable_regime_is_named() {
        let (mut theta, spec) = scalar_var(0.5, 1.0);
        let spec = ModelSpec { m: 2, ..spec };
        theta.a.push(DMatrix::from_element(1, 1, 1.1));
        theta.q.push(theta.q[0].clone());
        theta.c.push(theta.c[0].clone());
        theta.r.push(theta.r[0].clone());
        let err = stationary_measures(&theta, &spec, 1).unwrap_err();
        assert!(matches!(err, Error::NotStationary { regime: 1, .. }), "{err:?}");
    }

    #[test]
    fn simulated_covariance_matches() {
        let spec = ModelSpec::new(ModelKind::Dyn, 1, 2, 2, 4).unwrap();
        let theta = make_study_theta(&spec, &mut rng_for(3, 0)).unwrap();
        let t_len = 50_000;
        let sim = simulate_given_regimes(&theta, &spec, RegimeSequence { labels: vec![0; t_len] }, &mut rng_for(3, 1)).unwrap();
        let (_, emp) = crate::linalg::sample_cov(&sim.y.columns(1000, t_len - 1000).into_owned());
        let m = stationary_measures(&theta, &spec, 1).unwrap();
        let rel = l11(&(&emp - &m.regimes[0].cov)) / l11(&m.regimes[0].cov);
        assert!(rel < 0.05, "{rel}");
    }

    #[test]
    fn feature_examples() {
        let f = fc_feature(&DMatrix::identity(2, 2)).unwrap();
        let h = 0.5f64.sqrt();
        assert!((f - DVector::from_vec(vec![h, 0.0, h])).amax() < 1e-15);
        let c = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let f1 = fc_feature(&c).unwrap();
        assert_eq!(f1.len(), 6);
        assert!((fc_feature(&(c * 5.0)).unwrap() - f1).amax() < 1e-15);
        assert!(fc_feature(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn single_pair_distance_is_chord_length() {
        let th: f64 = 0.7;
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::from_vec(vec![th.cos(), th.sin()]);
        let d = weighted_fc_distance(&[a], &[1.0], &[b], &[1.0]).unwrap();
        assert!((d - (2.0 - 2.0 * th.cos())).abs() < 1e-14);
    }

    #[test]
    fn two_feature_variance() {
        let a1 = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let a2 = DVector::from_vec(vec![0.0, 0.6, 0.8]);
        let v = weighted_fc_variance(&[a1.clone(), a2.clone()], &[0.5, 0.5]).unwrap();
        assert!((v - (&a1 - &a2).norm_squared()).abs() < 1e-14);
        assert!(weighted_fc_variance(&[a1.clone(), a2], &[1.0, 0.0]).is_err());
        assert!(weighted_fc_variance(&[a1.clone(), a1], &[0.3, 0.7]).unwrap().abs() < 1e-15);
        assert!(weighted_fc_distance(&[], &[], &[DVector::zeros(1)], &[1.0]).is_err());
    }

    fn unit_vec(dim: usize) -> impl Strategy<Value = DVector<f64>> {
        prop::collection::vec(-1.0f64..1.0, dim)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
            .prop_map(|v| DVector::from_vec(v).normalize())
    }

    fn weights(m: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05f64..1.0, m).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn distance_is_symmetric_and_zero_on_self(
            a in prop::collection::vec(unit_vec(4), 3),
            b in prop::collection::vec(unit_vec(4), 3),
            wa in weights(3),
            wb in weights(3),
        ) {
            let dab = weighted_fc_distance(&a, &wa, &b, &wb).unwrap();
            let dba = weighted_fc_distance(&b, &wb, &a, &wa).unwrap();
            prop_assert!((dab - dba).abs() < 1e-12);
            prop_assert!(dab >= 0.0);
            prop_assert!(weighted_fc_distance(&a, &wa, &a, &wa).unwrap().abs() < 1e-15);
        }

        #[test]
        fn variance_is_rotation_invariant(
            a in prop::collection::vec(unit_vec(3), 3),
            w in weights(3),
            angle in -3.0f64..3.0,
        ) {
            let rot = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), angle);
            let rm = DMatrix::from_iterator(3, 3, rot.matrix().iter().cloned());
            let rotated: Vec<DVector<f64>> = a.iter().map(|x| &rm * x).collect();
            let v0 = weighted_fc_variance(&a, &w).unwrap();
            let v1 = weighted_fc_variance(&rotated, &w).unwrap();
            prop_assert!((v0 - v1).abs() < 1e-12);
        }

        #[test]
        fn correlations_are_bounded(seed in 0u64..200) {
            let spec = ModelSpec::new(ModelKind::Dyn, 2, 2, 2, 5).unwrap();
            let theta = make_study_theta(&spec, &mut rng_for(seed, 0)).unwrap();
            let m = stationary_measures(&theta, &spec, DEFAULT_MAX_LAG).unwrap();
            for g in &m.regimes {
                prop_assert!(g.corr.diagonal().iter().all(|v| (*v - 1.0).abs() < 1e-12));
                prop_assert!(g.corr.iter().chain(g.acf.iter()).chain(g.pcorr.iter()).all(|v| v.abs() <= 1.0));
                prop_assert!(crate::linalg::min_eigenvalue(&g.cov) > 0.0);
            }
        }
    }
}

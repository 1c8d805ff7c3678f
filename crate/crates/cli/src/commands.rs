//! The subcommands. Each reads its settings, runs the library and writes
//! its output files into the `out` directory.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;
use switchssm::bootstrap::{
    confidence_intervals, match_replicates, parametric_bootstrap, target_values, BootstrapOptions, CiMethod, MatchKey,
    Target,
};
use switchssm::em::{fit, AccelerateOptions, FitOptions, FitResult, StopReason};
use switchssm::init::{initialize, InitOptions, Segmentation, DEFAULT_WINDOW};
use switchssm::kim::dwell_times;
use switchssm::simulate::{make_study_theta, rng_for, simulate_model};
use switchssm::stationary::{
    fc_feature, regime_frequencies, stationary_measures, weighted_fc_distance, weighted_fc_variance, DEFAULT_MAX_LAG,
};
use switchssm::study::{run_replication, Method, StudyOptions};
use switchssm::{ConstraintSet, ModelKind, ModelSpec, ThetaParams};

use crate::config::Settings;
use crate::error::{CliError, CliResult};
use crate::io::{
    channel_names, fixed_from_json, fmt, parse_equal, read_json, read_params, read_series, write_csv, write_json,
    write_matrix, write_series, FixedJson, Meta, ParamsFile, ThetaJson,
};

fn out_dir(s: &Settings) -> CliResult<PathBuf> {
    let dir = s.path("out").unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(|source| CliError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    Ok(dir)
}

fn positive(s: &Settings, key: &str, default: Option<usize>) -> CliResult<usize> {
    let v = match default {
        Some(d) => s.get_or(key, d)?,
        None => s.require(key)?,
    };
    if v == 0 {
        return Err(CliError::usage(format!("{key} must be positive")));
    }
    Ok(v)
}

fn constraints(s: &Settings, spec: &ModelSpec) -> CliResult<ConstraintSet> {
    let fixed = |key: &str, rows: usize, cols: usize| -> CliResult<_> {
        s.path(key)
            .map(|p| fixed_from_json(&read_json::<FixedJson>(&p)?, rows, cols, key))
            .transpose()
    };
    Ok(ConstraintSet {
        fixed_a: fixed("fixed_a", spec.r, spec.p * spec.r)?,
        fixed_c: fixed("fixed_c", spec.n, spec.r)?,
        diag_q: s.flag("diag_q")?,
        diag_r: s.flag("diag_r")?,
        diag_sigma: s.flag("diag_sigma")?,
        scale_c: s.list("scale_c")?,
        equal: parse_equal(&s.list::<String>("equal")?.unwrap_or_default())?,
        stable_a: s.get("stable")?,
    })
}

fn model_spec(s: &Settings, m: usize, p: usize, n: usize) -> CliResult<ModelSpec> {
    let kind: ModelKind = s.get_or("kind", ModelKind::Dyn)?;
    let r = positive(s, "r", Some(n.min(2)))?;
    let base = ModelSpec::new(kind, m, p, r, n)?;
    let c = constraints(s, &base)?;
    Ok(base.with_constraints(c)?)
}

fn fit_options(s: &Settings) -> CliResult<FitOptions> {
    let d = FitOptions::default();
    let accelerate = s.flag("accelerate")?.then(AccelerateOptions::default);
    let opts = FitOptions {
        max_iter: s.get_or("max_iter", d.max_iter)?,
        tol_rel: s.get_or("tol", d.tol_rel)?,
        patience: s.get_or("patience", d.patience)?,
        daem: s.list("daem")?,
        accelerate,
        seed: s.get_or("seed", 0)?,
    };
    opts.check().map_err(|e| CliError::usage(e.to_string()))?;
    Ok(opts)
}

fn init_options(s: &Settings) -> CliResult<InitOptions> {
    let segmentation = match s.get_or("segmentation", "equal".to_string())?.to_ascii_lowercase().as_str() {
        "equal" => Segmentation::Equal(s.get("kappa")?),
        "binary" => Segmentation::Binary {
            epsilon: s.get_or("epsilon", 0.05)?,
            min_len: s.get_or("min_len", 10)?,
        },
        other => return Err(CliError::usage(format!("unknown segmentation '{other}' (equal or binary)"))),
    };
    Ok(InitOptions {
        segmentation,
        seed: s.get_or("seed", 0)?,
    })
}

fn thread_pool(s: &Settings) -> CliResult<rayon::ThreadPool> {
    let default = std::thread::available_parallelism().map_or(1, |n| n.get());
    let jobs = positive(s, "jobs", Some(default))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::usage(format!("cannot start {jobs} workers: {e}")))
}

fn regimes_rows(labels: &[usize]) -> Vec<Vec<String>> {
    labels
        .iter()
        .enumerate()
        .map(|(t, l)| vec![(t + 1).to_string(), (l + 1).to_string()])
        .collect()
}

pub fn simulate(s: &Settings) -> CliResult<()> {
    let t_len = positive(s, "T", None)?;
    let seed: u64 = s.get_or("seed", 0)?;
    let (spec, theta, channels) = match s.path("params") {
        Some(p) => {
            let (file, spec, theta) = read_params(&p)?;
            let names = file.meta.channels.unwrap_or_else(|| channel_names(spec.n));
            (spec, theta, names)
        }
        None => {
            let n = positive(s, "N", None)?;
            let spec = model_spec(s, positive(s, "M", Some(2))?, positive(s, "p", Some(1))?, n)?;
            let theta = make_study_theta(&spec, &mut rng_for(seed, 0))?;
            (spec, theta, channel_names(n))
        }
    };
    let sim = simulate_model(&theta, &spec, t_len, &mut rng_for(seed, 1))?;
    let dir = out_dir(s)?;
    write_series(&dir.join("y.csv"), &channels, &sim.y)?;
    write_csv(
        &dir.join("regimes.csv"),
        &["t".into(), "regime".into()],
        &regimes_rows(&sim.s.labels),
    )?;
    let meta = Meta {
        seed: Some(seed),
        t_len: Some(t_len),
        channels: Some(channels),
        ..Default::default()
    };
    write_json(&dir.join("params.json"), &ParamsFile::new(&spec, &theta, meta))?;
    println!("simulated T = {t_len}, N = {} ({} model) into {}", spec.n, spec.kind.name(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ScoresJson {
    loglik: f64,
    aic: f64,
    bic: f64,
    mape: f64,
    n_free: usize,
    iterations: usize,
    converged: bool,
}

/// MAPE divides by `(T - p) r` unless `mape_scale = N` asks for `(T - p) N`.
fn scores_json(s: &Settings, res: &FitResult, spec: &ModelSpec) -> CliResult<ScoresJson> {
    let mape = match s.raw("mape_scale").unwrap_or("r") {
        "r" => res.scores.mape,
        "N" | "n" => res.scores.mape * spec.r as f64 / spec.n as f64,
        other => return Err(CliError::usage(format!("invalid mape_scale '{other}', expected r or N"))),
    };
    Ok(ScoresJson {
        loglik: res.loglik(),
        aic: res.scores.aic,
        bic: res.scores.bic,
        mape,
        n_free: res.scores.n_free_params,
        iterations: res.loglik_trace.len(),
        converged: res.stop == StopReason::Converged,
    })
}

/// Initializes and fits one model. On a numerical failure with a usable
/// best-so-far iterate, that iterate is written to `params.json` before
/// the error is returned.
fn fit_one(s: &Settings, y: &DMatrix<f64>, spec: &ModelSpec, dir: &Path, meta: &Meta) -> CliResult<FitResult> {
    let init = initialize(y, spec, &init_options(s)?)?;
    match fit(y, spec, &init.theta, &fit_options(s)?) {
        Ok(res) => Ok(res),
        Err(e) => {
            if let switchssm::Error::Fit { best: Some(best), .. } = &e {
                write_json(&dir.join("params.json"), &ParamsFile::new(spec, best, meta.clone()))?;
                log::warn!("wrote best parameters reached before the failure");
            }
            Err(e.into())
        }
    }
}

pub fn fit_cmd(s: &Settings) -> CliResult<()> {
    let input = s.path("input").ok_or_else(|| CliError::usage("missing required setting 'input'"))?;
    let (names, y) = read_series(&input)?;
    let spec = model_spec(s, positive(s, "M", Some(2))?, positive(s, "p", Some(1))?, y.nrows())?;
    let dir = out_dir(s)?;
    let mut meta = Meta {
        seed: Some(s.get_or("seed", 0)?),
        t_len: Some(y.ncols()),
        channels: Some(names),
        ..Default::default()
    };
    let res = fit_one(s, &y, &spec, &dir, &meta)?;
    meta.loglik = Some(res.loglik());
    meta.dwell = Some(dwell_times(&res.stats));
    write_json(&dir.join("params.json"), &ParamsFile::new(&spec, &res.theta, meta))?;

    let mut header = vec!["t".to_string(), "regime".to_string()];
    header.extend((1..=spec.m).map(|j| format!("p{j}")));
    let rows: Vec<Vec<String>> = res
        .s_hat
        .labels
        .iter()
        .zip(&res.stats.w)
        .enumerate()
        .map(|(t, (l, w))| {
            let mut row = vec![(t + 1).to_string(), (l + 1).to_string()];
            row.extend(w.iter().map(|v| fmt(*v)));
            row
        })
        .collect();
    write_csv(&dir.join("regimes.csv"), &header, &rows)?;
    let trace: Vec<Vec<String>> = res
        .loglik_trace
        .iter()
        .enumerate()
        .map(|(k, v)| vec![(k + 1).to_string(), fmt(*v)])
        .collect();
    write_csv(&dir.join("loglik_trace.csv"), &["iteration".into(), "loglik".into()], &trace)?;
    let scores = scores_json(s, &res, &spec)?;
    write_json(&dir.join("scores.json"), &scores)?;
    println!(
        "loglik {:.6} aic {:.6} bic {:.6} mape {:.6} after {} iterations",
        scores.loglik, scores.aic, scores.bic, scores.mape, scores.iterations
    );
    Ok(())
}

pub fn select(s: &Settings) -> CliResult<()> {
    let input = s.path("input").ok_or_else(|| CliError::usage("missing required setting 'input'"))?;
    let (_, y) = read_series(&input)?;
    let ms: Vec<usize> = s.list("M")?.unwrap_or_else(|| vec![1, 2, 3]);
    let ps: Vec<usize> = s.list("p")?.unwrap_or_else(|| vec![1]);
    if ms.iter().chain(&ps).any(|v| *v == 0) {
        return Err(CliError::usage("M and p candidates must be positive"));
    }
    let dir = out_dir(s)?;
    let mut rows = Vec::new();
    let mut best: Option<(f64, usize, usize)> = None;
    for &m in &ms {
        for &p in &ps {
            let spec = model_spec(s, m, p, y.nrows())?;
            let cand = dir.join(format!("M{m}_p{p}"));
            std::fs::create_dir_all(&cand).map_err(|source| CliError::Io {
                path: cand.display().to_string(),
                source,
            })?;
            match fit_one(s, &y, &spec, &cand, &Meta::default()) {
                Ok(res) => {
                    let sc = scores_json(s, &res, &spec)?;
                    write_json(&cand.join("scores.json"), &sc)?;
                    if best.is_none_or(|(b, _, _)| sc.bic < b) {
                        best = Some((sc.bic, m, p));
                    }
                    rows.push(vec![
                        m.to_string(),
                        p.to_string(),
                        fmt(sc.loglik),
                        fmt(sc.aic),
                        fmt(sc.bic),
                        fmt(sc.mape),
                        sc.n_free.to_string(),
                    ]);
                }
                Err(e) if e.exit_code() == 3 => log::warn!("M = {m}, p = {p} failed: {e}"),
                Err(e) => return Err(e),
            }
        }
    }
    let header: Vec<String> = ["M", "p", "loglik", "aic", "bic", "mape", "n_free"].map(String::from).to_vec();
    write_csv(&dir.join("scores.csv"), &header, &rows)?;
    match best {
        Some((bic, m, p)) => println!("lowest BIC {bic:.6} at M = {m}, p = {p}"),
        None => return Err(switchssm::Error::NumericalFailure { t: 0, msg: "every candidate fit failed".into() }.into()),
    }
    Ok(())
}

#[derive(Serialize)]
struct EnsembleJson {
    seed: u64,
    requested: usize,
    failed: usize,
    indices: Vec<usize>,
    logliks: Vec<f64>,
    replicates: Vec<ThetaJson>,
}

fn parse_methods(raw: &str) -> CliResult<Vec<CiMethod>> {
    let mut out = Vec::new();
    for name in raw.split(',').map(|v| v.trim().to_ascii_lowercase()) {
        match name.as_str() {
            "percentile" => out.push(CiMethod::Percentile),
            "basic" => out.push(CiMethod::Basic),
            "normal" => out.push(CiMethod::Normal),
            "all" => out.extend([CiMethod::Percentile, CiMethod::Basic, CiMethod::Normal]),
            other => return Err(CliError::usage(format!("unknown interval method '{other}'"))),
        }
    }
    Ok(out)
}

fn method_name(m: CiMethod) -> &'static str {
    match m {
        CiMethod::Percentile => "percentile",
        CiMethod::Basic => "basic",
        CiMethod::Normal => "normal",
    }
}

pub fn bootstrap(s: &Settings) -> CliResult<()> {
    let params = s.path("params").ok_or_else(|| CliError::usage("missing required setting 'params'"))?;
    let (file, spec, theta) = read_params(&params)?;
    let replicates = positive(s, "B", Some(100))?;
    let t_len = match s.get::<usize>("T")?.or(file.meta.t_len) {
        Some(t) if t > 0 => t,
        _ => return Err(CliError::usage("series length unknown: pass --T")),
    };
    let targets: Vec<Target> = s.list("targets")?.unwrap_or_else(|| vec![Target::Cov, Target::Corr, Target::Z]);
    let level: f64 = s.get_or("level", 0.9)?;
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::usage("level must lie in (0, 1)"));
    }
    let methods = parse_methods(&s.get_or("method", "percentile".to_string())?)?;
    let key = match s.get_or("match", "pi".to_string())?.to_ascii_lowercase().as_str() {
        "pi" => MatchKey::Pi,
        "a" => MatchKey::A,
        "cov" => MatchKey::Cov,
        other => return Err(CliError::usage(format!("unknown match key '{other}'"))),
    };
    let max_lag = s.get_or("max_lag", DEFAULT_MAX_LAG)?;
    let seed: u64 = s.get_or("seed", 0)?;
    let opts = BootstrapOptions {
        replicates,
        t_len,
        seed,
        fit: fit_options(s)?,
    };

    let pool = thread_pool(s)?;
    let ens = pool.install(|| parametric_bootstrap(&theta, &spec, &opts))?;
    let ens = match_replicates(&ens, &theta, &spec, key)?;

    // parameter targets first, then those needing stationary measures
    let (plain, measured): (Vec<Target>, Vec<Target>) = targets.iter().partition(|t| !t.needs_measures());
    let measures = if measured.is_empty() {
        None
    } else {
        Some(stationary_measures(&theta, &spec, max_lag)?)
    };
    let mut estimate = target_values(&theta, None, &spec, &plain);
    estimate.extend(target_values(&theta, measures.as_ref(), &spec, &measured));
    let n_measured = estimate.len() - estimate.iter().filter(|v| !v.target.needs_measures()).count();
    let samples: Vec<Vec<f64>> = ens
        .replicates
        .iter()
        .map(|rep| {
            let mut row: Vec<f64> = target_values(rep, None, &spec, &plain).into_iter().map(|v| v.value).collect();
            if !measured.is_empty() {
                match stationary_measures(rep, &spec, max_lag) {
                    Ok(m) => row.extend(target_values(rep, Some(&m), &spec, &measured).into_iter().map(|v| v.value)),
                    Err(e) => {
                        log::warn!("replicate left out of stationary targets: {e}");
                        row.extend(std::iter::repeat_n(f64::NAN, n_measured));
                    }
                }
            }
            row
        })
        .collect();
    let est: Vec<f64> = estimate.iter().map(|v| v.value).collect();

    let dir = out_dir(s)?;
    for method in methods {
        let bands = confidence_intervals(&samples, &est, level, method)?;
        let rows: Vec<Vec<String>> = estimate
            .iter()
            .zip(&bands.intervals)
            .map(|(v, iv)| {
                vec![
                    v.target.name().to_string(),
                    v.index.clone(),
                    fmt(iv.lower),
                    fmt(v.value),
                    fmt(iv.upper),
                ]
            })
            .collect();
        let header: Vec<String> = ["target", "index", "lower", "estimate", "upper"].map(String::from).to_vec();
        write_csv(&dir.join(format!("ci_{}.csv", method_name(method))), &header, &rows)?;
    }
    let ensemble = EnsembleJson {
        seed,
        requested: ens.requested,
        failed: ens.failed,
        indices: ens.indices.clone(),
        logliks: ens.logliks.clone(),
        replicates: ens
            .replicates
            .iter()
            .map(|t| ParamsFile::new(&spec, t, Meta::default()).theta)
            .collect(),
    };
    write_json(&dir.join("ensemble.json"), &ensemble)?;
    println!("{} of {} replicates kept", ens.len(), ens.requested);
    Ok(())
}

/// Regime weights for the connectivity distances: the fit's dwell times
/// when recorded, otherwise the long-run frequencies of the chain.
fn regime_weights(file: &ParamsFile, theta: &ThetaParams) -> CliResult<Vec<f64>> {
    if let Some(d) = &file.meta.dwell {
        let total: f64 = d.iter().sum();
        if d.len() == theta.n_regimes() && total > 0.0 {
            return Ok(d.iter().map(|v| v / total).collect());
        }
    }
    Ok(regime_frequencies(&theta.z)?.iter().copied().collect())
}

pub fn extract(s: &Settings) -> CliResult<()> {
    let files: Vec<PathBuf> = s
        .list::<String>("params")?
        .ok_or_else(|| CliError::usage("missing required setting 'params'"))?
        .into_iter()
        .map(PathBuf::from)
        .collect();
    let max_lag = s.get_or("max_lag", DEFAULT_MAX_LAG)?;
    let dir = out_dir(s)?;
    let mut sets = Vec::with_capacity(files.len());
    for (k, path) in files.iter().enumerate() {
        let (file, spec, theta) = read_params(path)?;
        let meas = stationary_measures(&theta, &spec, max_lag)?;
        let names = file.meta.channels.clone().unwrap_or_else(|| channel_names(spec.n));
        let sub = if files.len() == 1 { dir.clone() } else { dir.join(format!("set{}", k + 1)) };
        std::fs::create_dir_all(&sub).map_err(|source| CliError::Io {
            path: sub.display().to_string(),
            source,
        })?;
        let lag_header: Vec<String> = (0..=max_lag).map(|h| format!("lag{h}")).collect();
        let mut feats = Vec::with_capacity(spec.m);
        for (j, g) in meas.regimes.iter().enumerate() {
            let j1 = j + 1;
            write_matrix(&sub.join(format!("cov_{j1}.csv")), &names, &g.cov)?;
            write_matrix(&sub.join(format!("corr_{j1}.csv")), &names, &g.corr)?;
            write_matrix(&sub.join(format!("pcorr_{j1}.csv")), &names, &g.pcorr)?;
            let mut acf = DMatrix::from_element(spec.n, max_lag + 1, 1.0);
            acf.view_mut((0, 1), (spec.n, max_lag)).copy_from(&g.acf);
            write_matrix(&sub.join(format!("acf_{j1}.csv")), &lag_header, &acf)?;
            feats.push(fc_feature(&g.cov)?);
        }
        sets.push((feats, regime_weights(&file, &theta)?));
    }

    let width = sets[0].0[0].len();
    if sets.iter().any(|(f, _)| f[0].len() != width) {
        return Err(CliError::usage("parameter files differ in channel count"));
    }
    let mut header: Vec<String> = ["set", "regime", "weight"].map(String::from).to_vec();
    header.extend((1..=width).map(|i| format!("f{i}")));
    let mut rows = Vec::new();
    for (k, (feats, w)) in sets.iter().enumerate() {
        for (j, f) in feats.iter().enumerate() {
            let mut row = vec![(k + 1).to_string(), (j + 1).to_string(), fmt(w[j])];
            row.extend(f.iter().map(|v| fmt(*v)));
            rows.push(row);
        }
    }
    write_csv(&dir.join("fc_features.csv"), &header, &rows)?;

    if sets.len() > 1 {
        let mut dist = Vec::new();
        for a in 0..sets.len() {
            for b in a + 1..sets.len() {
                let d = weighted_fc_distance(&sets[a].0, &sets[a].1, &sets[b].0, &sets[b].1)?;
                dist.push(vec![(a + 1).to_string(), (b + 1).to_string(), fmt(d)]);
            }
        }
        write_csv(&dir.join("fc_distance.csv"), &["set_a".into(), "set_b".into(), "distance".into()], &dist)?;
        let var: Vec<Vec<String>> = sets
            .iter()
            .enumerate()
            .map(|(k, (f, w))| {
                let v = weighted_fc_variance(f, w).unwrap_or_else(|e| {
                    log::warn!("set {}: {e}", k + 1);
                    f64::NAN
                });
                vec![(k + 1).to_string(), fmt(v)]
            })
            .collect();
        write_csv(&dir.join("fc_variance.csv"), &["set".into(), "variance".into()], &var)?;
    }
    println!("extracted {} parameter set(s) into {}", sets.len(), dir.display());
    Ok(())
}

/// Seed of replication `sim` in grid cell `cell`.
fn replication_seed(seed: u64, cell: usize, sim: usize) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add((cell as u64) << 32)
        .wrapping_add(sim as u64)
}

pub fn study(s: &Settings) -> CliResult<()> {
    let kinds: Vec<ModelKind> = s.list("kind")?.unwrap_or_else(|| vec![ModelKind::Dyn]);
    let ns: Vec<usize> = s.list("N")?.unwrap_or_else(|| vec![10]);
    let ts: Vec<usize> = s.list("T")?.unwrap_or_else(|| vec![400]);
    let sims = positive(s, "sims", Some(10))?;
    let m = positive(s, "M", Some(2))?;
    let p = positive(s, "p", Some(2))?;
    let r = positive(s, "r", Some(2))?;
    let seed: u64 = s.get_or("seed", 0)?;
    let methods: Vec<Method> = match s.list::<String>("methods")? {
        Some(names) => names
            .iter()
            .map(|n| Method::parse(n).ok_or_else(|| CliError::usage(format!("unknown method '{n}'"))))
            .collect::<CliResult<_>>()?,
        None => Method::ALL.to_vec(),
    };
    let opts = StudyOptions {
        methods,
        fit: fit_options(s)?,
        window: s.get_or("window", DEFAULT_WINDOW)?,
    };

    let mut cells = Vec::new();
    for &kind in &kinds {
        for &n in &ns {
            for &t in &ts {
                let r_eff = if kind == ModelKind::Var { n } else { r.min(n) };
                let spec = ModelSpec::new(kind, m, p, r_eff, n)?;
                if t == 0 {
                    return Err(CliError::usage("T must be positive"));
                }
                cells.push((spec, t));
            }
        }
    }
    let tasks: Vec<(usize, usize)> = (0..cells.len()).flat_map(|c| (0..sims).map(move |i| (c, i))).collect();
    let pool = thread_pool(s)?;
    let results: Vec<_> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(c, i)| {
                let (spec, t) = &cells[c];
                let rs = replication_seed(seed, c, i);
                (c, i, rs, run_replication(spec, *t, rs, &opts))
            })
            .collect()
    });

    let mut cls_rows = Vec::new();
    let mut err_rows = Vec::new();
    let mut sums = vec![vec![(0.0, 0usize); Method::ALL.len()]; cells.len()];
    for (c, i, rs, res) in results {
        let (spec, t) = &cells[c];
        let key = |method: Method| {
            vec![
                spec.kind.name().to_string(),
                spec.n.to_string(),
                t.to_string(),
                (i + 1).to_string(),
                rs.to_string(),
                method.name().to_string(),
            ]
        };
        let rep = match res {
            Ok(rep) => rep,
            Err(e) => {
                log::warn!("{} N={} T={t} sim {}: {e}", spec.kind.name(), spec.n, i + 1);
                continue;
            }
        };
        for o in &rep.outcomes {
            if let Some(rate) = o.classification {
                let mut row = key(o.method);
                row.push(fmt(rate));
                cls_rows.push(row);
                let k = Method::ALL.iter().position(|x| *x == o.method).expect("known method");
                sums[c][k].0 += rate;
                sums[c][k].1 += 1;
            }
            for (name, v) in o.errors.entries() {
                if let Some(v) = v {
                    let mut row = key(o.method);
                    row.push(name.to_string());
                    row.push(fmt(v));
                    err_rows.push(row);
                }
            }
        }
    }
    let dir = out_dir(s)?;
    let base: Vec<String> = ["kind", "N", "T", "sim", "seed", "method"].map(String::from).to_vec();
    let mut h = base.clone();
    h.push("rate".into());
    write_csv(&dir.join("classification_rate.csv"), &h, &cls_rows)?;
    let mut h = base;
    h.extend(["parameter".to_string(), "error".to_string()]);
    write_csv(&dir.join("relative_error.csv"), &h, &err_rows)?;

    for (c, (spec, t)) in cells.iter().enumerate() {
        for (k, method) in Method::ALL.iter().enumerate() {
            let (sum, count) = sums[c][k];
            if count > 0 {
                println!(
                    "{} N={} T={t} {:8} mean classification {:.4} over {count} sims",
                    spec.kind.name(),
                    spec.n,
                    method.name(),
                    sum / count as f64
                );
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replication_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for c in 0..4 {
            for i in 0..100 {
                assert!(seen.insert(replication_seed(7, c, i)));
            }
        }
    }

    #[test]
    fn interval_methods_parse() {
        assert_eq!(parse_methods("all").unwrap().len(), 3);
        assert_eq!(parse_methods("Basic").unwrap(), vec![CiMethod::Basic]);
        assert!(parse_methods("bca").is_err());
    }

    #[test]
    fn spec_from_settings() {
        let s = Settings::from_pairs([("kind", "obs"), ("r", "1"), ("diag_r", "true"), ("equal", "Q,mu"), ("stable", "0.01")]);
        let spec = model_spec(&s, 2, 1, 3).unwrap();
        assert_eq!(spec.kind, ModelKind::Obs);
        assert_eq!(spec.r, 1);
        assert!(spec.constraints.diag_r);
        assert!(spec.constraints.equal.q && spec.constraints.equal.mu);
        assert_eq!(spec.constraints.stable_a, Some(0.01));
        let bad = Settings::from_pairs([("equal", "B")]);
        assert!(model_spec(&bad, 2, 1, 3).is_err());
    }

    #[test]
    fn weights_prefer_dwell_times() {
        let spec = ModelSpec::new(ModelKind::Dyn, 2, 1, 1, 2).unwrap();
        let mut theta = make_study_theta(&spec, &mut rng_for(1, 0)).unwrap();
        theta.z = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.3, 0.7]);
        let mut file = ParamsFile::new(&spec, &theta, Meta::default());
        let w = regime_weights(&file, &theta).unwrap();
        assert!((w[0] - 0.75).abs() < 1e-12);
        file.meta.dwell = Some(vec![1.0, 3.0]);
        assert_eq!(regime_weights(&file, &theta).unwrap(), vec![0.25, 0.75]);
    }
}

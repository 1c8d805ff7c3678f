//! File formats: time series and tables as CSV, parameter sets as JSON
//! with matrices stored as row-major nested arrays.

use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use switchssm::model::{validate, EqualityConstraints};
use switchssm::{ConstraintSet, FixedCoefficients, ModelKind, ModelSpec, ThetaParams};

use crate::error::{CliError, CliResult};

pub type Mat = Vec<Vec<f64>>;

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, msg: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Default channel names `ch1..chN`.
pub fn channel_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("ch{i}")).collect()
}

/// Reads a series with one row per time point and one column per channel.
/// A first row that is not entirely numeric is taken as the header.
/// Returns the channel names and the `N x T` data.
pub fn read_series(path: &Path) -> CliResult<(Vec<String>, DMatrix<f64>)> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(file);
    let mut names = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| parse_err(path, e.to_string()))?;
        let parsed: Result<Vec<f64>, _> = rec.iter().map(|f| f.parse::<f64>()).collect();
        match parsed {
            Ok(v) => rows.push(v),
            Err(_) if k == 0 => names = Some(rec.iter().map(String::from).collect::<Vec<_>>()),
            Err(_) => return Err(parse_err(path, format!("row {} is not numeric", k + 1))),
        }
    }
    let n = rows.first().map(Vec::len).ok_or_else(|| parse_err(path, "no data rows"))?;
    if let Some(bad) = rows.iter().position(|r| r.len() != n) {
        return Err(parse_err(path, format!("data row {} has {} fields, expected {n}", bad + 1, rows[bad].len())));
    }
    let names = names.unwrap_or_else(|| channel_names(n));
    if names.len() != n {
        return Err(parse_err(path, "header and data differ in width"));
    }
    let y = DMatrix::from_fn(n, rows.len(), |i, t| rows[t][i]);
    Ok((names, y))
}

/// Writes a header and rows of preformatted fields.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let wrap = |e: csv::Error| parse_err(path, e.to_string());
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(row).map_err(wrap)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes `N x T` data as T rows.
pub fn write_series(path: &Path, names: &[String], y: &DMatrix<f64>) -> CliResult<()> {
    let rows: Vec<Vec<String>> = (0..y.ncols()).map(|t| y.column(t).iter().map(|v| fmt(*v)).collect()).collect();
    write_csv(path, names, &rows)
}

/// Writes a matrix with the given column names.
pub fn write_matrix(path: &Path, header: &[String], x: &DMatrix<f64>) -> CliResult<()> {
    let rows: Vec<Vec<String>> = x.row_iter().map(|r| r.iter().map(|v| fmt(*v)).collect()).collect();
    write_csv(path, header, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value).map_err(|e| parse_err(path, e.to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| parse_err(path, e.to_string()))
}

pub fn to_rows(x: &DMatrix<f64>) -> Mat {
    x.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &Mat, nrows: usize, ncols: usize, what: &str) -> CliResult<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::usage(format!("{what} must be {nrows} x {ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SpecJson {
    pub kind: String,
    #[serde(rename = "M")]
    pub m: usize,
    pub p: usize,
    pub r: usize,
    #[serde(rename = "N")]
    pub n: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ThetaJson {
    /// Lag matrices per regime, `A[j][l]` is `r x r`.
    #[serde(rename = "A")]
    pub a: Vec<Vec<Mat>>,
    #[serde(rename = "C")]
    pub c: Vec<Mat>,
    #[serde(rename = "Q")]
    pub q: Vec<Mat>,
    #[serde(rename = "R")]
    pub r: Vec<Mat>,
    /// Initial companion-state means.
    pub mu: Vec<Vec<f64>>,
    /// Initial companion-state covariances.
    #[serde(rename = "Sigma")]
    pub sigma: Vec<Mat>,
    pub pi: Vec<f64>,
    #[serde(rename = "Z")]
    pub z: Mat,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct FixedJson {
    pub mask: Vec<Vec<bool>>,
    pub values: Mat,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ConstraintsJson {
    pub fixed_a: Option<FixedJson>,
    pub fixed_c: Option<FixedJson>,
    pub diag_q: bool,
    pub diag_r: bool,
    pub diag_sigma: bool,
    pub scale_c: Option<Vec<f64>>,
    /// Names of parameters tied across regimes (`A`, `C`, `Q`, `Sigma`, `mu`).
    pub equal: Vec<String>,
    /// Stability margin.
    pub stable: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Meta {
    pub seed: Option<u64>,
    pub version: String,
    /// Length of the series the parameters came from.
    pub t_len: Option<usize>,
    pub loglik: Option<f64>,
    /// Time-averaged smoothed regime probabilities of the fit.
    pub dwell: Option<Vec<f64>>,
    pub channels: Option<Vec<String>>,
}

impl Default for Meta {
    fn default() -> Self {
        Self {
            seed: None,
            version: env!("CARGO_PKG_VERSION").to_string(),
            t_len: None,
            loglik: None,
            dwell: None,
            channels: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamsFile {
    pub spec: SpecJson,
    pub theta: ThetaJson,
    #[serde(default)]
    pub constraints: ConstraintsJson,
    #[serde(default)]
    pub meta: Meta,
}

fn fixed_to_json(f: &FixedCoefficients) -> FixedJson {
    FixedJson {
        mask: f.mask.row_iter().map(|r| r.iter().copied().collect()).collect(),
        values: to_rows(&f.values),
    }
}

pub fn fixed_from_json(f: &FixedJson, nrows: usize, ncols: usize, what: &str) -> CliResult<FixedCoefficients> {
    if f.mask.len() != nrows || f.mask.iter().any(|r| r.len() != ncols) {
        return Err(CliError::usage(format!("{what} mask must be {nrows} x {ncols}")));
    }
    let mask = DMatrix::from_fn(nrows, ncols, |i, j| f.mask[i][j]);
    Ok(FixedCoefficients::new(mask, from_rows(&f.values, nrows, ncols, what)?)?)
}

pub fn constraints_to_json(c: &ConstraintSet) -> ConstraintsJson {
    let e = &c.equal;
    let equal = [(e.a, "A"), (e.c, "C"), (e.q, "Q"), (e.sigma, "Sigma"), (e.mu, "mu")]
        .into_iter()
        .filter(|(on, _)| *on)
        .map(|(_, name)| name.to_string())
        .collect();
    ConstraintsJson {
        fixed_a: c.fixed_a.as_ref().map(fixed_to_json),
        fixed_c: c.fixed_c.as_ref().map(fixed_to_json),
        diag_q: c.diag_q,
        diag_r: c.diag_r,
        diag_sigma: c.diag_sigma,
        scale_c: c.scale_c.clone(),
        equal,
        stable: c.stable_a,
    }
}

/// Parses equality-constraint names, case-insensitively.
pub fn parse_equal(names: &[String]) -> CliResult<EqualityConstraints> {
    let mut e = EqualityConstraints::default();
    for name in names {
        match name.trim().to_ascii_lowercase().as_str() {
            "a" => e.a = true,
            "c" => e.c = true,
            "q" => e.q = true,
            "sigma" => e.sigma = true,
            "mu" => e.mu = true,
            "" => {}
            other => return Err(CliError::usage(format!("unknown equality constraint '{other}'"))),
        }
    }
    Ok(e)
}

pub fn constraints_from_json(c: &ConstraintsJson, spec: &ModelSpec) -> CliResult<ConstraintSet> {
    let (n, r, p) = (spec.n, spec.r, spec.p);
    Ok(ConstraintSet {
        fixed_a: c.fixed_a.as_ref().map(|f| fixed_from_json(f, r, p * r, "fixed_a")).transpose()?,
        fixed_c: c.fixed_c.as_ref().map(|f| fixed_from_json(f, n, r, "fixed_c")).transpose()?,
        diag_q: c.diag_q,
        diag_r: c.diag_r,
        diag_sigma: c.diag_sigma,
        scale_c: c.scale_c.clone(),
        equal: parse_equal(&c.equal)?,
        stable_a: c.stable,
    })
}

impl ParamsFile {
    pub fn new(spec: &ModelSpec, theta: &ThetaParams, meta: Meta) -> Self {
        let m = spec.m;
        Self {
            spec: SpecJson {
                kind: spec.kind.name().to_string(),
                m,
                p: spec.p,
                r: spec.r,
                n: spec.n,
            },
            theta: ThetaJson {
                a: (0..m).map(|j| theta.lags(j).iter().map(to_rows).collect()).collect(),
                c: theta.c.iter().map(to_rows).collect(),
                q: theta.q.iter().map(to_rows).collect(),
                r: theta.r.iter().map(to_rows).collect(),
                mu: theta.mu.iter().map(|v| v.iter().copied().collect()).collect(),
                sigma: theta.sigma.iter().map(to_rows).collect(),
                pi: theta.pi.iter().copied().collect(),
                z: to_rows(&theta.z),
            },
            constraints: constraints_to_json(&spec.constraints),
            meta,
        }
    }

    /// Rebuilds and validates the model.
    pub fn to_model(&self) -> CliResult<(ModelSpec, ThetaParams)> {
        let s = &self.spec;
        let kind: ModelKind = s.kind.parse()?;
        let base = ModelSpec::new(kind, s.m, s.p, s.r, s.n)?;
        let constraints = constraints_from_json(&self.constraints, &base)?;
        let spec = base.with_constraints(constraints)?;
        let (m, p, r, n) = (spec.m, spec.p, spec.r, spec.n);
        let d = p * r;
        let t = &self.theta;
        let count = |len: usize, what: &str| {
            if len == m {
                Ok(())
            } else {
                Err(CliError::usage(format!("{what} has {len} regimes, expected {m}")))
            }
        };
        count(t.a.len(), "A")?;
        count(t.c.len(), "C")?;
        count(t.q.len(), "Q")?;
        count(t.r.len(), "R")?;
        count(t.mu.len(), "mu")?;
        count(t.sigma.len(), "Sigma")?;
        count(t.pi.len(), "pi")?;
        let mut lags = Vec::with_capacity(m);
        for (j, a) in t.a.iter().enumerate() {
            if a.len() != p {
                return Err(CliError::usage(format!("A[{}] has {} lags, expected {p}", j + 1, a.len())));
            }
            lags.push(a.iter().map(|x| from_rows(x, r, r, "A")).collect::<CliResult<Vec<_>>>()?);
        }
        let mats = |xs: &[Mat], rows: usize, cols: usize, what: &str| {
            xs.iter().map(|x| from_rows(x, rows, cols, what)).collect::<CliResult<Vec<_>>>()
        };
        let mu = t
            .mu
            .iter()
            .map(|v| {
                if v.len() == d {
                    Ok(DVector::from_vec(v.clone()))
                } else {
                    Err(CliError::usage(format!("mu must have length {d}")))
                }
            })
            .collect::<CliResult<Vec<_>>>()?;
        let theta = ThetaParams::from_lags(
            &lags,
            mats(&t.c, n, r, "C")?,
            mats(&t.q, r, r, "Q")?,
            mats(&t.r, n, n, "R")?,
            mu,
            mats(&t.sigma, d, d, "Sigma")?,
            DVector::from_vec(t.pi.clone()),
            from_rows(&t.z, m, m, "Z")?,
        );
        let v = validate(&theta, &spec);
        if !v.is_empty() {
            return Err(switchssm::Error::InvalidParams(v).into());
        }
        Ok((spec, theta))
    }
}

pub fn read_params(path: &Path) -> CliResult<(ParamsFile, ModelSpec, ThetaParams)> {
    let file: ParamsFile = read_json(path)?;
    let (spec, theta) = file.to_model().map_err(|e| match e {
        CliError::Usage(msg) => parse_err(path, msg),
        other => other,
    })?;
    Ok((file, spec, theta))
}

//! `switchssm`: simulate, fit, bootstrap and summarize Markov-switching
//! state-space models from the command line.
//!
//! Exit codes: 0 on success, 2 for usage or input errors, 3 for numerical
//! failures.

mod commands;
mod config;
mod error;
mod io;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use crate::config::Settings;
use crate::error::CliResult;

fn opt(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).value_name("VALUE").help(help)
}

fn flag(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).action(ArgAction::SetTrue).help(help)
}

fn shared() -> Vec<Arg> {
    vec![
        opt("seed", "Random seed"),
        opt("out", "Output directory (default: current directory)"),
        opt("config", "Config file with key = value lines and [subcommand] sections"),
    ]
}

fn model() -> Vec<Arg> {
    vec![
        opt("kind", "Model kind: dyn, var or obs"),
        opt("M", "Number of regimes"),
        opt("p", "Autoregressive order"),
        opt("r", "State dimension (ignored for var)"),
    ]
}

fn constraint_args() -> Vec<Arg> {
    vec![
        opt("stable", "Keep every regime stable with this spectral-radius margin"),
        flag("diag-q", "Diagonal state noise covariance"),
        flag("diag-r", "Diagonal observation noise covariance"),
        flag("diag-sigma", "Diagonal initial state covariance"),
        opt("equal", "Parameters tied across regimes, e.g. A,Q"),
        opt("scale-c", "Target norms of the columns of C"),
        opt("fixed-a", "JSON file with mask and values pinning lag coefficients"),
        opt("fixed-c", "JSON file with mask and values pinning entries of C"),
    ]
}

fn fit_args() -> Vec<Arg> {
    vec![
        opt("max-iter", "Maximum EM iterations"),
        opt("tol", "Relative log-likelihood tolerance"),
        opt("patience", "Consecutive non-improving iterations before stopping"),
        opt("daem", "Annealing schedule, e.g. 0.3,0.6,1"),
        flag("accelerate", "Alternate switching and fixed-regime EM"),
        opt("kappa", "Number of initialization intervals"),
        opt("segmentation", "Initialization segmentation: equal or binary"),
        opt("epsilon", "Binary segmentation threshold"),
        opt("min-len", "Binary segmentation minimum segment length"),
        opt("mape-scale", "MAPE denominator dimension: r (default) or N"),
    ]
}

fn cli() -> Command {
    let input = || opt("input", "Time series CSV (rows = time, columns = channels)");
    Command::new("switchssm")
        .about("Markov-switching state-space models")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("simulate")
                .about("Simulate a series from a parameter file or a random study model")
                .args(shared())
                .args(model())
                .args([
                    opt("N", "Number of channels"),
                    opt("T", "Series length"),
                    opt("params", "Parameter file to simulate from"),
                ]),
        )
        .subcommand(
            Command::new("fit")
                .about("Fit a model by EM")
                .args(shared())
                .args(model())
                .arg(input())
                .args(fit_args())
                .args(constraint_args()),
        )
        .subcommand(
            Command::new("select")
                .about("Fit candidate models and report AIC, BIC and MAPE")
                .args(shared())
                .args([
                    opt("kind", "Model kind: dyn, var or obs"),
                    opt("M", "Candidate regime counts, e.g. 1,2,3"),
                    opt("p", "Candidate orders, e.g. 1,2"),
                    opt("r", "State dimension (ignored for var)"),
                ])
                .arg(input())
                .args(fit_args())
                .args(constraint_args()),
        )
        .subcommand(
            Command::new("bootstrap")
                .about("Parametric bootstrap confidence intervals")
                .args(shared())
                .args([
                    opt("params", "Fitted parameter file"),
                    opt("B", "Number of replicates"),
                    opt("T", "Replicate series length (default: length of the fitted series)"),
                    opt("jobs", "Worker threads"),
                    opt("targets", "Targets: cov,corr,acf,pcorr,Z,A,Q,R,CCt,pi"),
                    opt("level", "Nominal coverage"),
                    opt("method", "percentile, basic, normal or all"),
                    opt("match", "Regime matching key: pi, a or cov"),
                    opt("max-lag", "Autocorrelation lags"),
                ])
                .args(fit_args()),
        )
        .subcommand(
            Command::new("extract")
                .about("Stationary covariance, correlation, autocorrelation and connectivity features")
                .args(shared())
                .args([
                    opt("params", "Parameter file(s), comma separated or repeated").action(ArgAction::Append),
                    opt("max-lag", "Autocorrelation lags"),
                ]),
        )
        .subcommand(
            Command::new("study")
                .about("Simulation study comparing regime and parameter estimators")
                .args(shared())
                .args([
                    opt("kind", "Model kinds, e.g. dyn,var"),
                    opt("M", "Number of regimes"),
                    opt("p", "Autoregressive order"),
                    opt("r", "State dimension"),
                    opt("N", "Channel counts, e.g. 10,50"),
                    opt("T", "Series lengths, e.g. 400,600"),
                    opt("sims", "Simulations per cell"),
                    opt("methods", "Estimators: SW-KM,SSM-OLS,SSM-ML,OR-OLS,OR-ML"),
                    opt("jobs", "Worker threads"),
                    opt("window", "Sliding-window length"),
                    opt("max-iter", "Maximum EM iterations"),
                    opt("tol", "Relative log-likelihood tolerance"),
                ]),
        )
}

/// Values given explicitly on the command line, as `(key, value)` pairs.
fn command_line_values(m: &ArgMatches) -> Vec<(String, String)> {
    m.ids()
        .filter(|id| m.value_source(id.as_str()) == Some(ValueSource::CommandLine))
        .filter_map(|id| {
            let raw = m.get_raw(id.as_str())?;
            let joined = raw.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",");
            Some((id.to_string(), joined))
        })
        .collect()
}

fn run(name: &str, m: &ArgMatches) -> CliResult<()> {
    let config = m.get_one::<String>("config").map(std::path::PathBuf::from);
    let settings = Settings::load(name, config.as_deref(), command_line_values(m))?;
    match name {
        "simulate" => commands::simulate(&settings),
        "fit" => commands::fit_cmd(&settings),
        "select" => commands::select(&settings),
        "bootstrap" => commands::bootstrap(&settings),
        "extract" => commands::extract(&settings),
        "study" => commands::study(&settings),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = cli().get_matches();
    let (name, sub) = matches.subcommand().expect("subcommand required");
    if let Err(e) = run(name, sub) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

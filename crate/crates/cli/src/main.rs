//! `rollover` command-line front end.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use manifest::{RunManifest, Status};

#[derive(Parser, Debug)]
#[command(name = "rollover", version, about = "Term structures under roll-over risk")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Check both GOP conditions of the model at 100 interior points.
    CheckModel(RunArgs),
    /// Simulate factor, GOP and accounts; write the path bundle as CSV.
    Simulate(RunArgs),
    /// Solve the bond, spot-spread and forward-spread PDEs.
    Solve(RunArgs),
    /// Build the term-structure report at the model's initial state.
    Curve(RunArgs),
    /// Verify the control representations of bond, spot and forward spreads.
    VerifyControl(RunArgs),
    /// Endogenize the spread and test the martingale closure.
    RsSpread(RunArgs),
    /// Everything above plus plot-ready CSV series.
    Report(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::CheckModel(a)
            | Command::Simulate(a)
            | Command::Solve(a)
            | Command::Curve(a)
            | Command::VerifyControl(a)
            | Command::RsSpread(a)
            | Command::Report(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::CheckModel(_) => "check-model",
            Command::Simulate(_) => "simulate",
            Command::Solve(_) => "solve",
            Command::Curve(_) => "curve",
            Command::VerifyControl(_) => "verify-control",
            Command::RsSpread(_) => "rs-spread",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize)]
struct RunArgs {
    /// Factor model JSON.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, env = "ROLLOVER_SEED", default_value_t = 42)]
    seed: u64,
    /// Monte Carlo time step.
    #[arg(long)]
    dt: Option<f64>,
    /// Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// PDE grid as NX,NT (NT is levels per year for `curve`).
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    /// Comma-separated eta values; those in (0, 1) go to the lower branch.
    #[arg(long, value_delimiter = ',')]
    etas: Option<Vec<f64>>,
    /// Comma-separated perturbation sizes.
    #[arg(long, value_delimiter = ',')]
    epsilons: Option<Vec<f64>>,
    /// Risk-aversion parameter of the risk-sensitive investor.
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    maturities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    tenors: Option<Vec<f64>>,
    /// Probe points as t:x pairs, comma-separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_probe, allow_hyphen_values = true)]
    probes: Option<Vec<(f64, f64)>>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Asset market JSON for `rs-spread`; defaults to a single asset
    /// implied by the model.
    #[arg(long)]
    market: Option<PathBuf>,
    /// Run Monte Carlo loops sequentially.
    #[arg(long)]
    sequential: bool,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum MethodArg {
    Pde,
    Mc,
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected NX,NT")?;
    let nx = a.trim().parse().map_err(|e| format!("NX: {e}"))?;
    let nt = b.trim().parse().map_err(|e| format!("NT: {e}"))?;
    Ok((nx, nt))
}

fn parse_probe(s: &str) -> Result<(f64, f64), String> {
    let (t, x) = s.split_once(':').ok_or("expected t:x")?;
    let t = t.trim().parse().map_err(|e| format!("t: {e}"))?;
    let x = x.trim().parse().map_err(|e| format!("x: {e}"))?;
    Ok((t, x))
}

/// Output directory named on a command line clap rejected.
fn out_dir_from_raw(args: &[String]) -> PathBuf {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--out" {
            if let Some(v) = it.next() {
                return PathBuf::from(v);
            }
        } else if let Some(v) = a.strip_prefix("--out=") {
            return PathBuf::from(v);
        }
    }
    PathBuf::from("out")
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&raw) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let mut m = RunManifest::new(raw.get(1).map(String::as_str).unwrap_or(""), serde_json::Value::Null);
            m.fail_config(e.to_string().lines().next().unwrap_or_default().to_string());
            let _ = m.write(&out_dir_from_raw(&raw));
            return ExitCode::from(2);
        }
    };
    let command = cli.command;
    let args = command.args().clone();
    let config = serde_json::to_value(&args).unwrap_or(serde_json::Value::Null);
    let mut manifest = RunManifest::new(command.name(), config);
    let outcome = commands::run(command, &args, &mut manifest);
    if let Err(e) = outcome {
        manifest.record_error(&e);
    }
    if let Err(e) = manifest.write(&args.out) {
        eprintln!("rollover: cannot write manifest: {e}");
        return ExitCode::from(2);
    }
    for f in manifest.failures() {
        eprintln!("FAIL {f}");
    }
    match manifest.status {
        Status::Pass => ExitCode::SUCCESS,
        Status::Fail => ExitCode::from(1),
        Status::ConfigError => {
            if let Some(e) = &manifest.error {
                eprintln!("rollover: {e}");
            }
            ExitCode::from(2)
        }
    }
}

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rollover::control::{self, VerificationReport, VerifyConfig};
use rollover::curves::{self, Method, ReportConfig, TermStructureReport};
use rollover::model::gop_consistency_residuals;
use rollover::pde::{self, Grid1D, GridFunction, SolverOptions};
use rollover::risk::{self, AssetMarketSpec, RiskParams};
use rollover::sim::{self, Series, SimConfig};
use rollover::{Execution, FactorModelSpec};

use crate::manifest::RunManifest;
use crate::{Command, MethodArg, RunArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Library(#[from] rollover::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    /// Configuration problems exit with 2; numerical breakdowns count as a
    /// failed check.
    pub fn is_config(&self) -> bool {
        !matches!(
            self,
            CliError::Library(rollover::Error::NonFinite(_) | rollover::Error::SingularSystem { .. })
        )
    }
}

type Result<T> = std::result::Result<T, CliError>;

const DEFAULT_MATURITIES: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 5.0];
const DEFAULT_ETAS: [f64; 6] = [0.25, 0.5, 0.75, 1.5, 2.0, 4.0];

struct Ctx<'a> {
    args: &'a RunArgs,
    model: FactorModelSpec,
}

impl Ctx<'_> {
    fn execution(&self) -> Execution {
        if self.args.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn sim(&self, t_end: f64, dt: f64, paths: usize) -> SimConfig {
        SimConfig::new(0.0, t_end, self.args.dt.unwrap_or(dt), self.args.paths.unwrap_or(paths), self.args.seed)
            .execution(self.execution())
    }

    fn maturity(&self) -> f64 {
        self.args.maturities.as_ref().and_then(|m| m.first().copied()).unwrap_or(1.0)
    }

    fn delta(&self) -> f64 {
        self.args.tenors.as_ref().and_then(|m| m.first().copied()).unwrap_or(0.5)
    }

    fn grid(&self) -> (usize, usize) {
        self.args.grid.unwrap_or((400, 400))
    }

    fn write(&self, m: &mut RunManifest, name: &str, f: impl FnOnce(&mut dyn Write) -> rollover::Result<()>) -> Result<()> {
        let path = self.args.out.join(name);
        let file = fs::File::create(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        let mut w = BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|source| CliError::Io { path, source })?;
        m.artifact(name);
        Ok(())
    }

    fn write_text(&self, m: &mut RunManifest, name: &str, text: &str) -> Result<()> {
        self.write(m, name, |w| {
            w.write_all(text.as_bytes())?;
            if !text.ends_with('\n') {
                w.write_all(b"\n")?;
            }
            Ok(())
        })
    }

    fn write_grid(&self, m: &mut RunManifest, stem: &str, u: &GridFunction) -> Result<()> {
        self.write(m, &format!("{stem}.csv"), |w| u.write_csv(w))?;
        self.write_text(m, &format!("{stem}.json"), &u.sidecar_json()?)
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn run(command: Command, args: &RunArgs, m: &mut RunManifest) -> Result<()> {
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Config(format!("cannot create output directory {}: {e}", args.out.display())))?;
    let path = args
        .model
        .as_ref()
        .ok_or_else(|| CliError::Config("--model is required".into()))?;
    let model = FactorModelSpec::from_json(&read(path)?)?;
    m.resolve("seed", args.seed);
    let ctx = Ctx { args, model };
    match command {
        Command::CheckModel(_) => m.time("check-model", |m| check_model(&ctx, m)),
        Command::Simulate(_) => m.time("simulate", |m| simulate(&ctx, m)),
        Command::Solve(_) => m.time("solve", |m| solve(&ctx, m)),
        Command::Curve(_) => m.time("curve", |m| curve(&ctx, m)).map(|_| ()),
        Command::VerifyControl(_) => m.time("verify-control", |m| verify_control(&ctx, m)),
        Command::RsSpread(_) => m.time("rs-spread", |m| rs_spread(&ctx, m)),
        Command::Report(_) => report(&ctx, m),
    }
}

/// 100 points: ten times spread over the horizon, ten states across the
/// inner 80% of the domain.
fn residual_points(model: &FactorModelSpec) -> Vec<(f64, Vec<f64>)> {
    (0..100)
        .map(|k| {
            let t = model.horizon * (0.05 + 0.9 * (k % 10) as f64 / 9.0);
            let x = (0..model.n)
                .map(|i| {
                    let frac = ((k / 10 + 3 * i) % 10) as f64 / 9.0;
                    let (lo, hi) = (model.domain.lower[i], model.domain.upper[i]);
                    lo + (hi - lo) * (0.1 + 0.8 * frac)
                })
                .collect();
            (t, x)
        })
        .collect()
}

fn check_model(ctx: &Ctx, m: &mut RunManifest) -> Result<()> {
    let residuals = gop_consistency_residuals(&ctx.model, &residual_points(&ctx.model), 1e-4)?;
    let worst = residuals.iter().map(|r| r.max_relative()).fold(0.0, f64::max);
    m.resolve("max_relative_residual", worst);
    ctx.write_text(m, "residuals.json", &serde_json::to_string_pretty(&residuals).map_err(rollover::Error::from)?)?;
    m.check("gop_consistency", worst <= 1e-6, format!("max relative residual {worst:.3e} at 100 points"));
    Ok(())
}

fn simulate(ctx: &Ctx, m: &mut RunManifest) -> Result<()> {
    let cfg = ctx.sim(ctx.maturity(), 1e-2, 1_000);
    m.resolve("sim", &cfg);
    let bundle = sim::simulate(&ctx.model, &cfg, &ctx.model.x0, 1.0)?;
    ctx.write(m, "paths.csv", |w| bundle.write_csv(w))?;
    let drift = sim::empirical_drift_test(&bundle, Series::Deflator)?;
    ctx.write_text(m, "drift.json", &serde_json::to_string_pretty(&drift).map_err(rollover::Error::from)?)?;
    m.check(
        "reliable",
        bundle.reliable(),
        format!("{:.4}% reflected steps, {} non-finite", 100.0 * bundle.flagged_fraction(), bundle.non_finite),
    );
    m.check("deflator_drift", drift.passes(3.0), format!("z = {:.3}", drift.z));
    Ok(())
}

fn solve(ctx: &Ctx, m: &mut RunManifest) -> Result<()> {
    let (maturity, delta) = (ctx.maturity(), ctx.delta());
    let (n_x, n_t) = ctx.grid();
    let grid = Grid1D::over_domain(&ctx.model, 0.0, maturity, n_x, n_t)?;
    let opts = SolverOptions::default();
    m.resolve("grid", grid);
    m.resolve("solver", opts);
    m.resolve("delta", delta);
    let fwd = pde::solve_forward_spread(&ctx.model, &grid, delta, opts)?;
    let spot = pde::solve_spot_spread(&ctx.model, &grid, opts)?;
    ctx.write_grid(m, "zcb", &fwd.p_hat)?;
    ctx.write_grid(m, "spot", &spot)?;
    ctx.write_grid(m, "forward", &fwd.s_fwd)?;
    let long = fwd.s_long.row_at(maturity)?;
    let gap = long
        .iter()
        .zip(fwd.s_fwd.row(grid.n_t - 1))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    m.check("forward_terminal", gap <= 1e-10, format!("max gap {gap:.3e}"));
    if ctx.model.phi_nonnegative() {
        let min = spot.min().min(fwd.s_fwd.min());
        m.check("spread_floor", min >= 1.0 - 1e-8, format!("grid minimum {min:.12}"));
    }
    Ok(())
}

fn curve(ctx: &Ctx, m: &mut RunManifest) -> Result<TermStructureReport> {
    let maturities = ctx.args.maturities.clone().unwrap_or_else(|| DEFAULT_MATURITIES.to_vec());
    let tenors = ctx.args.tenors.clone().unwrap_or_else(|| curves::DEFAULT_TENORS.to_vec());
    let (n_x, levels) = ctx.grid();
    let config = ReportConfig {
        method: match ctx.args.method {
            Some(MethodArg::Mc) => Method::Mc,
            _ => Method::Pde,
        },
        n_x,
        levels_per_year: levels,
        solver: SolverOptions::default(),
        sim: ctx.sim(1.0, 1e-3, 10_000),
    };
    m.resolve("report", &config);
    m.resolve("maturities", &maturities);
    m.resolve("tenors", &tenors);
    let report = curves::term_structure_report(&ctx.model, 0.0, &ctx.model.x0, &maturities, &tenors, &config)?;
    ctx.write_text(m, "curve.json", &report.to_json()?)?;
    ctx.write(m, "curve.csv", |w| report.write_csv(w))?;
    ctx.write(m, "curve_maturities.csv", |w| report.write_maturity_csv(w))?;
    ctx.write(m, "spread_vs_maturity.csv", |w| {
        writeln!(w, "T,S,L,F")?;
        for r in &report.maturities {
            let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", r.maturity, r.spot_spread, opt(r.term_rate), opt(r.simple_rate))?;
        }
        Ok(())
    })?;
    m.check(
        "spread_floor",
        report.flags.is_empty(),
        if report.flags.is_empty() { "no spread below 1".to_string() } else { report.flags.join("; ") },
    );
    if ctx.model.phi.is_zero() && config.method == Method::Pde {
        let (spot, fwd) = report.single_curve_gap();
        m.check("single_curve", spot <= 1e-10 && fwd <= 1e-10, format!("max |S - 1| {spot:.2e}, max |L - F| {fwd:.2e}"));
    }
    Ok(report)
}

fn default_probes(model: &FactorModelSpec, maturity: f64) -> Vec<(f64, f64)> {
    let x0 = model.x0[0];
    let sd = (model.domain.upper[0] - model.domain.lower[0]) / 12.0;
    vec![
        (0.0, x0),
        (0.0, x0 - sd),
        (0.25 * maturity, x0 + sd),
        (0.5 * maturity, x0 - 0.5 * sd),
        (0.5 * maturity, x0 + 0.5 * sd),
    ]
}

fn verify_control(ctx: &Ctx, m: &mut RunManifest) -> Result<()> {
    let (maturity, delta) = (ctx.maturity(), ctx.delta());
    let etas = ctx.args.etas.clone().unwrap_or_else(|| DEFAULT_ETAS.to_vec());
    let lower: Vec<f64> = etas.iter().copied().filter(|e| *e > 0.0 && *e < 1.0).collect();
    let upper: Vec<f64> = etas.iter().copied().filter(|e| !(*e > 0.0 && *e < 1.0)).collect();
    if lower.is_empty() || upper.is_empty() {
        return Err(CliError::Config("--etas needs values on both sides of 1".into()));
    }
    if ctx.model.n != 1 {
        return Err(rollover::Error::NotOneFactor(ctx.model.n).into());
    }
    let (n_x, n_t) = ctx.grid();
    let mut config = VerifyConfig {
        n_x,
        n_t,
        sim: ctx.sim(maturity, 2e-3, 10_000),
        ..VerifyConfig::default()
    };
    if let Some(eps) = &ctx.args.epsilons {
        config.epsilons = eps.clone();
    }
    let probes = ctx.args.probes.clone().unwrap_or_else(|| default_probes(&ctx.model, maturity));
    m.resolve("verify", &config);
    m.resolve("probes", &probes);
    m.resolve("maturity", maturity);
    m.resolve("delta", delta);
    let bond = m.time("bond", |_| control::verify_bond_representation(&ctx.model, maturity, &config, &probes))?;
    let spot = m.time("spot", |_| {
        control::verify_spot_representation(&ctx.model, maturity, &lower, &upper, &config, &probes)
    })?;
    let forward = m.time("forward", |_| {
        control::verify_fwd_representation(&ctx.model, maturity, delta, &lower, &upper, &config, &probes)
    })?;
    let reports = [bond, spot, forward];
    let mut text = String::new();
    for r in &reports {
        ctx.write_text(m, &format!("verify_{}.json", r.problem), &r.to_json()?)?;
        text.push_str(&r.to_text());
        for c in &r.clauses {
            m.check(format!("{}.{}", r.problem, c.name), c.passed, c.detail.clone());
        }
    }
    ctx.write_text(m, "verify.txt", &text)?;
    ctx.write(m, "eta_identity.csv", |w| write_eta_identity(w, &reports))?;
    Ok(())
}

fn write_eta_identity(w: &mut dyn Write, reports: &[VerificationReport]) -> rollover::Result<()> {
    writeln!(w, "problem,eta,t,x,mc_transformed,mc_stderr,pde,error")?;
    for r in reports {
        for row in &r.identities {
            let Some(eta) = row.eta else { continue };
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.problem, eta, row.t, row.x, row.transformed, row.transformed_stderr, row.pde_value, row.error
            )?;
        }
    }
    Ok(())
}

fn market(ctx: &Ctx) -> Result<AssetMarketSpec> {
    match &ctx.args.market {
        Some(p) => Ok(AssetMarketSpec::from_json(&read(p)?)?),
        None => {
            let d = ctx.model.d;
            let sigma = (0..d * d).map(|k| if k % (d + 1) == 0 { 0.2 } else { 0.0 }).collect();
            Ok(AssetMarketSpec::implied_by(&ctx.model, sigma)?)
        }
    }
}

fn rs_spread(ctx: &Ctx, m: &mut RunManifest) -> Result<()> {
    let gamma = ctx.args.gamma.unwrap_or(-1.0);
    let market = market(ctx)?;
    let params = RiskParams::new(gamma, ctx.model.n)?;
    let model = risk::rs_spread_pipeline(&ctx.model, &market, &params)?;
    ctx.write_text(m, "rs_model.json", &model.to_json()?)?;
    let cfg = ctx.sim(ctx.maturity(), 1e-3, 100_000);
    let cfg = cfg.clone().record_stride(cfg.n_steps());
    m.resolve("gamma", gamma);
    m.resolve("market", &market);
    m.resolve("sim", &cfg);
    let report = risk::verify_rs_martingale(&model, &market, &params, &cfg)?;
    ctx.write_text(m, "martingale.json", &serde_json::to_string_pretty(&report).map_err(rollover::Error::from)?)?;
    m.check("martingale", report.passes, format!("drift z = {:.3}", report.drift.z));
    let x0 = ctx.model.x0.clone();
    ctx.write(m, "phi_vs_gamma.csv", |w| {
        writeln!(w, "gamma,phi")?;
        for k in 0..=40 {
            let g = -0.125 * k as f64;
            let p = RiskParams::new(g, ctx.model.n)?;
            let phi = risk::rs_spread_pipeline(&ctx.model, &market, &p)?.phi.eval_scalar(0.0, &x0);
            writeln!(w, "{g},{phi}")?;
        }
        Ok(())
    })?;
    Ok(())
}

fn report(ctx: &Ctx, m: &mut RunManifest) -> Result<()> {
    m.time("check-model", |m| check_model(ctx, m))?;
    m.time("solve", |m| solve(ctx, m))?;
    m.time("curve", |m| curve(ctx, m))?;
    m.time("verify-control", |m| verify_control(ctx, m))?;
    m.time("rs-spread", |m| rs_spread(ctx, m))
}

//! Term-structure outputs: zero-coupon prices, simple and term rates, spot
//! and forward spreads and single-period swap values.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::FactorModelSpec;
use crate::pde::{self, Grid1D, SolverOptions};
use crate::rng::mix_seed;
use crate::sim::{self, SimConfig};

/// Term rate from the rolled-over repayment value `a` and the bond price
/// `p`: `L = (a / p - 1) / tau`.
pub fn term_rate(a: f64, p: f64, tau: f64) -> Result<f64> {
    positive("P", p)?;
    positive("tau", tau)?;
    Ok((a / p - 1.0) / tau)
}

/// Simple forward rate `F_t(T, T + delta) = (P_T / P_Td - 1) / delta`.
pub fn simple_forward(p_t: f64, p_td: f64, delta: f64) -> Result<f64> {
    positive("P(t,T)", p_t)?;
    positive("P(t,T+delta)", p_td)?;
    positive("delta", delta)?;
    Ok((p_t / p_td - 1.0) / delta)
}

/// Forward term rate implied by the multiplicative spread:
/// `L = ((1 + delta F) S - 1) / delta`, evaluated as `F S + (S - 1) / delta`
/// so that a unit spread returns `F` unchanged.
pub fn forward_term_rate(spread: f64, f: f64, delta: f64) -> Result<f64> {
    positive("spread", spread)?;
    positive("delta", delta)?;
    Ok(f * spread + (spread - 1.0) / delta)
}

/// Multiplicative spread `(1 + delta L) / (1 + delta F)`.
pub fn forward_spread_from_rates(l: f64, f: f64, delta: f64) -> Result<f64> {
    positive("delta", delta)?;
    let den = 1.0 + delta * f;
    if !(den > 0.0) {
        return Err(Error::invalid("F", "1 + delta F must be positive"));
    }
    Ok((1.0 + delta * l) / den)
}

/// Single-period swap value `delta (L - R) P(t, T + delta)`.
pub fn sps_value(l: f64, fixed: f64, delta: f64, p_td: f64) -> Result<f64> {
    positive("delta", delta)?;
    positive("P(t,T+delta)", p_td)?;
    Ok(delta * (l - fixed) * p_td)
}

fn positive(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Pde,
    Mc,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pde" => Ok(Method::Pde),
            "mc" => Ok(Method::Mc),
            other => Err(Error::invalid("method", format!("expected pde or mc, got {other}"))),
        }
    }
}

pub const DEFAULT_TENORS: [f64; 3] = [0.25, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub method: Method,
    /// Space nodes of every PDE grid.
    pub n_x: usize,
    /// Time levels per unit of time of every PDE grid (at least 2 levels).
    pub levels_per_year: usize,
    pub solver: SolverOptions,
    /// Monte Carlo settings; the time window is set per estimate.
    pub sim: SimConfig,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            method: Method::Pde,
            n_x: 400,
            levels_per_year: 400,
            solver: SolverOptions::default(),
            sim: SimConfig::new(0.0, 1.0, 1e-3, 100_000, 42),
        }
    }
}

impl ReportConfig {
    fn grid(&self, model: &FactorModelSpec, t: f64, maturity: f64) -> Result<Grid1D> {
        let n_t = (((maturity - t) * self.levels_per_year as f64).round() as usize).max(1) + 1;
        Grid1D::over_domain(model, t, maturity, self.n_x, n_t)
    }

    fn execution(&self) -> Execution {
        self.sim.execution
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaturityRow {
    pub maturity: f64,
    pub zcb: f64,
    pub zcb_stderr: Option<f64>,
    pub benchmarked_zcb: f64,
    /// `F(t, T)`; absent at `T = t`.
    pub simple_rate: Option<f64>,
    /// `S(t, T) = A(t, T)`.
    pub spot_spread: f64,
    pub spot_spread_stderr: Option<f64>,
    /// `L(t, T)`; absent at `T = t`.
    pub term_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TenorRow {
    pub maturity: f64,
    pub delta: f64,
    /// `P(t, T + delta)`.
    pub zcb_long: f64,
    /// `F_t(T, T + delta)`.
    pub simple_forward: f64,
    /// `S_t(T, T + delta)`.
    pub forward_spread: f64,
    pub forward_spread_stderr: Option<f64>,
    /// `L_t(T, T + delta)`.
    pub forward_term_rate: f64,
    /// `S(t, T + delta)`.
    pub spot_spread_long: f64,
    /// Swap value at the par rate `R = L`.
    pub sps_par: f64,
    /// Swap value at `R = F`, i.e. the value of the spread leg.
    pub sps_at_forward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    pub method: Method,
    pub n_x: Option<usize>,
    pub levels_per_year: Option<usize>,
    pub scheme_theta: Option<f64>,
    pub dt: Option<f64>,
    pub n_paths: Option<usize>,
    pub seed: Option<u64>,
    /// Tolerance used for the `S >= 1` flag.
    pub spread_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStructureReport {
    pub t: f64,
    pub x: Vec<f64>,
    pub v_star: f64,
    pub maturities: Vec<MaturityRow>,
    pub tenors: Vec<TenorRow>,
    /// Spreads below 1 although the model declares `phi >= 0`.
    pub flags: Vec<String>,
    pub settings: ReportSettings,
}

impl TermStructureReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per `(T, delta)`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "t,T,delta,P_T,P_T_delta,p_hat_T,S_T,F_fwd,S_fwd,S_fwd_stderr,L_fwd,S_T_delta,sps_par,sps_at_forward"
        )?;
        for row in &self.tenors {
            let m = self
                .maturities
                .iter()
                .find(|m| m.maturity == row.maturity)
                .ok_or_else(|| Error::Inconsistent("tenor row without maturity row".into()))?;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.t,
                row.maturity,
                row.delta,
                m.zcb,
                row.zcb_long,
                m.benchmarked_zcb,
                m.spot_spread,
                row.simple_forward,
                row.forward_spread,
                opt(row.forward_spread_stderr),
                row.forward_term_rate,
                row.spot_spread_long,
                row.sps_par,
                row.sps_at_forward
            )?;
        }
        Ok(())
    }

    /// One row per maturity.
    pub fn write_maturity_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,T,P,P_stderr,p_hat,F,S,S_stderr,L")?;
        for m in &self.maturities {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                self.t,
                m.maturity,
                m.zcb,
                opt(m.zcb_stderr),
                m.benchmarked_zcb,
                opt(m.simple_rate),
                m.spot_spread,
                opt(m.spot_spread_stderr),
                opt(m.term_rate)
            )?;
        }
        Ok(())
    }

    /// Largest `|S - 1|` and `|L_t - F_t|` over the report.
    pub fn single_curve_gap(&self) -> (f64, f64) {
        let spread = self
            .maturities
            .iter()
            .map(|m| (m.spot_spread - 1.0).abs())
            .chain(self.tenors.iter().map(|r| (r.forward_spread - 1.0).abs()))
            .chain(self.tenors.iter().map(|r| (r.spot_spread_long - 1.0).abs()))
            .fold(0.0, f64::max);
        let rates = self
            .tenors
            .iter()
            .map(|r| (r.forward_term_rate - r.simple_forward).abs())
            .fold(0.0, f64::max);
        (spread, rates)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Value with an optional Monte Carlo standard error.
#[derive(Debug, Clone, Copy)]
struct Quote {
    value: f64,
    stderr: Option<f64>,
}

impl Quote {
    fn exact(value: f64) -> Self {
        Self { value, stderr: None }
    }
}

struct MaturityQuotes {
    p_hat: Quote,
    spread: Quote,
}

struct TenorQuotes {
    p_hat_long: Quote,
    forward_spread: Quote,
    spread_long: Quote,
}

/// Builds the report at `(t, x)` for sorted `maturities` and every tenor.
pub fn term_structure_report(
    model: &FactorModelSpec,
    t: f64,
    x: &[f64],
    maturities: &[f64],
    tenors: &[f64],
    config: &ReportConfig,
) -> Result<TermStructureReport> {
    model.validate()?;
    let v = model.v_star()?;
    if config.method == Method::Pde && model.n != 1 {
        return Err(Error::NotOneFactor(model.n));
    }
    sim::check_start(model, t, x)?;
    if maturities.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("maturities", "must be strictly increasing"));
    }
    if let Some(&bad) = maturities.iter().find(|&&m| m < t) {
        return Err(Error::invalid("maturities", format!("{bad} precedes the valuation time {t}")));
    }
    if tenors.iter().any(|d| !(*d > 0.0)) {
        return Err(Error::invalid("tenors", "must be positive"));
    }
    let last = maturities.last().copied().unwrap_or(t) + tenors.iter().copied().fold(0.0, f64::max);
    if last > model.horizon + 1e-12 {
        return Err(Error::invalid("maturities", format!("T + delta = {last} exceeds the horizon {}", model.horizon)));
    }
    let v_t = v.eval_scalar(t, x);
    let exec = config.execution();
    let is_spot = |m: f64| (m - t).abs() <= 1e-12;

    let mat_quotes: Vec<Result<MaturityQuotes>> = exec.map_tasks(maturities.len(), |i| {
        let m = maturities[i];
        if is_spot(m) {
            return Ok(MaturityQuotes {
                p_hat: Quote::exact(1.0 / v_t),
                spread: Quote::exact(1.0),
            });
        }
        match config.method {
            Method::Pde => {
                let grid = config.grid(model, t, m)?;
                let p = pde::solve_zcb(model, &grid, config.solver)?;
                let s = pde::solve_spot_spread(model, &grid, config.solver)?;
                Ok(MaturityQuotes {
                    p_hat: Quote::exact(p.interpolate(t, x[0])?),
                    spread: Quote::exact(s.interpolate(t, x[0])?),
                })
            }
            Method::Mc => {
                let p = sim::mc_benchmarked_zcb(model, m, t, x, &config.sim.with_seed(mix_seed(config.sim.seed, &[i as u64, 0])))?;
                let s = sim::mc_spot_spread(model, m, t, x, &config.sim.with_seed(mix_seed(config.sim.seed, &[i as u64, 1])))?;
                Ok(MaturityQuotes {
                    p_hat: Quote {
                        value: p.mean,
                        stderr: Some(p.stderr),
                    },
                    spread: Quote {
                        value: s.mean,
                        stderr: Some(s.stderr),
                    },
                })
            }
        }
    });
    let mat_quotes: Vec<MaturityQuotes> = mat_quotes.into_iter().collect::<Result<_>>()?;

    let pairs: Vec<(usize, f64)> = (0..maturities.len())
        .flat_map(|i| tenors.iter().map(move |&d| (i, d)))
        .collect();
    let ten_quotes: Vec<Result<TenorQuotes>> = exec.map_tasks(pairs.len(), |k| {
        let (i, delta) = pairs[k];
        let m = maturities[i];
        match config.method {
            Method::Pde => {
                if is_spot(m) {
                    let grid = config.grid(model, t, m + delta)?;
                    let p = pde::solve_zcb(model, &grid, config.solver)?;
                    let s = pde::solve_spot_spread(model, &grid, config.solver)?;
                    let s = Quote::exact(s.interpolate(t, x[0])?);
                    return Ok(TenorQuotes {
                        p_hat_long: Quote::exact(p.interpolate(t, x[0])?),
                        forward_spread: s,
                        spread_long: s,
                    });
                }
                let grid = config.grid(model, t, m)?;
                let sol = pde::solve_forward_spread(model, &grid, delta, config.solver)?;
                let p_long = pde::solve_zcb(model, &sol.s_long.grid, config.solver)?;
                Ok(TenorQuotes {
                    p_hat_long: Quote::exact(p_long.interpolate(t, x[0])?),
                    forward_spread: Quote::exact(sol.s_fwd.interpolate(t, x[0])?),
                    spread_long: Quote::exact(sol.s_long.interpolate(t, x[0])?),
                })
            }
            Method::Mc => {
                let seed = |kind: u64| config.sim.with_seed(mix_seed(config.sim.seed, &[1000 + k as u64, kind]));
                let p = sim::mc_benchmarked_zcb(model, m + delta, t, x, &seed(0))?;
                let long = sim::mc_spot_spread(model, m + delta, t, x, &seed(1))?;
                let long = Quote {
                    value: long.mean,
                    stderr: Some(long.stderr),
                };
                let fwd = if is_spot(m) {
                    long
                } else {
                    let f = sim::mc_forward_spread(model, m, delta, t, x, &seed(2))?;
                    Quote {
                        value: f.mean,
                        stderr: Some(f.stderr),
                    }
                };
                Ok(TenorQuotes {
                    p_hat_long: Quote {
                        value: p.mean,
                        stderr: Some(p.stderr),
                    },
                    forward_spread: fwd,
                    spread_long: long,
                })
            }
        }
    });
    let ten_quotes: Vec<TenorQuotes> = ten_quotes.into_iter().collect::<Result<_>>()?;

    let tol = |q: &Quote| q.stderr.map_or(1e-8, |se| 3.0 * se);
    let mut flags = Vec::new();
    let check_spread = |label: String, q: &Quote, flags: &mut Vec<String>| -> Result<()> {
        if !(q.value > 0.0) {
            return Err(Error::Inconsistent(format!("{label} = {} is not positive", q.value)));
        }
        if model.phi_nonnegative() && q.value < 1.0 - tol(q) {
            flags.push(format!("{label} = {} < 1 with phi >= 0", q.value));
        }
        Ok(())
    };

    let mut rows = Vec::with_capacity(maturities.len());
    for (&m, q) in maturities.iter().zip(&mat_quotes) {
        let zcb = v_t * q.p_hat.value;
        let spot = is_spot(m);
        let zcb = if spot { 1.0 } else { zcb };
        check_spread(format!("S({t}, {m})"), &q.spread, &mut flags)?;
        rows.push(MaturityRow {
            maturity: m,
            zcb,
            zcb_stderr: q.p_hat.stderr.map(|se| v_t * se),
            benchmarked_zcb: q.p_hat.value,
            simple_rate: (!spot).then(|| (1.0 / zcb - 1.0) / (m - t)),
            spot_spread: q.spread.value,
            spot_spread_stderr: q.spread.stderr,
            term_rate: if spot { None } else { Some(term_rate(q.spread.value, zcb, m - t)?) },
        });
    }
    let mut tenor_rows = Vec::with_capacity(pairs.len());
    for (&(i, delta), q) in pairs.iter().zip(&ten_quotes) {
        let m = maturities[i];
        let p_t = rows[i].zcb;
        let p_td = v_t * q.p_hat_long.value;
        let f = simple_forward(p_t, p_td, delta)?;
        check_spread(format!("S_{t}({m}, {})", m + delta), &q.forward_spread, &mut flags)?;
        let l = forward_term_rate(q.forward_spread.value, f, delta)?;
        tenor_rows.push(TenorRow {
            maturity: m,
            delta,
            zcb_long: p_td,
            simple_forward: f,
            forward_spread: q.forward_spread.value,
            forward_spread_stderr: q.forward_spread.stderr,
            forward_term_rate: l,
            spot_spread_long: q.spread_long.value,
            sps_par: sps_value(l, l, delta, p_td)?,
            sps_at_forward: sps_value(l, f, delta, p_td)?,
        });
    }

    let settings = match config.method {
        Method::Pde => ReportSettings {
            method: Method::Pde,
            n_x: Some(config.n_x),
            levels_per_year: Some(config.levels_per_year),
            scheme_theta: Some(config.solver.theta),
            dt: None,
            n_paths: None,
            seed: None,
            spread_tolerance: 1e-8,
        },
        Method::Mc => ReportSettings {
            method: Method::Mc,
            n_x: None,
            levels_per_year: None,
            scheme_theta: None,
            dt: Some(config.sim.dt),
            n_paths: Some(config.sim.n_paths),
            seed: Some(config.sim.seed),
            spread_tolerance: 3.0,
        },
    };
    Ok(TermStructureReport {
        t,
        x: x.to_vec(),
        v_star: v_t,
        maturities: rows,
        tenors: tenor_rows,
        flags,
        settings,
    })
}

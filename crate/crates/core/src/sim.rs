//! Euler–Maruyama simulation of the factor / GOP / account system and
//! Feynman–Kac Monte Carlo estimators.
//!
//! The factor uses plain Euler steps, reflected back into the box `D` when a
//! step leaves it (the step is flagged). The GOP and both accounts are
//! integrated in log space, so they stay strictly positive:
//!
//! ```text
//! log V*  += (r + |theta|^2 / 2) h + theta . dW
//! log S0  += r h
//! log S~0 += (r + phi) h
//! ```
//!
//! with all coefficients frozen at the left end of the step.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::Buf;
use crate::model::FactorModelSpec;
use crate::rng::NormalStream;
use crate::stats::{self, Estimate};

/// Share of reflected steps above which a run is flagged as unreliable.
pub const UNRELIABLE_FLAG_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    /// Keep every `record_stride`-th time level in a [`PathBundle`]
    /// (the final level is always kept).
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default)]
    pub execution: Execution,
}

fn one() -> usize {
    1
}

impl SimConfig {
    pub fn new(t0: f64, t_end: f64, dt: f64, n_paths: usize, seed: u64) -> Self {
        Self {
            t0,
            t_end,
            dt,
            n_paths,
            seed,
            antithetic: false,
            record_stride: 1,
            execution: Execution::default(),
        }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn execution(mut self, execution: Execution) -> Self {
        self.execution = execution;
        self
    }

    pub fn record_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// Same numerical settings on the window `[t0, t_end]`.
    pub fn window(&self, t0: f64, t_end: f64) -> Self {
        Self {
            t0,
            t_end,
            ..self.clone()
        }
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.t0 >= 0.0 && self.t0 < self.t_end && self.t_end <= horizon + 1e-12) {
            return Err(Error::invalid(
                "time window",
                format!("need 0 <= t0 < T <= horizon ({horizon}), got [{}, {}]", self.t0, self.t_end),
            ));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid("dt", "must be positive"));
        }
        if self.dt >= self.t_end - self.t0 {
            return Err(Error::invalid("dt", "must be smaller than T - t0"));
        }
        if self.n_paths == 0 {
            return Err(Error::invalid("n_paths", "must be at least 1"));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(Error::invalid("n_paths", "antithetic sampling needs an even path count"));
        }
        if self.record_stride == 0 {
            return Err(Error::invalid("record_stride", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of uniform steps covering the window with step `<= dt`.
    pub fn n_steps(&self) -> usize {
        (((self.t_end - self.t0) / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    pub fn step(&self) -> f64 {
        (self.t_end - self.t0) / self.n_steps() as f64
    }

    /// Runs `per_path` for every path index in order and returns the results
    /// in path order, whatever the execution mode.
    pub(crate) fn run_paths<T, F>(&self, per_path: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, &mut NormalStream) -> Result<T> + Sync + Send,
    {
        let (seed, antithetic) = (self.seed, self.antithetic);
        self.execution
            .map_indexed(self.n_paths, |p| {
                let mut normals = NormalStream::for_path(seed, p, antithetic);
                per_path(p, &mut normals)
            })
            .into_iter()
            .collect()
    }

    /// Turns per-path samples into an [`Estimate`], averaging antithetic
    /// partners first.
    pub(crate) fn estimate(&self, samples: &[f64]) -> Result<Estimate> {
        if let Some(bad) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("Monte Carlo sample of path {bad}")));
        }
        if self.antithetic {
            Ok(Estimate::from_samples(&stats::pair_means(samples), self.n_paths, self.seed))
        } else {
            Ok(Estimate::from_samples(samples, self.n_paths, self.seed))
        }
    }

    /// iid sampling units (pair means under antithetic sampling).
    pub(crate) fn units(&self, samples: &[f64]) -> Vec<f64> {
        if self.antithetic {
            stats::pair_means(samples)
        } else {
            samples.to_vec()
        }
    }
}

/// Coefficient buffers and factor state of a single path.
pub(crate) struct Walker<'m> {
    model: &'m FactorModelSpec,
    pub x: Buf,
    pub f: Buf,
    pub g: Buf,
    pub theta: Buf,
    pub r: f64,
    pub phi: f64,
    /// Drift used by the next [`advance`](Self::advance); reset to `f` by
    /// [`eval`](Self::eval) and free to be modified in between.
    pub drift: Buf,
    pub dw: Buf,
    pub flagged: u32,
}

impl<'m> Walker<'m> {
    pub fn new(model: &'m FactorModelSpec, x_start: &[f64]) -> Self {
        let (n, d) = (model.n, model.d);
        Self {
            model,
            x: SmallVec::from_slice(x_start),
            f: SmallVec::from_elem(0.0, n),
            g: SmallVec::from_elem(0.0, n * d),
            theta: SmallVec::from_elem(0.0, d),
            r: 0.0,
            phi: 0.0,
            drift: SmallVec::from_elem(0.0, n),
            dw: SmallVec::from_elem(0.0, d),
            flagged: 0,
        }
    }

    #[inline]
    pub fn eval(&mut self, t: f64) {
        let m = self.model;
        m.f.eval_into(t, &self.x, &mut self.f);
        m.g.eval_into(t, &self.x, &mut self.g);
        m.theta.eval_into(t, &self.x, &mut self.theta);
        self.r = m.r.eval_scalar(t, &self.x);
        self.phi = m.phi.eval_scalar(t, &self.x);
        self.drift.copy_from_slice(&self.f);
    }

    #[inline]
    pub fn draw(&mut self, normals: &mut NormalStream, sqrt_h: f64) {
        normals.fill_increments(sqrt_h, &mut self.dw);
    }

    /// `sum_k g[i][k] v[k]`.
    #[inline]
    pub fn g_times(&self, i: usize, v: &[f64]) -> f64 {
        let d = self.model.d;
        (0..d).map(|k| self.g[i * d + k] * v[k]).sum()
    }

    #[inline]
    pub fn theta_dot_dw(&self) -> f64 {
        self.theta.iter().zip(&self.dw).map(|(a, b)| a * b).sum()
    }

    #[inline]
    pub fn theta_sq(&self) -> f64 {
        self.theta.iter().map(|a| a * a).sum()
    }

    /// Euler step of the factor with the current drift and increments,
    /// then reflection into `D`.
    #[inline]
    pub fn advance(&mut self, h: f64) {
        let n = self.model.n;
        for i in 0..n {
            let diff = self.g_times(i, &self.dw);
            self.x[i] += self.drift[i] * h + diff;
        }
        if reflect(&mut self.x, &self.model.domain.lower, &self.model.domain.upper) {
            self.flagged += 1;
        }
    }
}

/// Mirrors coordinates that left `[lower, upper]`; returns whether any did.
pub(crate) fn reflect(x: &mut [f64], lower: &[f64], upper: &[f64]) -> bool {
    let mut hit = false;
    for ((v, &l), &u) in x.iter_mut().zip(lower).zip(upper) {
        if *v < l {
            *v = (2.0 * l - *v).min(u);
            hit = true;
        } else if *v > u {
            *v = (2.0 * u - *v).max(l);
            hit = true;
        }
    }
    hit
}

/// Jointly simulated trajectories on the recorded time grid.
///
/// Per-path arrays are stored path-major: entry `(p, k)` of a scalar series
/// sits at `p * n_times + k`; the factor adds a trailing coordinate index.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub n: usize,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub factor: Vec<f64>,
    pub gop: Vec<f64>,
    pub savings: Vec<f64>,
    pub borrowing: Vec<f64>,
    pub deflator: Vec<f64>,
    pub flagged_steps: u64,
    pub total_steps: u64,
    pub non_finite: usize,
    pub antithetic: bool,
    pub seed: u64,
}

/// A benchmarked (or plain) series derivable from a bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Series {
    /// `Y = S0 / V*`.
    Deflator,
    /// `S~0 / V*`.
    BorrowingOverGop,
    Gop,
    Savings,
    Borrowing,
}

impl PathBundle {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.total_steps == 0 {
            0.0
        } else {
            self.flagged_steps as f64 / self.total_steps as f64
        }
    }

    pub fn reliable(&self) -> bool {
        self.flagged_fraction() <= UNRELIABLE_FLAG_FRACTION && self.non_finite == 0
    }

    pub fn factor_at(&self, path: usize, k: usize) -> &[f64] {
        let start = (path * self.n_times() + k) * self.n;
        &self.factor[start..start + self.n]
    }

    pub fn series(&self, series: Series) -> Vec<f64> {
        match series {
            Series::Deflator => self.deflator.clone(),
            Series::BorrowingOverGop => self.borrowing.iter().zip(&self.gop).map(|(b, v)| b / v).collect(),
            Series::Gop => self.gop.clone(),
            Series::Savings => self.savings.clone(),
            Series::Borrowing => self.borrowing.clone(),
        }
    }

    /// One row per (path, time): `path,t,X_1..X_n,V_star,S0,S0_tilde,Y`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "path,t")?;
        for i in 1..=self.n {
            write!(w, ",X_{i}")?;
        }
        writeln!(w, ",V_star,S0,S0_tilde,Y")?;
        let nt = self.n_times();
        for p in 0..self.n_paths {
            for k in 0..nt {
                let idx = p * nt + k;
                write!(w, "{p},{}", self.times[k])?;
                for v in self.factor_at(p, k) {
                    write!(w, ",{v}")?;
                }
                writeln!(
                    w,
                    ",{},{},{},{}",
                    self.gop[idx], self.savings[idx], self.borrowing[idx], self.deflator[idx]
                )?;
            }
        }
        Ok(())
    }

    /// Columnar little-endian dump: magic `RRPB`, version byte, then
    /// `n_paths, n_times, n` as u64, the time grid, the factor coordinates
    /// (one column each) and the four scalar series.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"RRPB\x01")?;
        for v in [self.n_paths as u64, self.n_times() as u64, self.n as u64] {
            w.write_all(&v.to_le_bytes())?;
        }
        let put = |w: &mut W, xs: &mut dyn Iterator<Item = f64>| -> std::io::Result<()> {
            for x in xs {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        };
        put(&mut w, &mut self.times.iter().copied())?;
        for i in 0..self.n {
            put(&mut w, &mut self.factor.iter().skip(i).step_by(self.n).copied())?;
        }
        for col in [&self.gop, &self.savings, &self.borrowing, &self.deflator] {
            put(&mut w, &mut col.iter().copied())?;
        }
        Ok(())
    }

    /// Reads the columnar dump back. Flag counters are not stored.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != b"RRPB\x01" {
            return Err(Error::invalid("binary dump", "bad magic"));
        }
        let mut u = [0u8; 8];
        let mut next_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u)?;
            Ok(u64::from_le_bytes(u))
        };
        let n_paths = next_u64(&mut r)? as usize;
        let nt = next_u64(&mut r)? as usize;
        let n = next_u64(&mut r)? as usize;
        let mut read_col = |len: usize| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(len);
            let mut b = [0u8; 8];
            for _ in 0..len {
                r.read_exact(&mut b)?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        };
        let times = read_col(nt)?;
        let mut factor = vec![0.0; n_paths * nt * n];
        for i in 0..n {
            for (j, v) in read_col(n_paths * nt)?.into_iter().enumerate() {
                factor[j * n + i] = v;
            }
        }
        let gop = read_col(n_paths * nt)?;
        let savings = read_col(n_paths * nt)?;
        let borrowing = read_col(n_paths * nt)?;
        let deflator = read_col(n_paths * nt)?;
        Ok(Self {
            n,
            times,
            n_paths,
            factor,
            gop,
            savings,
            borrowing,
            deflator,
            flagged_steps: 0,
            total_steps: 0,
            non_finite: 0,
            antithetic: false,
            seed: 0,
        })
    }
}

struct PathRecord {
    factor: Vec<f64>,
    log_gop: Vec<f64>,
    log_savings: Vec<f64>,
    log_borrowing: Vec<f64>,
    flagged: u32,
}

/// Simulates the joint system on `[config.t0, config.t_end]` from
/// `(x_start, v_start)`; both accounts start at 1.
pub fn simulate(
    model: &FactorModelSpec,
    config: &SimConfig,
    x_start: &[f64],
    v_start: f64,
) -> Result<PathBundle> {
    config.validate(model.horizon)?;
    check_start(model, config.t0, x_start)?;
    if !(v_start > 0.0 && v_start.is_finite()) {
        return Err(Error::invalid("v_start", "must be positive"));
    }
    let n_steps = config.n_steps();
    let h = config.step();
    let sqrt_h = h.sqrt();
    let stride = config.record_stride;
    let recorded: Vec<usize> = (0..=n_steps).filter(|k| k % stride == 0 || *k == n_steps).collect();
    let log_v0 = v_start.ln();

    let records = config.run_paths(|_, normals| {
        let mut w = Walker::new(model, x_start);
        let cap = recorded.len();
        let mut rec = PathRecord {
            factor: Vec::with_capacity(cap * model.n),
            log_gop: Vec::with_capacity(cap),
            log_savings: Vec::with_capacity(cap),
            log_borrowing: Vec::with_capacity(cap),
            flagged: 0,
        };
        let (mut lv, mut ls, mut lb) = (log_v0, 0.0f64, 0.0f64);
        let push = |rec: &mut PathRecord, x: &[f64], lv: f64, ls: f64, lb: f64| {
            rec.factor.extend_from_slice(x);
            rec.log_gop.push(lv);
            rec.log_savings.push(ls);
            rec.log_borrowing.push(lb);
        };
        push(&mut rec, &w.x, lv, ls, lb);
        for k in 0..n_steps {
            let t = config.t0 + k as f64 * h;
            w.eval(t);
            w.draw(normals, sqrt_h);
            lv += (w.r + 0.5 * w.theta_sq()) * h + w.theta_dot_dw();
            ls += w.r * h;
            lb += (w.r + w.phi) * h;
            w.advance(h);
            if (k + 1) % stride == 0 || k + 1 == n_steps {
                push(&mut rec, &w.x, lv, ls, lb);
            }
        }
        rec.flagged = w.flagged;
        Ok(rec)
    })?;

    let nt = recorded.len();
    let mut bundle = PathBundle {
        n: model.n,
        times: recorded.iter().map(|&k| config.t0 + k as f64 * h).collect(),
        n_paths: config.n_paths,
        factor: Vec::with_capacity(config.n_paths * nt * model.n),
        gop: Vec::with_capacity(config.n_paths * nt),
        savings: Vec::with_capacity(config.n_paths * nt),
        borrowing: Vec::with_capacity(config.n_paths * nt),
        deflator: Vec::with_capacity(config.n_paths * nt),
        flagged_steps: 0,
        total_steps: (config.n_paths * n_steps) as u64,
        non_finite: 0,
        antithetic: config.antithetic,
        seed: config.seed,
    };
    for rec in records {
        bundle.flagged_steps += rec.flagged as u64;
        bundle.factor.extend_from_slice(&rec.factor);
        for k in 0..nt {
            let (lv, ls, lb) = (rec.log_gop[k], rec.log_savings[k], rec.log_borrowing[k]);
            let vals = [lv.exp(), ls.exp(), lb.exp(), (ls - lv).exp()];
            if vals.iter().any(|v| !v.is_finite()) {
                bundle.non_finite += 1;
            }
            bundle.gop.push(vals[0]);
            bundle.savings.push(vals[1]);
            bundle.borrowing.push(vals[2]);
            bundle.deflator.push(vals[3]);
        }
    }
    Ok(bundle)
}

pub(crate) fn check_start(model: &FactorModelSpec, t: f64, x: &[f64]) -> Result<()> {
    if x.len() != model.n {
        return Err(Error::Dimension {
            context: "start point",
            expected: model.n,
            actual: x.len(),
        });
    }
    if !model.domain.contains(x) {
        return Err(Error::OutOfDomain {
            t,
            point: x.to_vec(),
            reason: "start point not in D".into(),
        });
    }
    Ok(())
}

/// Terminal state handed to payoff functions.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalState {
    pub x: Vec<f64>,
    pub gop: f64,
    pub savings: f64,
    pub borrowing: f64,
}

/// Per-path quantities of a plain (uncontrolled) walk from `t` to `t_end`.
struct PlainPath {
    x_end: Buf,
    int_r: f64,
    int_phi: f64,
    log_gop: f64,
}

fn plain_walk(
    model: &FactorModelSpec,
    cfg: &SimConfig,
    x: &[f64],
    normals: &mut NormalStream,
) -> PlainPath {
    let n_steps = cfg.n_steps();
    let h = cfg.step();
    let sqrt_h = h.sqrt();
    let mut w = Walker::new(model, x);
    let (mut int_r, mut int_phi, mut lv) = (0.0, 0.0, 0.0);
    for k in 0..n_steps {
        w.eval(cfg.t0 + k as f64 * h);
        w.draw(normals, sqrt_h);
        int_r += w.r * h;
        int_phi += w.phi * h;
        lv += (w.r + 0.5 * w.theta_sq()) * h + w.theta_dot_dw();
        w.advance(h);
    }
    PlainPath {
        x_end: w.x,
        int_r,
        int_phi,
        log_gop: lv,
    }
}

fn estimator_setup(
    model: &FactorModelSpec,
    maturity: f64,
    t: f64,
    x: &[f64],
    config: &SimConfig,
) -> Result<SimConfig> {
    let cfg = config.window(t, maturity);
    cfg.validate(model.horizon)?;
    check_start(model, t, x)?;
    Ok(cfg)
}

/// Spot spread `S(t, T) = v*(t,x) E[exp(int_t^T (r + phi)) / v*(T, X_T)]`.
///
/// The time window of `config` is replaced by `[t, maturity]`.
pub fn mc_spot_spread(
    model: &FactorModelSpec,
    maturity: f64,
    t: f64,
    x: &[f64],
    config: &SimConfig,
) -> Result<Estimate> {
    let v = model.v_star()?;
    let cfg = estimator_setup(model, maturity, t, x, config)?;
    let v_t = v.eval_scalar(t, x);
    let samples = cfg.run_paths(|_, normals| {
        let p = plain_walk(model, &cfg, x, normals);
        Ok((p.int_r + p.int_phi).exp() * v_t / v.eval_scalar(maturity, &p.x_end))
    })?;
    cfg.estimate(&samples)
}

/// Benchmarked bond `p^T(t, x) = E[1 / v*(T, X_T)]`.
pub fn mc_benchmarked_zcb(
    model: &FactorModelSpec,
    maturity: f64,
    t: f64,
    x: &[f64],
    config: &SimConfig,
) -> Result<Estimate> {
    let v = model.v_star()?;
    let cfg = estimator_setup(model, maturity, t, x, config)?;
    let samples = cfg.run_paths(|_, normals| {
        let p = plain_walk(model, &cfg, x, normals);
        Ok(1.0 / v.eval_scalar(maturity, &p.x_end))
    })?;
    cfg.estimate(&samples)
}

/// ZCB price `P(t, T) = v*(t, x) p^T(t, x)`.
pub fn mc_zcb_price(
    model: &FactorModelSpec,
    maturity: f64,
    t: f64,
    x: &[f64],
    config: &SimConfig,
) -> Result<Estimate> {
    let v_t = model.v_star()?.eval_scalar(t, x);
    Ok(mc_benchmarked_zcb(model, maturity, t, x, config)?.scaled(v_t))
}

/// Forward spread `S_t(T, T + delta)` without nested simulation.
///
/// Under fair pricing `S_t(T,T+d) p^T(t,x) = E[S(T,T+d) / v*(T, X_T)]`, and
/// by the tower property the inner spot spread collapses into
/// `E[exp(int_T^{T+d} (r + phi)) / v*(T+d, X_{T+d})]`. Both numerator and
/// denominator come from the same paths; the standard error is the
/// delta-method one of the ratio.
pub fn mc_forward_spread(
    model: &FactorModelSpec,
    maturity: f64,
    delta: f64,
    t: f64,
    x: &[f64],
    config: &SimConfig,
) -> Result<Estimate> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta", "must be positive"));
    }
    if maturity < t {
        return Err(Error::invalid("maturity", "must not precede the valuation time"));
    }
    let v = model.v_star()?;
    let cfg = estimator_setup(model, maturity + delta, t, x, config)?;
    let n_steps = cfg.n_steps();
    let h = cfg.step();
    // Index of the first step starting at or after T.
    let k_mat = (((maturity - t) / h) - 1e-9).ceil().max(0.0) as usize;
    let t_mat = t + k_mat as f64 * h;
    let pairs = cfg.run_paths(|_, normals| {
        let sqrt_h = h.sqrt();
        let mut w = Walker::new(model, x);
        let mut den = if k_mat == 0 { 1.0 / v.eval_scalar(t_mat, &w.x) } else { f64::NAN };
        let mut int_rate = 0.0;
        for k in 0..n_steps {
            w.eval(t + k as f64 * h);
            w.draw(normals, sqrt_h);
            if k >= k_mat {
                int_rate += (w.r + w.phi) * h;
            }
            w.advance(h);
            if k + 1 == k_mat {
                den = 1.0 / v.eval_scalar(t_mat, &w.x);
            }
        }
        let num = int_rate.exp() / v.eval_scalar(maturity + delta, &w.x);
        Ok((num, den))
    })?;
    let (num, den): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let (num, den) = (cfg.units(&num), cfg.units(&den));
    if num.iter().chain(&den).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("forward spread sample".into()));
    }
    let (mean, stderr) = stats::ratio_estimate(&num, &den);
    Ok(Estimate {
        mean,
        stderr,
        n_paths: cfg.n_paths,
        seed: cfg.seed,
    })
}

/// Real-world price `pi_t(H) = v*(t,x) E[H / V*_T]` of a terminal payoff.
/// Accounts restart at 1 at time `t`; the GOP starts at `v*(t, x)`.
pub fn real_world_price<F>(
    model: &FactorModelSpec,
    payoff: F,
    t: f64,
    x: &[f64],
    maturity: f64,
    config: &SimConfig,
) -> Result<Estimate>
where
    F: Fn(&TerminalState) -> f64 + Sync + Send,
{
    let v = model.v_star()?;
    let cfg = estimator_setup(model, maturity, t, x, config)?;
    let v_t = v.eval_scalar(t, x);
    let log_v_t = v_t.ln();
    let samples = cfg.run_paths(|p_idx, normals| {
        let p = plain_walk(model, &cfg, x, normals);
        let state = TerminalState {
            x: p.x_end.to_vec(),
            gop: (log_v_t + p.log_gop).exp(),
            savings: p.int_r.exp(),
            borrowing: (p.int_r + p.int_phi).exp(),
        };
        let h = payoff(&state);
        if !h.is_finite() {
            return Err(Error::NonFinite(format!("payoff on path {p_idx}")));
        }
        Ok(h / state.gop)
    })?;
    Ok(cfg.estimate(&samples)?.scaled(v_t))
}

/// Outcome of a zero-drift test on per-step increments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftTest {
    /// Mean of all per-step increments.
    pub mean: f64,
    /// Standard error of `mean`, clustered by path (by antithetic pair when
    /// applicable), so within-path dependence does not understate it.
    pub stderr: f64,
    pub z: f64,
    pub n_increments: usize,
}

impl DriftTest {
    pub fn passes(&self, z_max: f64) -> bool {
        self.z.abs() <= z_max
    }
}

/// Zero-drift test for a benchmarked series of a bundle.
pub fn empirical_drift_test(bundle: &PathBundle, series: Series) -> Result<DriftTest> {
    drift_test(&bundle.series(series), bundle.n_paths, bundle.n_times(), bundle.antithetic)
}

/// Zero-drift test for path-major values (`n_paths x n_times`).
pub fn drift_test(values: &[f64], n_paths: usize, n_times: usize, antithetic: bool) -> Result<DriftTest> {
    if n_times < 2 {
        return Err(Error::invalid("series", "need at least 2 time steps"));
    }
    if values.len() != n_paths * n_times {
        return Err(Error::Dimension {
            context: "drift test values",
            expected: n_paths * n_times,
            actual: values.len(),
        });
    }
    let steps = (n_times - 1) as f64;
    // The sum of a path's increments telescopes to last - first.
    let totals: Vec<f64> = (0..n_paths)
        .map(|p| values[p * n_times + n_times - 1] - values[p * n_times])
        .collect();
    let clusters = if antithetic && n_paths % 2 == 0 {
        stats::pair_means(&totals)
    } else {
        totals
    };
    let (mean_total, se_total) = stats::mean_stderr(&clusters);
    let mean = mean_total / steps;
    let stderr = se_total / steps;
    let z = if mean == 0.0 {
        0.0
    } else if stderr == 0.0 {
        f64::INFINITY.copysign(mean)
    } else {
        mean / stderr
    };
    if !mean.is_finite() {
        return Err(Error::NonFinite("drift test increments".into()));
    }
    Ok(DriftTest {
        mean,
        stderr,
        z,
        n_increments: n_paths * (n_times - 1),
    })
}

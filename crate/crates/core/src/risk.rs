//! Risk-sensitive representative investor: market price of risk, the
//! optimal power-utility strategy, wealth simulation and the funding-liquidity
//! spread it implies.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{ensure_finite, Error, Result};
use crate::field::{Buf, CoefficientField, SpreadComposition};
use crate::model::FactorModelSpec;
use crate::pde::{Grid1D, GridFunction};
use crate::sim::{self, DriftTest, SimConfig, Walker};
use crate::stats::{self, Estimate};

/// Smallest singular value below which a volatility matrix counts as
/// rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// `theta = sigma^+ (mu - r 1)` with `sigma` an `m x d` row-major matrix.
pub fn market_price_of_risk(mu: &[f64], sigma: &[f64], m: usize, d: usize, r: f64) -> Result<Vec<f64>> {
    check_len("mu", mu, m)?;
    check_len("sigma", sigma, m * d)?;
    let s = DMatrix::from_row_slice(m, d, sigma);
    let svd = s.svd(true, true);
    let smallest = svd.singular_values.min();
    if !(smallest > RANK_TOLERANCE) {
        return Err(Error::RankDeficient(smallest));
    }
    let pinv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
    let excess = DVector::from_iterator(m, mu.iter().map(|v| v - r));
    let theta = pinv * excess;
    let theta: Vec<f64> = theta.iter().copied().collect();
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("market price of risk".into()));
    }
    Ok(theta)
}

/// `sigma^+ sigma`, the orthogonal projection onto the row space of `sigma`
/// (`d x d`, row-major).
pub fn row_space_projection(sigma: &[f64], m: usize, d: usize) -> Result<Vec<f64>> {
    check_len("sigma", sigma, m * d)?;
    let s = DMatrix::from_row_slice(m, d, sigma);
    let svd = s.clone().svd(true, true);
    let smallest = svd.singular_values.min();
    if !(smallest > RANK_TOLERANCE) {
        return Err(Error::RankDeficient(smallest));
    }
    let pinv = svd
        .pseudo_inverse(0.0)
        .map_err(|e| Error::Inconsistent(e.to_string()))?;
    let p = pinv * s;
    Ok((0..d).flat_map(|i| (0..d).map(move |j| (i, j))).map(|(i, j)| p[(i, j)]).collect())
}

/// `g^T xi` for an `n x d` row-major `g`.
pub fn transpose_apply(g: &[f64], n: usize, d: usize, xi: &[f64]) -> Vec<f64> {
    (0..d).map(|k| (0..n).map(|i| g[i * d + k] * xi[i]).sum()).collect()
}

/// Funding-liquidity spread
/// `phi = -gamma r + theta.(theta + gamma g^T Xi)
///        - (2 - gamma) / (2 (1 - gamma)) |theta + gamma g^T Xi|^2`,
/// evaluated as `-gamma r + sum_k a_k (theta_k - c a_k)` with
/// `a = theta + gamma g^T Xi`, which is exactly zero at `gamma = 0`.
pub fn funding_liquidity_spread(r: f64, theta: &[f64], g_xi: &[f64], gamma: f64) -> f64 {
    let c = (2.0 - gamma) / (2.0 * (1.0 - gamma));
    let quad: f64 = theta
        .iter()
        .zip(g_xi)
        .map(|(&th, &gx)| {
            let a = th + gamma * gx;
            a * (th - c * a)
        })
        .sum();
    -gamma * r + quad
}

/// Checked variant of [`funding_liquidity_spread`].
pub fn funding_liquidity_spread_checked(r: f64, theta: &[f64], g_xi: &[f64], gamma: f64) -> Result<f64> {
    if theta.len() != g_xi.len() {
        return Err(Error::Dimension {
            context: "g^T Xi",
            expected: theta.len(),
            actual: g_xi.len(),
        });
    }
    check_gamma(gamma)?;
    ensure_finite("r", r)?;
    for &v in theta.iter().chain(g_xi) {
        ensure_finite("theta / g^T Xi", v)?;
    }
    Ok(funding_liquidity_spread(r, theta, g_xi, gamma))
}

fn check_len(name: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension {
            context: name,
            expected,
            actual: v.len(),
        });
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma <= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("gamma", "must be negative (0 only as a limit check)"));
    }
    Ok(())
}

/// Optimal proportions and their two-fund split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RsStrategy {
    pub pi: Vec<f64>,
    /// `pi* / (1 - gamma)` with the growth-optimal `pi* = (sigma sigma^T)^-1 sigma theta`.
    pub gop_component: Vec<f64>,
    /// `gamma / (1 - gamma) (sigma sigma^T)^-1 sigma g^T Xi`.
    pub hedging_component: Vec<f64>,
}

/// `pi = (sigma sigma^T)^-1 sigma (theta + gamma g^T Xi) / (1 - gamma)`.
pub fn rs_strategy(
    theta: &[f64],
    sigma: &[f64],
    g: &[f64],
    xi: &[f64],
    gamma: f64,
    dims: (usize, usize, usize),
) -> Result<RsStrategy> {
    let (m, d, n) = dims;
    check_len("theta", theta, d)?;
    check_len("sigma", sigma, m * d)?;
    check_len("g", g, n * d)?;
    check_len("Xi", xi, n)?;
    check_gamma(gamma)?;
    let s = DMatrix::from_row_slice(m, d, sigma);
    let gram = &s * s.transpose();
    let chol = gram.cholesky().ok_or(Error::SingularSystem { row: 0 })?;
    let a = chol.solve(&s);
    let g_xi = DVector::from_vec(transpose_apply(g, n, d, xi));
    let theta = DVector::from_column_slice(theta);
    let scale = 1.0 / (1.0 - gamma);
    let pi = (&a * (&theta + gamma * &g_xi)) * scale;
    let gop = (&a * &theta) * scale;
    let hedge = (&a * &g_xi) * (gamma * scale);
    let out = RsStrategy {
        pi: pi.iter().copied().collect(),
        gop_component: gop.iter().copied().collect(),
        hedging_component: hedge.iter().copied().collect(),
    };
    if out.pi.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("risk-sensitive strategy".into()));
    }
    Ok(out)
}

/// Traded risky assets `dS^i / S^i = mu_i dt + sigma_i . dW`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetMarketSpec {
    pub m: usize,
    pub d: usize,
    pub mu: CoefficientField,
    pub sigma: CoefficientField,
    pub s0: Vec<f64>,
}

impl AssetMarketSpec {
    pub fn constant(mu: Vec<f64>, sigma: Vec<f64>, d: usize) -> Result<Self> {
        let m = mu.len();
        let spec = Self {
            m,
            d,
            mu: CoefficientField::constant_vec(mu),
            sigma: CoefficientField::constant_vec(sigma),
            s0: vec![1.0; m],
        };
        spec.check_shapes()?;
        Ok(spec)
    }

    /// Square market with constant volatility whose drift `r 1 + sigma theta`
    /// reproduces the model's market price of risk. Needs a constant `theta`;
    /// several assets also need a constant `r`.
    pub fn implied_by(model: &FactorModelSpec, sigma: Vec<f64>) -> Result<Self> {
        let d = model.d;
        check_len("sigma", &sigma, d * d)?;
        if !model.theta.is_constant() {
            return Err(Error::invalid("theta", "implied market needs a constant market price of risk"));
        }
        let theta = model.theta.eval_vec(0.0, &model.x0);
        let premium: Vec<f64> = (0..d).map(|i| (0..d).map(|k| sigma[i * d + k] * theta[k]).sum()).collect();
        let mu = if d == 1 {
            if model.r.is_constant() {
                CoefficientField::constant(model.r.eval_scalar(0.0, &model.x0) + premium[0])
            } else {
                model.r.clone().plus(CoefficientField::constant(premium[0]))
            }
        } else {
            if !model.r.is_constant() {
                return Err(Error::invalid("r", "implied multi-asset market needs a constant short rate"));
            }
            let r = model.r.eval_scalar(0.0, &model.x0);
            CoefficientField::constant_vec(premium.iter().map(|p| r + p).collect())
        };
        let spec = Self {
            m: d,
            d,
            mu,
            sigma: CoefficientField::constant_vec(sigma),
            s0: vec![1.0; d],
        };
        spec.validate(model)?;
        Ok(spec)
    }

    fn check_shapes(&self) -> Result<()> {
        check_len("mu", &vec![0.0; self.mu.output_len()], self.m)?;
        check_len("sigma", &vec![0.0; self.sigma.output_len()], self.m * self.d)?;
        check_len("s0", &self.s0, self.m)?;
        if self.s0.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("s0", "initial prices must be positive"));
        }
        Ok(())
    }

    /// Shapes against the model and full rank of `sigma` at sample points.
    pub fn validate(&self, model: &FactorModelSpec) -> Result<()> {
        self.check_shapes()?;
        if self.d != model.d {
            return Err(Error::Dimension {
                context: "market Brownian dimension",
                expected: model.d,
                actual: self.d,
            });
        }
        for (t, x) in sample_points(model) {
            let sigma = self.sigma.eval_vec(t, &x);
            market_price_of_risk(&self.mu.eval_vec(t, &x), &sigma, self.m, self.d, 0.0)?;
        }
        Ok(())
    }

    pub fn theta_at(&self, model: &FactorModelSpec, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        market_price_of_risk(
            &self.mu.eval_vec(t, x),
            &self.sigma.eval_vec(t, x),
            self.m,
            self.d,
            model.r.eval_scalar(t, x),
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let spec: Self = serde_json::from_str(s)?;
        spec.check_shapes()?;
        Ok(spec)
    }
}

/// Times `{0, H/2, H}` crossed with the centre, `x0` and the face centres
/// of the domain.
fn sample_points(model: &FactorModelSpec) -> Vec<(f64, Vec<f64>)> {
    let center = model.domain.center();
    let mut xs = vec![center.clone(), model.x0.clone()];
    for i in 0..model.n {
        for edge in [model.domain.lower[i], model.domain.upper[i]] {
            let mut x = center.clone();
            x[i] = edge;
            xs.push(x);
        }
    }
    let ts = [0.0, 0.5 * model.horizon, model.horizon];
    ts.iter().flat_map(|&t| xs.iter().map(move |x| (t, x.clone()))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskParams {
    pub gamma: f64,
    /// Gradient term of the investor's value function (`n`-vector field).
    pub xi: CoefficientField,
}

impl RiskParams {
    /// `Xi = 0`, exact when all coefficients are constant.
    pub fn new(gamma: f64, n: usize) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            gamma,
            xi: CoefficientField::constant_vec(vec![0.0; n]),
        })
    }

    pub fn with_xi(mut self, xi: CoefficientField) -> Self {
        self.xi = xi;
        self
    }

    pub fn validate(&self, model: &FactorModelSpec) -> Result<()> {
        check_gamma(self.gamma)?;
        self.xi.validate()?;
        if self.xi.output_len() != model.n {
            return Err(Error::Dimension {
                context: "Xi",
                expected: model.n,
                actual: self.xi.output_len(),
            });
        }
        for (t, x) in sample_points(model) {
            for v in self.xi.eval_vec(t, &x) {
                ensure_finite("Xi", v)?;
            }
        }
        Ok(())
    }
}

/// Portfolio proportions `pi(t, x)` of the `m` risky assets.
#[derive(Debug, Clone, PartialEq)]
pub enum StrategyField {
    Constant(Vec<f64>),
    /// One tabulated component per asset over a one-factor grid.
    Grid(Vec<GridFunction>),
}

impl StrategyField {
    pub fn m(&self) -> usize {
        match self {
            StrategyField::Constant(v) => v.len(),
            StrategyField::Grid(c) => c.len(),
        }
    }

    fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            StrategyField::Constant(v) => out.copy_from_slice(v),
            StrategyField::Grid(c) => {
                for (o, g) in out.iter_mut().zip(c) {
                    *o = g.interpolate_unchecked(t, x[0]);
                }
            }
        }
    }

    fn check_covers(&self, model: &FactorModelSpec, t0: f64, t1: f64) -> Result<()> {
        if let StrategyField::Grid(c) = self {
            if model.n != 1 {
                return Err(Error::NotOneFactor(model.n));
            }
            let (lo, hi) = (model.domain.lower[0], model.domain.upper[0]);
            if c.iter().any(|g| !g.covers(t0, t1, lo, hi)) {
                return Err(Error::OutOfDomain {
                    t: t0,
                    point: vec![lo, hi],
                    reason: "strategy grid does not cover the simulation window and domain".into(),
                });
            }
        }
        Ok(())
    }

    /// The risk-sensitive strategy: constant when every input is constant,
    /// tabulated on `grid` otherwise.
    pub fn risk_sensitive(
        model: &FactorModelSpec,
        market: &AssetMarketSpec,
        params: &RiskParams,
        grid: Option<Grid1D>,
    ) -> Result<Self> {
        let at = |t: f64, x: &[f64]| -> Result<Vec<f64>> {
            let theta = market.theta_at(model, t, x)?;
            Ok(rs_strategy(
                &theta,
                &market.sigma.eval_vec(t, x),
                &model.g.eval_vec(t, x),
                &params.xi.eval_vec(t, x),
                params.gamma,
                (market.m, market.d, model.n),
            )?
            .pi)
        };
        let constant = model.r.is_constant()
            && model.g.is_constant()
            && market.mu.is_constant()
            && market.sigma.is_constant()
            && params.xi.is_constant();
        if constant {
            return Ok(StrategyField::Constant(at(0.0, &model.x0)?));
        }
        let grid = grid.ok_or_else(|| Error::invalid("grid", "state-dependent strategies need a grid"))?;
        let mut comps = Vec::with_capacity(market.m);
        let mut table = Vec::with_capacity(grid.n_t * grid.n_x);
        for i in 0..grid.n_t {
            for j in 0..grid.n_x {
                table.push(at(grid.t(i), &[grid.x(j)])?);
            }
        }
        for k in 0..market.m {
            let mut g = GridFunction::tabulate(grid, "pi", |_, _| 0.0)?;
            for (v, row) in g.values.iter_mut().zip(&table) {
                *v = row[k];
            }
            g.meta.problem = format!("pi_{k}");
            comps.push(g);
        }
        Ok(StrategyField::Grid(comps))
    }
}

/// Wealth paths on the recorded time grid (path-major, see
/// [`sim::PathBundle`]), plus the accounts driven by the same noise.
#[derive(Debug, Clone, PartialEq)]
pub struct WealthBundle {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub wealth: Vec<f64>,
    pub savings: Vec<f64>,
    pub borrowing: Vec<f64>,
    pub seed: u64,
    pub antithetic: bool,
}

impl WealthBundle {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn terminal(&self) -> Vec<f64> {
        let nt = self.n_times();
        (0..self.n_paths).map(|p| self.wealth[p * nt + nt - 1]).collect()
    }

    /// `E[V_T^gamma]` honouring antithetic pairing.
    pub fn objective(&self, gamma: f64) -> Result<Estimate> {
        let samples = power_samples(&self.terminal(), gamma)?;
        let units = if self.antithetic {
            stats::pair_means(&samples)
        } else {
            samples
        };
        Ok(Estimate::from_samples(&units, self.n_paths, self.seed))
    }
}

fn power_samples(terminal: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    if let Some(bad) = terminal.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::invalid("terminal wealth", format!("must be positive, found {bad}")));
    }
    Ok(terminal.iter().map(|v| v.powf(gamma)).collect())
}

/// `E[V_T^gamma]` over iid terminal values.
pub fn rs_objective(terminal: &[f64], gamma: f64) -> Result<Estimate> {
    let samples = power_samples(terminal, gamma)?;
    Ok(Estimate::from_samples(&samples, terminal.len(), 0))
}

/// Log-Euler wealth `d log V = (r + pi.(mu - r 1) - |sigma^T pi|^2 / 2) dt
/// + (sigma^T pi) . dW`, `V_0 = 1`, from the model's `x0` at `config.t0`.
///
/// The factor is driven by the same increments, consumed in the same order
/// as [`sim::simulate`], so the two share paths for equal seeds.
pub fn simulate_wealth(
    model: &FactorModelSpec,
    market: &AssetMarketSpec,
    strategy: &StrategyField,
    config: &SimConfig,
) -> Result<WealthBundle> {
    config.validate(model.horizon)?;
    market.validate(model)?;
    if strategy.m() != market.m {
        return Err(Error::Dimension {
            context: "strategy",
            expected: market.m,
            actual: strategy.m(),
        });
    }
    strategy.check_covers(model, config.t0, config.t_end)?;
    let (m, d) = (market.m, market.d);
    let n_steps = config.n_steps();
    let h = config.step();
    let sqrt_h = h.sqrt();
    let stride = config.record_stride;
    let recorded: Vec<usize> = (0..=n_steps).filter(|k| k % stride == 0 || *k == n_steps).collect();

    let rows = config.run_paths(|_, normals| {
        let mut w = Walker::new(model, &model.x0);
        let mut pi: Buf = SmallVec::from_elem(0.0, m);
        let mut mu: Buf = SmallVec::from_elem(0.0, m);
        let mut sigma: Buf = SmallVec::from_elem(0.0, m * d);
        let mut vol: Buf = SmallVec::from_elem(0.0, d);
        let (mut lv, mut ls, mut lb) = (0.0f64, 0.0f64, 0.0f64);
        let mut out = Vec::with_capacity(3 * recorded.len());
        out.extend([lv, ls, lb]);
        for k in 0..n_steps {
            let t = config.t0 + k as f64 * h;
            w.eval(t);
            strategy.eval_into(t, &w.x, &mut pi);
            market.mu.eval_into(t, &w.x, &mut mu);
            market.sigma.eval_into(t, &w.x, &mut sigma);
            for (kk, v) in vol.iter_mut().enumerate() {
                *v = (0..m).map(|i| sigma[i * d + kk] * pi[i]).sum();
            }
            let excess: f64 = pi.iter().zip(&mu).map(|(p, u)| p * (u - w.r)).sum();
            let vol_sq: f64 = vol.iter().map(|v| v * v).sum();
            w.draw(normals, sqrt_h);
            let noise: f64 = vol.iter().zip(&w.dw).map(|(v, z)| v * z).sum();
            lv += (w.r + excess - 0.5 * vol_sq) * h + noise;
            ls += w.r * h;
            lb += (w.r + w.phi) * h;
            w.advance(h);
            if (k + 1) % stride == 0 || k + 1 == n_steps {
                out.extend([lv, ls, lb]);
            }
        }
        Ok(out)
    })?;

    let nt = recorded.len();
    let mut bundle = WealthBundle {
        times: recorded.iter().map(|&k| config.t0 + k as f64 * h).collect(),
        n_paths: config.n_paths,
        wealth: Vec::with_capacity(config.n_paths * nt),
        savings: Vec::with_capacity(config.n_paths * nt),
        borrowing: Vec::with_capacity(config.n_paths * nt),
        seed: config.seed,
        antithetic: config.antithetic,
    };
    for row in rows {
        for c in row.chunks_exact(3) {
            bundle.wealth.push(c[0].exp());
            bundle.savings.push(c[1].exp());
            bundle.borrowing.push(c[2].exp());
        }
    }
    if bundle.wealth.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("simulated wealth".into()));
    }
    Ok(bundle)
}

/// Largest `|sigma^+ (mu - r 1) - theta|` over the sample points.
pub fn theta_discrepancy(model: &FactorModelSpec, market: &AssetMarketSpec) -> Result<f64> {
    let mut worst = 0.0f64;
    for (t, x) in sample_points(model) {
        let implied = market.theta_at(model, t, &x)?;
        let given = model.theta.eval_vec(t, &x);
        for (a, b) in implied.iter().zip(&given) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Tolerance on [`theta_discrepancy`] for a market to count as consistent.
pub const THETA_TOLERANCE: f64 = 1e-8;

fn check_consistent(model: &FactorModelSpec, market: &AssetMarketSpec) -> Result<()> {
    market.validate(model)?;
    let gap = theta_discrepancy(model, market)?;
    if !(gap <= THETA_TOLERANCE) {
        return Err(Error::Inconsistent(format!(
            "market price of risk of the market differs from the model's by {gap:e}"
        )));
    }
    Ok(())
}

/// Replaces the model's spread by the one the risk-sensitive investor
/// implies. The field is folded to a constant when all inputs are constant.
pub fn rs_spread_pipeline(
    model: &FactorModelSpec,
    market: &AssetMarketSpec,
    params: &RiskParams,
) -> Result<FactorModelSpec> {
    check_consistent(model, market)?;
    params.validate(model)?;
    let composition = SpreadComposition {
        n: model.n,
        d: model.d,
        m: market.m,
        r: model.r.clone(),
        mu: market.mu.clone(),
        sigma: market.sigma.clone(),
        g: model.g.clone(),
        xi: params.xi.clone(),
        gamma: params.gamma,
    };
    let phi = if params.gamma == 0.0 {
        CoefficientField::constant(0.0)
    } else if model.r.is_constant()
        && market.mu.is_constant()
        && market.sigma.is_constant()
        && model.g.is_constant()
        && params.xi.is_constant()
    {
        CoefficientField::constant(composition.eval(0.0, &model.x0))
    } else {
        CoefficientField::RiskSensitiveSpread(Box::new(composition))
    };
    for (t, x) in sample_points(model) {
        ensure_finite("endogenous spread", phi.eval_scalar(t, &x))?;
    }
    Ok(model.with_phi(phi))
}

/// Zero-drift test of `Y S~0` with `Y = V^(gamma - 1)` the optimal
/// portfolio raised to `gamma - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub gamma: f64,
    pub drift: DriftTest,
    pub z_max: f64,
    pub passes: bool,
    pub n_paths: usize,
    pub seed: u64,
    pub flagged_fraction: f64,
}

/// Simulates the optimal portfolio
///
/// ```text
/// d log V = [r + theta.a / (1-gamma) - |b|^2 / (2 (1-gamma)^2)] dt + b.dW / (1-gamma)
/// a = theta + gamma g^T Xi,  b = theta + gamma P g^T Xi,  P = sigma^+ sigma
/// ```
///
/// forms `V^(gamma-1) S~0` on the recorded grid and tests it for zero drift
/// at `|z| <= 3`.
pub fn verify_rs_martingale(
    model: &FactorModelSpec,
    market: &AssetMarketSpec,
    params: &RiskParams,
    config: &SimConfig,
) -> Result<MartingaleReport> {
    config.validate(model.horizon)?;
    check_consistent(model, market)?;
    params.validate(model)?;
    let (n, d, m) = (model.n, model.d, market.m);
    let gamma = params.gamma;
    let scale = 1.0 / (1.0 - gamma);
    let hedging = !params.xi.is_zero() && gamma != 0.0;
    let fixed_projection = if hedging && market.sigma.is_constant() {
        Some(row_space_projection(&market.sigma.eval_vec(0.0, &model.x0), m, d)?)
    } else {
        None
    };
    let n_steps = config.n_steps();
    let h = config.step();
    let sqrt_h = h.sqrt();
    let stride = config.record_stride;
    let n_rec = (0..=n_steps).filter(|k| k % stride == 0 || *k == n_steps).count();

    let rows = config.run_paths(|_, normals| {
        let mut w = Walker::new(model, &model.x0);
        let mut xi: Buf = SmallVec::from_elem(0.0, n);
        let mut a: Buf = SmallVec::from_elem(0.0, d);
        let mut b: Buf = SmallVec::from_elem(0.0, d);
        let (mut lv, mut lb) = (0.0f64, 0.0f64);
        let mut out = Vec::with_capacity(n_rec);
        out.push(1.0);
        for k in 0..n_steps {
            let t = config.t0 + k as f64 * h;
            w.eval(t);
            a.copy_from_slice(&w.theta);
            b.copy_from_slice(&w.theta);
            if hedging {
                params.xi.eval_into(t, &w.x, &mut xi);
                let g_xi = transpose_apply(&w.g, n, d, &xi);
                let p = match &fixed_projection {
                    Some(p) => p.clone(),
                    None => row_space_projection(&market.sigma.eval_vec(t, &w.x), m, d)?,
                };
                for kk in 0..d {
                    a[kk] += gamma * g_xi[kk];
                    b[kk] += gamma * (0..d).map(|j| p[kk * d + j] * g_xi[j]).sum::<f64>();
                }
            }
            let theta_a: f64 = w.theta.iter().zip(&a).map(|(x, y)| x * y).sum();
            let b_sq: f64 = b.iter().map(|v| v * v).sum();
            w.draw(normals, sqrt_h);
            let noise: f64 = b.iter().zip(&w.dw).map(|(v, z)| v * z).sum();
            lv += (w.r + theta_a * scale - 0.5 * b_sq * scale * scale) * h + noise * scale;
            lb += (w.r + w.phi) * h;
            w.advance(h);
            if (k + 1) % stride == 0 || k + 1 == n_steps {
                out.push(((gamma - 1.0) * lv + lb).exp());
            }
        }
        Ok((out, w.flagged))
    })?;
    let mut values = Vec::with_capacity(config.n_paths * n_rec);
    let mut flagged = 0u64;
    for (row, f) in rows {
        values.extend(row);
        flagged += f as u64;
    }
    let drift = sim::drift_test(&values, config.n_paths, n_rec, config.antithetic)?;
    let z_max = 3.0;
    Ok(MartingaleReport {
        gamma,
        passes: drift.passes(z_max),
        drift,
        z_max,
        n_paths: config.n_paths,
        seed: config.seed,
        flagged_fraction: flagged as f64 / (config.n_paths * n_steps) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_constant_coefficient, build_consistent_vasicek};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_market() -> (FactorModelSpec, AssetMarketSpec) {
        let model = build_constant_coefficient(0.02, 0.3, 0.1, CoefficientField::constant(0.0), 0.0).unwrap();
        let market = AssetMarketSpec::implied_by(&model, vec![0.2]).unwrap();
        (model, market)
    }

    #[test]
    fn zero_excess_return_means_zero_price_of_risk() {
        let theta = market_price_of_risk(&[0.03, 0.03], &[0.2, 0.0, 0.1, 0.3], 2, 2, 0.03).unwrap();
        assert!(theta.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn scalar_price_of_risk() {
        let theta = market_price_of_risk(&[0.06], &[0.2], 1, 1, 0.02).unwrap();
        assert!((theta[0] - 0.2).abs() < 1e-14);
    }

    #[test]
    fn pseudoinverse_of_square_matrix_is_its_inverse() {
        let sigma = [0.3, 0.1, -0.05, 0.25];
        let (mu, r) = ([0.07, 0.04], 0.01);
        let theta = market_price_of_risk(&mu, &sigma, 2, 2, r).unwrap();
        let inv = DMatrix::from_row_slice(2, 2, &sigma).try_inverse().unwrap();
        let direct = inv * DVector::from_vec(vec![mu[0] - r, mu[1] - r]);
        for k in 0..2 {
            assert!((theta[k] - direct[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficient_volatility_is_rejected() {
        let err = market_price_of_risk(&[0.05, 0.05], &[0.2, 0.4, 0.1, 0.2], 2, 2, 0.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(_)));
    }

    #[test]
    fn strategy_hand_value() {
        let s = rs_strategy(&[0.2], &[0.2], &[0.1], &[0.5], -1.0, (1, 1, 1)).unwrap();
        assert!((s.pi[0] - 0.375).abs() < 1e-14);
    }

    #[test]
    fn strategy_without_hedging_scales_growth_optimal_weights() {
        let s = rs_strategy(&[0.2, 0.1], &[0.2, 0.0, 0.05, 0.3], &[0.1, 0.0], &[0.0], -1.0, (2, 2, 1)).unwrap();
        let gop = rs_strategy(&[0.2, 0.1], &[0.2, 0.0, 0.05, 0.3], &[0.1, 0.0], &[0.0], 0.0, (2, 2, 1)).unwrap();
        for k in 0..2 {
            assert!((s.pi[k] - 0.5 * gop.pi[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn two_fund_decomposition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let sigma: Vec<f64> = vec![rng.random_range(0.1..0.4), rng.random_range(-0.1..0.1), 0.0, rng.random_range(0.1..0.4)];
            let theta: Vec<f64> = (0..2).map(|_| rng.random_range(-0.5..0.5)).collect();
            let g: Vec<f64> = (0..2).map(|_| rng.random_range(-0.2..0.2)).collect();
            let xi = vec![rng.random_range(-1.0..1.0)];
            let gamma = -rng.random_range(0.1..5.0);
            let s = rs_strategy(&theta, &sigma, &g, &xi, gamma, (2, 2, 1)).unwrap();
            for k in 0..2 {
                assert!((s.pi[k] - s.gop_component[k] - s.hedging_component[k]).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn strategy_converges_to_growth_optimal() {
        let args = (&[0.2, 0.1][..], &[0.2, 0.0, 0.05, 0.3][..], &[0.1, 0.05][..], &[0.7][..]);
        let gop = rs_strategy(args.0, args.1, args.2, args.3, 0.0, (2, 2, 1)).unwrap().pi;
        let mut last = f64::INFINITY;
        for gamma in [-1e-1, -1e-2, -1e-3] {
            let pi = rs_strategy(args.0, args.1, args.2, args.3, gamma, (2, 2, 1)).unwrap().pi;
            let err = pi.iter().zip(&gop).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err < last);
            last = err;
        }
    }

    #[test]
    fn spread_hand_values() {
        assert_eq!(funding_liquidity_spread(0.02, &[0.3], &[0.0], -1.0), 0.0425);
        assert_eq!(funding_liquidity_spread(0.05, &[0.3, -0.2], &[0.4, 0.1], 0.0), 0.0);
    }

    #[test]
    fn spread_without_hedging_matches_simplified_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let r = rng.random_range(-0.02..0.1);
            let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gamma = -rng.random_range(0.01..10.0);
            let full = {
                // Direct evaluation of the unsimplified expression.
                let a: Vec<f64> = theta.clone();
                let dot: f64 = theta.iter().zip(&a).map(|(x, y)| x * y).sum();
                let sq: f64 = a.iter().map(|v| v * v).sum();
                -gamma * r + dot - (2.0 - gamma) / (2.0 * (1.0 - gamma)) * sq
            };
            let simple = -gamma * (r + theta.iter().map(|v| v * v).sum::<f64>() / (2.0 * (1.0 - gamma)));
            let ours = funding_liquidity_spread(r, &theta, &[0.0; 3], gamma);
            assert!((full - simple).abs() <= 1e-14);
            assert!((ours - simple).abs() <= 1e-14);
        }
    }

    #[test]
    fn spread_is_monotone_in_risk_aversion() {
        for r in [0.0, 0.01, 0.05] {
            for theta in [0.0, 0.1, 0.5, 1.0] {
                let lo = funding_liquidity_spread(r, &[theta], &[0.0], -1.0);
                let hi = funding_liquidity_spread(r, &[theta], &[0.0], -2.0);
                if r > 0.0 || theta != 0.0 {
                    assert!(hi > lo, "r={r} theta={theta}");
                }
            }
        }
    }

    #[test]
    fn checked_spread_rejects_positive_gamma() {
        assert!(funding_liquidity_spread_checked(0.0, &[0.1], &[0.0], 0.5).is_err());
        assert!(funding_liquidity_spread_checked(f64::NAN, &[0.1], &[0.0], -0.5).is_err());
    }

    #[test]
    fn objective_hand_values() {
        assert_eq!(rs_objective(&[1.0; 10], -1.0).unwrap().mean, 1.0);
        let v = 0.02f64.exp();
        assert!((rs_objective(&[v; 4], -1.0).unwrap().mean - (-0.02f64).exp()).abs() < 1e-15);
        assert!(rs_objective(&[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn zero_strategy_tracks_savings_account() {
        let (model, market) = constant_market();
        let cfg = SimConfig::new(0.0, 1.0, 0.01, 20, 1);
        let w = simulate_wealth(&model, &market, &StrategyField::Constant(vec![0.0]), &cfg).unwrap();
        assert!(w.wealth.iter().zip(&w.savings).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn growth_optimal_strategy_reproduces_the_gop() {
        let model = build_consistent_vasicek(1.0, 0.05, 0.1, 2.0, CoefficientField::constant(0.0), 0.05).unwrap();
        let market = AssetMarketSpec::implied_by(&model, vec![0.25]).unwrap();
        let params = RiskParams::new(0.0, 1).unwrap();
        let grid = Grid1D::over_domain(&model, 0.0, 1.0, 21, 3).unwrap();
        let pi = StrategyField::risk_sensitive(&model, &market, &params, Some(grid)).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.01, 32, 5);
        let w = simulate_wealth(&model, &market, &pi, &cfg).unwrap();
        let b = sim::simulate(&model, &cfg, &model.x0, 1.0).unwrap();
        for (a, v) in w.wealth.iter().zip(&b.gop) {
            assert!((a - v).abs() <= 1e-10 * v, "{a} vs {v}");
        }
    }

    #[test]
    fn log_wealth_moments_for_constant_strategy() {
        let (model, market) = constant_market();
        let cfg = SimConfig::new(0.0, 1.0, 0.05, 20_000, 9);
        let w = simulate_wealth(&model, &market, &StrategyField::Constant(vec![0.8]), &cfg).unwrap();
        let logs: Vec<f64> = w.terminal().iter().map(|v| v.ln()).collect();
        let est = Estimate::from_samples(&logs, logs.len(), 9);
        // mu - r = sigma theta = 0.06
        let expect = 0.02 + 0.8 * 0.06 - 0.5 * 0.64 * 0.04;
        assert!(est.covers(expect, 3.0), "{est:?} vs {expect}");
    }

    #[test]
    fn pipeline_on_constant_market() {
        let (model, market) = constant_market();
        let out = rs_spread_pipeline(&model, &market, &RiskParams::new(-1.0, 1).unwrap()).unwrap();
        assert_eq!(out.phi, CoefficientField::constant(0.0425));
        let null = rs_spread_pipeline(&model, &market, &RiskParams::new(0.0, 1).unwrap()).unwrap();
        assert!(null.phi.is_zero());
    }

    #[test]
    fn pipeline_rejects_inconsistent_market() {
        let (model, _) = constant_market();
        let market = AssetMarketSpec::constant(vec![0.1], vec![0.2], 1).unwrap();
        assert!(matches!(
            rs_spread_pipeline(&model, &market, &RiskParams::new(-1.0, 1).unwrap()),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn pipeline_keeps_state_dependent_spread_symbolic() {
        let model = build_consistent_vasicek(1.0, 0.05, 0.1, 2.0, CoefficientField::constant(0.0), 0.05).unwrap();
        let market = AssetMarketSpec::implied_by(&model, vec![0.25]).unwrap();
        let out = rs_spread_pipeline(&model, &market, &RiskParams::new(-1.0, 1).unwrap()).unwrap();
        assert!(matches!(out.phi, CoefficientField::RiskSensitiveSpread(_)));
        for x in [0.0, 0.05, 0.1] {
            let r = 0.08 - 2.0 * x;
            let expect = -(-1.0) * (r + 0.04 / 4.0);
            assert!((out.phi.eval_scalar(0.3, &[x]) - expect).abs() < 1e-14);
        }
        let json = out.to_json().unwrap();
        assert_eq!(FactorModelSpec::from_json(&json).unwrap(), out);
    }

    #[test]
    fn martingale_closure_on_constant_market() {
        let (model, market) = constant_market();
        let params = RiskParams::new(-1.0, 1).unwrap();
        let endo = rs_spread_pipeline(&model, &market, &params).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.1, 20_000, 2);
        let ok = verify_rs_martingale(&endo, &market, &params, &cfg).unwrap();
        assert!(ok.passes, "{ok:?}");
        let off = endo.with_phi(CoefficientField::constant(0.0425 + 0.02));
        let bad = verify_rs_martingale(&off, &market, &params, &cfg).unwrap();
        assert!(bad.drift.z > 3.0, "{bad:?}");
    }

    #[test]
    fn risk_sensitive_beats_perturbed_strategies() {
        let (model, market) = constant_market();
        let params = RiskParams::new(-1.0, 1).unwrap();
        let pi = StrategyField::risk_sensitive(&model, &market, &params, None).unwrap();
        let StrategyField::Constant(best) = &pi else { panic!() };
        let cfg = SimConfig::new(0.0, 1.0, 0.05, 20_000, 8);
        let base = simulate_wealth(&model, &market, &pi, &cfg).unwrap();
        let base_samples: Vec<f64> = base.terminal().iter().map(|v| v.powf(-1.0)).collect();
        for shift in [-0.25, 0.25] {
            let other = simulate_wealth(&model, &market, &StrategyField::Constant(vec![best[0] + shift]), &cfg).unwrap();
            let other_samples: Vec<f64> = other.terminal().iter().map(|v| v.powf(-1.0)).collect();
            let (diff, se) = stats::paired_difference(&base_samples, &other_samples);
            // Perturbing a minimizer can only raise the objective.
            assert!(diff >= -3.0 * se, "shift {shift}: {diff} +- {se}");
        }
    }
}

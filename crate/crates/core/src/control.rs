//! Numerical verification of the control representations of the bond price
//! and of spot and forward spreads.
//!
//! Value functions come from the linear pricing PDEs (`w = -log p`,
//! `z = s^eta`); candidate feedback controls are read off their gradients
//! and the controlled objectives are evaluated by Monte Carlo.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::field::Buf;
use crate::model::FactorModelSpec;
use crate::pde::{self, Grid1D, GridFunction, SolverOptions};
use crate::rng::mix_seed;
use crate::sim::{SimConfig, Walker};
use crate::stats::{self, Estimate};

/// Largest admissible control norm on the grid.
pub const MAX_CONTROL_NORM: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// `eta` in (0, 1); the objective is maximized.
    Lower,
    /// `eta > 1` or `eta < 0`; the objective is minimized.
    Upper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBranch {
    pub kind: BranchKind,
    pub eta: f64,
}

impl ControlBranch {
    pub fn new(kind: BranchKind, eta: f64) -> Result<Self> {
        let ok = match kind {
            BranchKind::Lower => eta > 0.0 && eta < 1.0,
            BranchKind::Upper => (eta > 1.0 || eta < 0.0) && eta.is_finite(),
        };
        if !ok {
            return Err(Error::invalid(
                "eta",
                format!("{eta} is outside the range of the {kind:?} branch"),
            ));
        }
        Ok(Self { kind, eta })
    }

    pub fn lower(eta: f64) -> Result<Self> {
        Self::new(BranchKind::Lower, eta)
    }

    pub fn upper(eta: f64) -> Result<Self> {
        Self::new(BranchKind::Upper, eta)
    }

    /// `sqrt((1 - eta) / eta)` (lower) or `sqrt((eta - 1) / eta)` (upper).
    pub fn prefactor(&self) -> f64 {
        match self.kind {
            BranchKind::Lower => ((1.0 - self.eta) / self.eta).sqrt(),
            BranchKind::Upper => ((self.eta - 1.0) / self.eta).sqrt(),
        }
    }

    /// Sign of the control term in the state drift.
    pub fn drift_sign(&self) -> f64 {
        match self.kind {
            BranchKind::Lower => 1.0,
            BranchKind::Upper => -1.0,
        }
    }

    /// Sign of `|u|^2 / 2` in the exponent of the objective.
    pub fn cost_sign(&self) -> f64 {
        -self.drift_sign()
    }

    pub fn maximizes(&self) -> bool {
        self.kind == BranchKind::Lower
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationShape {
    /// `u + eps` in every component.
    Constant,
    /// `u + eps (x - centre) / half_width`, spanning `[-eps, eps]` on the grid.
    StateProportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub epsilon: f64,
    pub shape: PerturbationShape,
}

/// Feedback law `u(t, x)` tabulated on a one-factor grid, one grid per
/// Brownian component, bilinear in between.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackControl {
    pub components: Vec<GridFunction>,
    pub perturbation: Option<Perturbation>,
}

impl FeedbackControl {
    pub fn from_components(components: Vec<GridFunction>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::invalid("control", "needs a component"))?;
        if components.iter().any(|c| c.grid != first.grid) {
            return Err(Error::GridMismatch("control components on different grids".into()));
        }
        if components.iter().flat_map(|c| &c.values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control values".into()));
        }
        Ok(Self {
            components,
            perturbation: None,
        })
    }

    pub fn zero(grid: Grid1D, d: usize) -> Result<Self> {
        let c = GridFunction::tabulate(grid, "u", |_, _| 0.0)?;
        Self::from_components(vec![c; d])
    }

    pub fn d(&self) -> usize {
        self.components.len()
    }

    pub fn grid(&self) -> &Grid1D {
        &self.components[0].grid
    }

    pub fn perturbed(&self, p: Perturbation) -> Self {
        Self {
            components: self.components.clone(),
            perturbation: Some(p),
        }
    }

    /// Largest Euclidean norm over the grid nodes (unperturbed).
    pub fn max_norm(&self) -> f64 {
        let n = self.components[0].values.len();
        (0..n)
            .map(|k| self.components.iter().map(|c| c.values[k].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn admissible(&self) -> bool {
        let norm = self.max_norm();
        norm.is_finite() && norm <= MAX_CONTROL_NORM
    }

    #[inline]
    fn eval_into(&self, t: f64, x: f64, out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.interpolate_unchecked(t, x);
        }
        if let Some(p) = self.perturbation {
            let g = self.grid();
            let shift = match p.shape {
                PerturbationShape::Constant => p.epsilon,
                PerturbationShape::StateProportional => {
                    let centre = 0.5 * (g.x_min + g.x_max);
                    p.epsilon * (x - centre) / (0.5 * (g.x_max - g.x_min))
                }
            };
            for o in out.iter_mut() {
                *o += shift;
            }
        }
    }

    fn check(&self, model: &FactorModelSpec, t0: f64, t1: f64) -> Result<()> {
        if model.n != 1 {
            return Err(Error::NotOneFactor(model.n));
        }
        if self.d() != model.d {
            return Err(Error::Dimension {
                context: "control",
                expected: model.d,
                actual: self.d(),
            });
        }
        let (lo, hi) = (model.domain.lower[0], model.domain.upper[0]);
        if !self.components[0].covers(t0, t1, lo, hi) {
            return Err(Error::OutOfDomain {
                t: t0,
                point: vec![lo, hi],
                reason: "control grid does not cover the window and domain".into(),
            });
        }
        Ok(())
    }
}

/// Candidate control with the gap between its two equivalent forms.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateControl {
    pub control: FeedbackControl,
    /// Largest `|k g z_x / z - k eta g s_x / s|` over the grid.
    pub form_discrepancy: f64,
}

fn g_row(model: &FactorModelSpec, t: f64, x: f64) -> Buf {
    let mut g: Buf = SmallVec::from_elem(0.0, model.d);
    model.g.eval_into(t, &[x], &mut g);
    g
}

/// `u = k g^T z_x / z` with `z = s^eta`, where `k` is the branch prefactor.
fn power_candidate(s: &GridFunction, model: &FactorModelSpec, branch: ControlBranch) -> Result<CandidateControl> {
    if model.n != 1 {
        return Err(Error::NotOneFactor(model.n));
    }
    if let Some(bad) = s.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid("spread", format!("must be positive on the grid, found {bad}")));
    }
    let eta = branch.eta;
    let k = branch.prefactor();
    let z = s.map("z", |v| v.powf(eta))?;
    let dz = pde::grid_gradient(&z)?;
    let ds = pde::grid_gradient(s)?;
    let grid = s.grid;
    let mut comps: Vec<GridFunction> = (0..model.d)
        .map(|c| {
            let mut f = dz.clone();
            f.meta.problem = format!("u_{c} eta={eta}");
            f
        })
        .collect();
    let mut gap = 0.0f64;
    for i in 0..grid.n_t {
        let t = grid.t(i);
        for j in 0..grid.n_x {
            let idx = i * grid.n_x + j;
            let g = g_row(model, t, grid.x(j));
            let z_form = dz.values[idx] / z.values[idx];
            let s_form = eta * ds.values[idx] / s.values[idx];
            for (c, comp) in comps.iter_mut().enumerate() {
                comp.values[idx] = k * g[c] * z_form;
                gap = gap.max((k * g[c] * (z_form - s_form)).abs());
            }
        }
    }
    Ok(CandidateControl {
        control: FeedbackControl::from_components(comps)?,
        form_discrepancy: gap,
    })
}

/// Candidate control of the spot-spread problem from the PDE solution `s^T`.
pub fn candidate_spot_control(s: &GridFunction, model: &FactorModelSpec, branch: ControlBranch) -> Result<CandidateControl> {
    power_candidate(s, model, branch)
}

/// Candidate control of the forward-spread problem from `s^{T,delta}`.
pub fn candidate_fwd_control(s_fwd: &GridFunction, model: &FactorModelSpec, branch: ControlBranch) -> Result<CandidateControl> {
    power_candidate(s_fwd, model, branch)
}

/// Candidate control of the bond problem, `u = -g^T w_x` with `w = -log p`.
pub fn candidate_bond_control(p_hat: &GridFunction, model: &FactorModelSpec) -> Result<FeedbackControl> {
    if model.n != 1 {
        return Err(Error::NotOneFactor(model.n));
    }
    if let Some(bad) = p_hat.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid("p_hat", format!("must be positive on the grid, found {bad}")));
    }
    let w = p_hat.map("w", |p| -p.ln())?;
    let dw = pde::grid_gradient(&w)?;
    let grid = p_hat.grid;
    let mut comps = vec![dw.clone(); model.d];
    for i in 0..grid.n_t {
        let t = grid.t(i);
        for j in 0..grid.n_x {
            let idx = i * grid.n_x + j;
            let g = g_row(model, t, grid.x(j));
            for (c, comp) in comps.iter_mut().enumerate() {
                comp.values[idx] = -g[c] * dw.values[idx];
            }
        }
    }
    FeedbackControl::from_components(comps)
}

fn window(model: &FactorModelSpec, control: &FeedbackControl, t: f64, x: f64, maturity: f64, config: &SimConfig) -> Result<SimConfig> {
    let cfg = config.window(t, maturity);
    cfg.validate(model.horizon)?;
    crate::sim::check_start(model, t, &[x])?;
    control.check(model, t, maturity)?;
    Ok(cfg)
}

/// Drives one controlled path. `extra_drift` adds to `f` before the control
/// term; `running` accumulates the integrand; returns the terminal state
/// and the accumulated integral.
fn controlled_path(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    cfg: &SimConfig,
    x: f64,
    normals: &mut crate::rng::NormalStream,
    control_gain: f64,
    mut extra_drift: impl FnMut(&Walker, f64) -> f64,
    mut running: impl FnMut(&Walker, &[f64]) -> f64,
) -> (f64, f64) {
    let n_steps = cfg.n_steps();
    let h = cfg.step();
    let sqrt_h = h.sqrt();
    let mut w = Walker::new(model, &[x]);
    let mut u: Buf = SmallVec::from_elem(0.0, model.d);
    let mut integral = 0.0;
    for k in 0..n_steps {
        let t = cfg.t0 + k as f64 * h;
        w.eval(t);
        control.eval_into(t, w.x[0], &mut u);
        let gu = w.g_times(0, &u);
        w.drift[0] += extra_drift(&w, t) + control_gain * gu;
        integral += running(&w, &u) * h;
        w.draw(normals, sqrt_h);
        w.advance(h);
    }
    (w.x[0], integral)
}

fn norm_sq(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum()
}

fn spot_samples(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    branch: ControlBranch,
    t: f64,
    x: f64,
    maturity: f64,
    config: &SimConfig,
) -> Result<(SimConfig, Vec<f64>)> {
    let cfg = window(model, control, t, x, maturity, config)?;
    let gain = branch.drift_sign() * branch.prefactor();
    let (eta, cost) = (branch.eta, 0.5 * branch.cost_sign());
    let samples = cfg.run_paths(|_, normals| {
        let (_, integral) = controlled_path(
            model,
            control,
            &cfg,
            x,
            normals,
            gain,
            |w, _| -w.g_times(0, &w.theta),
            |w, u| eta * w.phi + cost * norm_sq(u),
        );
        Ok(integral.exp())
    })?;
    Ok((cfg, samples))
}

/// `E[exp(int (eta phi -+ |u|^2 / 2))]` along `dX = (f - g theta +- k g u) dt + g dW`.
pub fn evaluate_spot_objective(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    branch: ControlBranch,
    t: f64,
    x: f64,
    maturity: f64,
    config: &SimConfig,
) -> Result<Estimate> {
    let (cfg, samples) = spot_samples(model, control, branch, t, x, maturity, config)?;
    cfg.estimate(&samples)
}

/// Inputs of the forward-spread objective shared across evaluations.
pub struct ForwardInputs<'a> {
    pub maturity: f64,
    pub delta: f64,
    /// `x -> s^{T+delta}(T, x)`.
    pub s_long_terminal: &'a (dyn Fn(f64) -> f64 + Sync),
    pub p_hat: &'a GridFunction,
}

fn log_slope(p_hat: &GridFunction) -> Result<GridFunction> {
    if let Some(bad) = p_hat.values.iter().find(|v| !(**v > 0.0)) {
        return Err(Error::invalid("p_hat", format!("must be positive on the grid, found {bad}")));
    }
    let dp = pde::grid_gradient(p_hat)?;
    Ok(GridFunction {
        values: dp.values.iter().zip(&p_hat.values).map(|(d, p)| d / p).collect(),
        ..dp
    })
}

fn fwd_samples(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    branch: ControlBranch,
    t: f64,
    x: f64,
    inputs: &ForwardInputs<'_>,
    config: &SimConfig,
) -> Result<(SimConfig, Vec<f64>)> {
    let cfg = window(model, control, t, x, inputs.maturity, config)?;
    if !inputs.p_hat.covers(t, inputs.maturity, model.domain.lower[0], model.domain.upper[0]) {
        return Err(Error::GridMismatch("p_hat grid does not cover the window".into()));
    }
    let slope = log_slope(inputs.p_hat)?;
    let gain = branch.drift_sign() * branch.prefactor();
    let (eta, cost) = (branch.eta, 0.5 * branch.cost_sign());
    let samples = cfg.run_paths(|_, normals| {
        let (x_end, integral) = controlled_path(
            model,
            control,
            &cfg,
            x,
            normals,
            gain,
            |w, t| norm_sq(&w.g) * slope.interpolate_unchecked(t, w.x[0]),
            |_, u| cost * norm_sq(u),
        );
        let terminal = (inputs.s_long_terminal)(x_end);
        Ok((eta * terminal.ln() + integral).exp())
    })?;
    Ok((cfg, samples))
}

/// `E[exp(eta log s^{T+delta}(T, X_T) -+ int |u|^2 / 2)]` along
/// `dX = (f + g g^T p_x / p +- k g u) dt + g dW`.
pub fn evaluate_fwd_objective(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    branch: ControlBranch,
    t: f64,
    x: f64,
    inputs: &ForwardInputs<'_>,
    config: &SimConfig,
) -> Result<Estimate> {
    let (cfg, samples) = fwd_samples(model, control, branch, t, x, inputs, config)?;
    cfg.estimate(&samples)
}

fn bond_samples(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    t: f64,
    x: f64,
    maturity: f64,
    config: &SimConfig,
) -> Result<(SimConfig, Vec<f64>)> {
    let v = model.v_star()?;
    let cfg = window(model, control, t, x, maturity, config)?;
    let samples = cfg.run_paths(|_, normals| {
        let (x_end, integral) = controlled_path(model, control, &cfg, x, normals, 1.0, |_, _| 0.0, |_, u| 0.5 * norm_sq(u));
        Ok(integral + v.eval_scalar(maturity, &[x_end]).ln())
    })?;
    Ok((cfg, samples))
}

/// `E[int |u|^2 / 2 + log v*(T, X_T)]` along `dX = (f + g u) dt + g dW`.
pub fn evaluate_bond_objective(
    model: &FactorModelSpec,
    control: &FeedbackControl,
    t: f64,
    x: f64,
    maturity: f64,
    config: &SimConfig,
) -> Result<Estimate> {
    let (cfg, samples) = bond_samples(model, control, t, x, maturity, config)?;
    cfg.estimate(&samples)
}

/// Discrete residual of `w_t + f w_x + g^2 w_xx / 2 - g^2 w_x^2 / 2 = 0`,
/// time-centred between levels, maximised over nodes at least
/// `margin * n_x` away from either edge.
pub fn bond_hjb_residual(w: &GridFunction, model: &FactorModelSpec, margin: f64) -> Result<f64> {
    if model.n != 1 {
        return Err(Error::NotOneFactor(model.n));
    }
    let g = w.grid;
    let skip = ((margin * g.n_x as f64).ceil() as usize).max(1);
    if 2 * skip >= g.n_x {
        return Err(Error::invalid("margin", "leaves no interior nodes"));
    }
    let (dx, dt) = (g.dx(), g.dt());
    let op = |i: usize, j: usize| {
        let (t, x) = (g.t(i), g.x(j));
        let row = w.row(i);
        let wx = (row[j + 1] - row[j - 1]) / (2.0 * dx);
        let wxx = ((row[j + 1] - row[j]) - (row[j] - row[j - 1])) / (dx * dx);
        let f = model.f.eval_scalar(t, &[x]);
        let g2 = norm_sq(&g_row(model, t, x));
        f * wx + 0.5 * g2 * wxx - 0.5 * g2 * wx * wx
    };
    let mut worst = 0.0f64;
    for i in 0..g.n_t - 1 {
        for j in skip..g.n_x - skip {
            let wt = (w.at(i + 1, j) - w.at(i, j)) / dt;
            let r = wt + 0.5 * (op(i, j) + op(i + 1, j));
            worst = worst.max(r.abs());
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    pub n_x: usize,
    pub n_t: usize,
    /// Start of the PDE grids; probes must lie in `[t_start, T)`.
    pub t_start: f64,
    pub solver: SolverOptions,
    pub sim: SimConfig,
    pub epsilons: Vec<f64>,
    pub shapes: Vec<PerturbationShape>,
    /// Perturbations run at the first `perturbation_probes` probes, for the
    /// first eta of each branch list.
    pub perturbation_probes: usize,
    /// Added to the Monte Carlo band of identity checks.
    pub grid_tolerance: f64,
    /// Width of the Monte Carlo bands, in standard errors.
    pub z: f64,
    /// Fraction of space nodes excluded at each edge for the HJB residual.
    pub hjb_margin: f64,
    pub hjb_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_x: 400,
            n_t: 400,
            t_start: 0.0,
            solver: SolverOptions::default(),
            sim: SimConfig::new(0.0, 1.0, 2e-3, 10_000, 42),
            epsilons: vec![0.1, 0.5],
            shapes: vec![PerturbationShape::Constant, PerturbationShape::StateProportional],
            perturbation_probes: 2,
            grid_tolerance: 2e-3,
            z: 3.0,
            hjb_margin: 0.1,
            hjb_tolerance: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityRow {
    pub branch: Option<BranchKind>,
    pub eta: Option<f64>,
    pub t: f64,
    pub x: f64,
    /// `s` (spreads) or `p` (bond) from the PDE.
    pub pde_value: f64,
    /// `z = s^eta` or `w = -log p` from the PDE.
    pub value_function: f64,
    pub mc: Estimate,
    /// `mc^(1/eta)` or `exp(-mc)`.
    pub transformed: f64,
    pub transformed_stderr: f64,
    pub error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub branch: Option<BranchKind>,
    pub eta: Option<f64>,
    pub probe: usize,
    pub epsilon: f64,
    pub shape: PerturbationShape,
    pub candidate: f64,
    pub perturbed: f64,
    /// Paired `perturbed - candidate`.
    pub delta: f64,
    pub stderr: f64,
    /// `-1` when the candidate maximizes, `+1` when it minimizes.
    pub expected_sign: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaLimitRow {
    pub branch: BranchKind,
    pub eta: f64,
    /// Largest identity error over the probes.
    pub max_error: f64,
    /// Transformed standard error at the probe attaining `max_error`.
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub eta_lower: f64,
    pub eta_upper: f64,
    /// Nodes with `s >= 1`, where the inequalities are asserted.
    pub nodes_checked: usize,
    /// Nodes with `1 - 1e-8 <= s < 1`, reported but not asserted.
    pub nodes_near_one: usize,
    pub violations: usize,
    /// Smallest of `s - s^eta_lower` and `s^eta_upper - s` over checked nodes.
    pub min_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub problem: String,
    pub maturity: f64,
    pub delta: Option<f64>,
    pub identities: Vec<IdentityRow>,
    pub perturbations: Vec<PerturbationRow>,
    pub eta_limit: Vec<EtaLimitRow>,
    pub sandwich: Vec<SandwichRow>,
    pub min_spread: Option<f64>,
    pub terminal_gap: Option<f64>,
    pub hjb_residual: Option<f64>,
    pub max_control_norm: f64,
    pub max_form_discrepancy: Option<f64>,
    pub clauses: Vec<Clause>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn clause(&self, name: &str) -> Option<&Clause> {
        self.clauses.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<String> {
        self.clauses
            .iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}: {}", self.problem, c.name, c.detail))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} (T = {}{})", self.problem, self.maturity, self.delta.map(|d| format!(", delta = {d}")).unwrap_or_default());
        for c in &self.clauses {
            let _ = writeln!(out, "  [{}] {:<14} {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
        }
        let _ = writeln!(out, "  identities:");
        for r in &self.identities {
            let _ = writeln!(
                out,
                "    eta={:<6} t={:<5} x={:<8.4} pde={:.8} mc={:.8} +- {:.2e} err={:.2e} tol={:.2e}",
                r.eta.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                r.t,
                r.x,
                r.pde_value,
                r.transformed,
                r.transformed_stderr,
                r.error,
                r.tolerance
            );
        }
        if !self.eta_limit.is_empty() {
            let _ = writeln!(out, "  eta limit:");
            for r in &self.eta_limit {
                let _ = writeln!(out, "    {:?} eta={:<6} max err={:.2e} se={:.2e}", r.branch, r.eta, r.max_error, r.stderr);
            }
        }
        out
    }
}

fn clause(name: &str, passed: bool, detail: String) -> Clause {
    Clause {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn branches(etas_lower: &[f64], etas_upper: &[f64]) -> Result<Vec<ControlBranch>> {
    etas_lower
        .iter()
        .map(|&e| ControlBranch::lower(e))
        .chain(etas_upper.iter().map(|&e| ControlBranch::upper(e)))
        .collect()
}

fn check_probes(grid: &Grid1D, probes: &[(f64, f64)]) -> Result<()> {
    if probes.is_empty() {
        return Err(Error::invalid("probes", "need at least one probe"));
    }
    for &(t, x) in probes {
        if !(t >= grid.t_start && t < grid.t_end && x > grid.x_min && x < grid.x_max) {
            return Err(Error::OutOfDomain {
                t,
                point: vec![x],
                reason: "probe must be interior to the grid".into(),
            });
        }
    }
    Ok(())
}

const SPOT: u64 = 1;
const FORWARD: u64 = 2;
const BOND: u64 = 3;

fn identity_power(branch: ControlBranch, t: f64, x: f64, pde_value: f64, mc: Estimate, cfg: &VerifyConfig) -> IdentityRow {
    let inv = 1.0 / branch.eta;
    let transformed = mc.mean.powf(inv);
    let transformed_stderr = mc.stderr * inv.abs() * mc.mean.powf(inv - 1.0);
    let error = (transformed - pde_value).abs();
    let tolerance = cfg.z * transformed_stderr + cfg.grid_tolerance;
    IdentityRow {
        branch: Some(branch.kind),
        eta: Some(branch.eta),
        t,
        x,
        pde_value,
        value_function: pde_value.powf(branch.eta),
        mc,
        transformed,
        transformed_stderr,
        error,
        passed: error <= tolerance && transformed.is_finite(),
        tolerance,
    }
}

fn perturbation_row(
    branch: Option<ControlBranch>,
    probe: usize,
    p: Perturbation,
    cfg: &SimConfig,
    base: &[f64],
    other: &[f64],
    z: f64,
) -> PerturbationRow {
    let (a, b) = (cfg.units(base), cfg.units(other));
    let (delta, stderr) = stats::paired_difference(&a, &b);
    let expected_sign = if branch.is_some_and(|b| b.maximizes()) { -1.0 } else { 1.0 };
    PerturbationRow {
        branch: branch.map(|b| b.kind),
        eta: branch.map(|b| b.eta),
        probe,
        epsilon: p.epsilon,
        shape: p.shape,
        candidate: stats::mean_stderr(&a).0,
        perturbed: stats::mean_stderr(&b).0,
        delta,
        stderr,
        expected_sign,
        passed: delta.is_finite() && expected_sign * delta >= -z * stderr,
    }
}

fn perturbations(cfg: &VerifyConfig) -> Vec<Perturbation> {
    cfg.epsilons
        .iter()
        .flat_map(|&epsilon| cfg.shapes.iter().map(move |&shape| Perturbation { epsilon, shape }))
        .collect()
}

/// Errors along each branch's eta sequence, ordered toward 1.
fn eta_limit_rows(identities: &[IdentityRow]) -> Vec<EtaLimitRow> {
    let mut rows: Vec<EtaLimitRow> = Vec::new();
    for r in identities {
        let (Some(kind), Some(eta)) = (r.branch, r.eta) else { continue };
        if eta < 0.0 {
            continue;
        }
        match rows.iter_mut().find(|e| e.branch == kind && e.eta == eta) {
            Some(e) if r.error > e.max_error => {
                e.max_error = r.error;
                e.stderr = r.transformed_stderr;
            }
            Some(_) => {}
            None => rows.push(EtaLimitRow {
                branch: kind,
                eta,
                max_error: r.error,
                stderr: r.transformed_stderr,
            }),
        }
    }
    rows.sort_by(|a, b| {
        let key = |r: &EtaLimitRow| (r.branch == BranchKind::Upper, (r.eta - 1.0).abs());
        let (ka, kb) = (key(a), key(b));
        ka.0.cmp(&kb.0).then(kb.1.total_cmp(&ka.1))
    });
    rows
}

/// Non-increasing errors toward `eta = 1` within twice the pooled standard
/// error of consecutive entries.
fn eta_limit_clause(rows: &[EtaLimitRow]) -> Clause {
    let mut worst = f64::NEG_INFINITY;
    let mut ok = true;
    for pair in rows.windows(2) {
        if pair[0].branch != pair[1].branch {
            continue;
        }
        let pooled = (pair[0].stderr.powi(2) + pair[1].stderr.powi(2)).sqrt();
        let excess = pair[1].max_error - pair[0].max_error - 2.0 * pooled;
        worst = worst.max(excess);
        ok &= excess <= 0.0;
    }
    clause(
        "eta_limit",
        ok,
        if worst.is_finite() {
            format!("largest increase beyond 2 pooled stderr: {worst:.3e}")
        } else {
            "fewer than two eta per branch".into()
        },
    )
}

fn sandwich_rows(s: &GridFunction, lower: &[f64], upper: &[f64]) -> Vec<SandwichRow> {
    let mut rows = Vec::new();
    for &el in lower {
        for &eu in upper.iter().filter(|e| **e > 1.0) {
            let mut row = SandwichRow {
                eta_lower: el,
                eta_upper: eu,
                nodes_checked: 0,
                nodes_near_one: 0,
                violations: 0,
                min_margin: f64::INFINITY,
            };
            for &v in &s.values {
                if v >= 1.0 {
                    row.nodes_checked += 1;
                    let (lo, hi) = (v.powf(el), v.powf(eu));
                    if !(lo <= v && v <= hi) {
                        row.violations += 1;
                    }
                    row.min_margin = row.min_margin.min(v - lo).min(hi - v);
                } else if v >= 1.0 - 1e-8 {
                    row.nodes_near_one += 1;
                }
            }
            rows.push(row);
        }
    }
    rows
}

fn spread_clauses(report: &mut VerificationReport, model: &FactorModelSpec, s: &GridFunction, lower: &[f64], upper: &[f64]) {
    if model.phi_nonnegative() {
        let min = s.min();
        report.min_spread = Some(min);
        report.clauses.push(clause("positivity", min >= 1.0 - 1e-8, format!("grid minimum {min:.12}")));
        report.sandwich = sandwich_rows(s, lower, upper);
        let bad: usize = report.sandwich.iter().map(|r| r.violations).sum();
        let checked: usize = report.sandwich.iter().map(|r| r.nodes_checked).sum();
        report
            .clauses
            .push(clause("sandwich", bad == 0, format!("{bad} violations over {checked} node checks")));
    }
}

fn identity_clause(rows: &[IdentityRow]) -> Clause {
    let failed = rows.iter().filter(|r| !r.passed).count();
    let worst = rows.iter().map(|r| r.error / r.tolerance).fold(0.0, f64::max);
    clause("identity", failed == 0, format!("{failed} of {} probes outside tolerance, worst error/tolerance {worst:.3}", rows.len()))
}

fn perturbation_clause(rows: &[PerturbationRow]) -> Clause {
    let failed = rows.iter().filter(|r| !r.passed).count();
    clause(
        "perturbation",
        failed == 0 && !rows.is_empty(),
        format!("{failed} of {} perturbations significantly in the wrong direction", rows.len()),
    )
}

fn admissibility_clause(norm: f64) -> Clause {
    clause(
        "admissibility",
        norm.is_finite() && norm <= MAX_CONTROL_NORM,
        format!("max |u| on grid {norm:.4e} (bound {MAX_CONTROL_NORM})"),
    )
}

fn probe_config(cfg: &VerifyConfig, problem: u64, probe: usize, eta_index: usize) -> SimConfig {
    cfg.sim.with_seed(mix_seed(cfg.sim.seed, &[problem, probe as u64, eta_index as u64]))
}

/// Checks `z^(1/eta) = s` for every eta and probe, the lender/borrower
/// sandwich, positivity, the eta -> 1 limit and perturbation optimality.
pub fn verify_spot_representation(
    model: &FactorModelSpec,
    maturity: f64,
    etas_lower: &[f64],
    etas_upper: &[f64],
    config: &VerifyConfig,
    probes: &[(f64, f64)],
) -> Result<VerificationReport> {
    let grid = Grid1D::over_domain(model, config.t_start, maturity, config.n_x, config.n_t)?;
    check_probes(&grid, probes)?;
    let s = pde::solve_spot_spread(model, &grid, config.solver)?;
    let s_at: Vec<f64> = probes.iter().map(|&(t, x)| s.interpolate(t, x)).collect::<Result<_>>()?;
    let all = branches(etas_lower, etas_upper)?;
    let perturb_at = [0, etas_lower.len()];
    let mut report = empty_report("spot", maturity, None);
    let mut max_gap = 0.0f64;
    for (e_idx, &branch) in all.iter().enumerate() {
        let cand = candidate_spot_control(&s, model, branch)?;
        max_gap = max_gap.max(cand.form_discrepancy);
        report.max_control_norm = report.max_control_norm.max(cand.control.max_norm());
        for (p_idx, &(t, x)) in probes.iter().enumerate() {
            let cfg = probe_config(config, SPOT, p_idx, e_idx);
            let (cfg, base) = spot_samples(model, &cand.control, branch, t, x, maturity, &cfg)?;
            report.identities.push(identity_power(branch, t, x, s_at[p_idx], cfg.estimate(&base)?, config));
            if perturb_at.contains(&e_idx) && p_idx < config.perturbation_probes {
                for p in perturbations(config) {
                    let (_, other) = spot_samples(model, &cand.control.perturbed(p), branch, t, x, maturity, &cfg)?;
                    report.perturbations.push(perturbation_row(Some(branch), p_idx, p, &cfg, &base, &other, config.z));
                }
            }
        }
    }
    report.max_form_discrepancy = Some(max_gap);
    report.eta_limit = eta_limit_rows(&report.identities);
    report.clauses.push(identity_clause(&report.identities));
    report.clauses.push(admissibility_clause(report.max_control_norm));
    report.clauses.push(perturbation_clause(&report.perturbations));
    report.clauses.push(eta_limit_clause(&report.eta_limit));
    spread_clauses(&mut report, model, &s, etas_lower, etas_upper);
    Ok(report)
}

/// Forward analogue of [`verify_spot_representation`], plus the terminal
/// condition `s^{T,delta}(T, .) = s^{T+delta}(T, .)` on the shared nodes.
pub fn verify_fwd_representation(
    model: &FactorModelSpec,
    maturity: f64,
    delta: f64,
    etas_lower: &[f64],
    etas_upper: &[f64],
    config: &VerifyConfig,
    probes: &[(f64, f64)],
) -> Result<VerificationReport> {
    let grid = Grid1D::over_domain(model, config.t_start, maturity, config.n_x, config.n_t)?;
    check_probes(&grid, probes)?;
    let sol = pde::solve_forward_spread(model, &grid, delta, config.solver)?;
    let long_row = sol.s_long.row_at(maturity)?.to_vec();
    let fwd_row = sol.s_fwd.row(grid.n_t - 1);
    let terminal_gap = long_row.iter().zip(fwd_row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let long_level = sol.s_long.grid.level_of(maturity).expect("checked by row_at");
    let s_long = &sol.s_long;
    let terminal = move |x: f64| s_long.interpolate_row(long_level, x);
    let inputs = ForwardInputs {
        maturity,
        delta,
        s_long_terminal: &terminal,
        p_hat: &sol.p_hat,
    };
    let s_at: Vec<f64> = probes.iter().map(|&(t, x)| sol.s_fwd.interpolate(t, x)).collect::<Result<_>>()?;
    let all = branches(etas_lower, etas_upper)?;
    let perturb_at = [0, etas_lower.len()];
    let mut report = empty_report("forward", maturity, Some(delta));
    report.terminal_gap = Some(terminal_gap);
    let mut max_gap = 0.0f64;
    for (e_idx, &branch) in all.iter().enumerate() {
        let cand = candidate_fwd_control(&sol.s_fwd, model, branch)?;
        max_gap = max_gap.max(cand.form_discrepancy);
        report.max_control_norm = report.max_control_norm.max(cand.control.max_norm());
        for (p_idx, &(t, x)) in probes.iter().enumerate() {
            let cfg = probe_config(config, FORWARD, p_idx, e_idx);
            let (cfg, base) = fwd_samples(model, &cand.control, branch, t, x, &inputs, &cfg)?;
            report.identities.push(identity_power(branch, t, x, s_at[p_idx], cfg.estimate(&base)?, config));
            if perturb_at.contains(&e_idx) && p_idx < config.perturbation_probes {
                for p in perturbations(config) {
                    let (_, other) = fwd_samples(model, &cand.control.perturbed(p), branch, t, x, &inputs, &cfg)?;
                    report.perturbations.push(perturbation_row(Some(branch), p_idx, p, &cfg, &base, &other, config.z));
                }
            }
        }
    }
    report.max_form_discrepancy = Some(max_gap);
    report.eta_limit = eta_limit_rows(&report.identities);
    report
        .clauses
        .push(clause("terminal", terminal_gap <= 1e-10, format!("max |s^(T,delta)(T,.) - s^(T+delta)(T,.)| = {terminal_gap:.3e}")));
    report.clauses.push(identity_clause(&report.identities));
    report.clauses.push(admissibility_clause(report.max_control_norm));
    report.clauses.push(perturbation_clause(&report.perturbations));
    report.clauses.push(eta_limit_clause(&report.eta_limit));
    spread_clauses(&mut report, model, &sol.s_fwd, etas_lower, etas_upper);
    Ok(report)
}

/// Checks `exp(-w_MC) = p` at the probes, the HJB residual of `-log p` and
/// that perturbing the candidate does not lower the objective.
pub fn verify_bond_representation(
    model: &FactorModelSpec,
    maturity: f64,
    config: &VerifyConfig,
    probes: &[(f64, f64)],
) -> Result<VerificationReport> {
    model.v_star()?;
    let grid = Grid1D::over_domain(model, config.t_start, maturity, config.n_x, config.n_t)?;
    check_probes(&grid, probes)?;
    let p = pde::solve_zcb(model, &grid, config.solver)?;
    let control = candidate_bond_control(&p, model)?;
    let w = p.map("w", |v| -v.ln())?;
    let residual = bond_hjb_residual(&w, model, config.hjb_margin)?;
    let mut report = empty_report("bond", maturity, None);
    report.max_control_norm = control.max_norm();
    report.hjb_residual = Some(residual);
    for (p_idx, &(t, x)) in probes.iter().enumerate() {
        let cfg = probe_config(config, BOND, p_idx, 0);
        let (cfg, base) = bond_samples(model, &control, t, x, maturity, &cfg)?;
        let mc = cfg.estimate(&base)?;
        let pde_value = p.interpolate(t, x)?;
        let transformed = (-mc.mean).exp();
        let transformed_stderr = transformed * mc.stderr;
        let error = (transformed - pde_value).abs();
        let tolerance = config.z * transformed_stderr + config.grid_tolerance;
        report.identities.push(IdentityRow {
            branch: None,
            eta: None,
            t,
            x,
            pde_value,
            value_function: -pde_value.ln(),
            mc,
            transformed,
            transformed_stderr,
            error,
            passed: error <= tolerance && transformed.is_finite(),
            tolerance,
        });
        if p_idx < config.perturbation_probes {
            for pert in perturbations(config) {
                let (_, other) = bond_samples(model, &control.perturbed(pert), t, x, maturity, &cfg)?;
                report.perturbations.push(perturbation_row(None, p_idx, pert, &cfg, &base, &other, config.z));
            }
        }
    }
    report.clauses.push(identity_clause(&report.identities));
    report.clauses.push(clause(
        "hjb",
        residual <= config.hjb_tolerance,
        format!("max interior residual {residual:.3e} (tolerance {:.0e})", config.hjb_tolerance),
    ));
    report.clauses.push(admissibility_clause(report.max_control_norm));
    report.clauses.push(perturbation_clause(&report.perturbations));
    Ok(report)
}

fn empty_report(problem: &str, maturity: f64, delta: Option<f64>) -> VerificationReport {
    VerificationReport {
        problem: problem.to_string(),
        maturity,
        delta,
        identities: Vec::new(),
        perturbations: Vec::new(),
        eta_limit: Vec::new(),
        sandwich: Vec::new(),
        min_spread: None,
        terminal_gap: None,
        hjb_residual: None,
        max_control_norm: 0.0,
        max_form_discrepancy: None,
        clauses: Vec::new(),
    }
}

/// Default PDE grid for verification problems.
pub fn default_grid(model: &FactorModelSpec, t_start: f64, maturity: f64) -> Result<Grid1D> {
    Grid1D::over_domain(model, t_start, maturity, 400, 400)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::CoefficientField;
    use crate::model::{build_constant_coefficient, build_consistent_vasicek, Domain};

    fn vasicek(phi: CoefficientField) -> FactorModelSpec {
        build_consistent_vasicek(1.0, 0.05, 0.1, 2.0, phi, 0.05).unwrap()
    }

    fn quick() -> VerifyConfig {
        VerifyConfig {
            n_x: 120,
            n_t: 60,
            sim: SimConfig::new(0.0, 1.0, 1e-2, 4_000, 3),
            perturbation_probes: 1,
            ..VerifyConfig::default()
        }
    }

    #[test]
    fn branch_ranges_and_prefactors() {
        assert!(ControlBranch::lower(1.5).is_err());
        assert!(ControlBranch::lower(0.0).is_err());
        assert!(ControlBranch::upper(0.5).is_err());
        assert!(ControlBranch::upper(1.0).is_err());
        assert!(ControlBranch::upper(-1.0).is_ok());
        assert_eq!(ControlBranch::lower(0.5).unwrap().prefactor(), 1.0);
        assert!((ControlBranch::upper(2.0).unwrap().prefactor() - 0.5f64.sqrt()).abs() < 1e-15);
        let up = ControlBranch::upper(2.0).unwrap();
        assert!(!up.maximizes() && up.drift_sign() == -1.0 && up.cost_sign() == 1.0);
    }

    #[test]
    fn constant_spread_gives_zero_control() {
        let m = vasicek(CoefficientField::constant(0.0));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 50, 10).unwrap();
        let s = GridFunction::tabulate(grid, "s", |_, _| 1.3).unwrap();
        for b in [ControlBranch::lower(0.3).unwrap(), ControlBranch::upper(2.0).unwrap()] {
            let c = candidate_spot_control(&s, &m, b).unwrap();
            assert!(c.control.max_norm() < 1e-12);
            assert!(candidate_fwd_control(&s, &m, b).unwrap().control.max_norm() < 1e-12);
        }
    }

    #[test]
    fn both_candidate_forms_agree() {
        let m = vasicek(CoefficientField::constant(0.0));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 400, 5).unwrap();
        let s = GridFunction::tabulate(grid, "s", |t, x| 1.0 + 0.01 * (1.0 - t) * (1.0 + 10.0 * (x - 0.05).powi(2))).unwrap();
        for b in [ControlBranch::lower(0.25).unwrap(), ControlBranch::upper(4.0).unwrap(), ControlBranch::upper(-2.0).unwrap()] {
            let c = candidate_spot_control(&s, &m, b).unwrap();
            assert!(c.form_discrepancy <= 1e-6, "{b:?}: {}", c.form_discrepancy);
        }
    }

    #[test]
    fn candidate_rejects_nonpositive_spread() {
        let m = vasicek(CoefficientField::constant(0.0));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 10, 3).unwrap();
        let s = GridFunction::tabulate(grid, "s", |_, x| x).unwrap();
        assert!(candidate_spot_control(&s, &m, ControlBranch::lower(0.5).unwrap()).is_err());
    }

    #[test]
    fn uncontrolled_constant_spread_objective() {
        let m = vasicek(CoefficientField::constant(0.02));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 20, 5).unwrap();
        let zero = FeedbackControl::zero(grid, 1).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 1e-2, 200, 1);
        for b in [ControlBranch::lower(0.5).unwrap(), ControlBranch::upper(2.0).unwrap()] {
            let est = evaluate_spot_objective(&m, &zero, b, 0.0, 0.05, 1.0, &cfg).unwrap();
            assert!((est.mean - (b.eta * 0.02f64).exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn control_grid_must_cover_window() {
        let m = vasicek(CoefficientField::constant(0.02));
        let grid = Grid1D::over_domain(&m, 0.5, 1.0, 20, 5).unwrap();
        let zero = FeedbackControl::zero(grid, 1).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 1e-2, 10, 1);
        assert!(evaluate_spot_objective(&m, &zero, ControlBranch::lower(0.5).unwrap(), 0.0, 0.05, 1.0, &cfg).is_err());
    }

    #[test]
    fn forward_objective_with_unit_terminal() {
        let m = vasicek(CoefficientField::constant(0.0));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 30, 11).unwrap();
        let p = pde::solve_zcb(&m, &grid, SolverOptions::default()).unwrap();
        let zero = FeedbackControl::zero(grid, 1).unwrap();
        let one = |_: f64| 1.0;
        let inputs = ForwardInputs {
            maturity: 1.0,
            delta: 0.5,
            s_long_terminal: &one,
            p_hat: &p,
        };
        let cfg = SimConfig::new(0.0, 1.0, 1e-2, 100, 1);
        let est = evaluate_fwd_objective(&m, &zero, ControlBranch::upper(2.0).unwrap(), 0.0, 0.05, &inputs, &cfg).unwrap();
        assert_eq!(est.mean, 1.0);
        let e = |_: f64| (0.02f64 * 0.5).exp();
        let inputs = ForwardInputs { s_long_terminal: &e, ..inputs };
        let est = evaluate_fwd_objective(&m, &zero, ControlBranch::lower(0.5).unwrap(), 0.0, 0.05, &inputs, &cfg).unwrap();
        assert!((est.mean - (0.5f64 * 0.01).exp()).abs() < 1e-14);
    }

    #[test]
    fn trivial_bond_problem() {
        let m = FactorModelSpec {
            n: 1,
            d: 1,
            f: CoefficientField::constant(0.0),
            g: CoefficientField::constant(1.0),
            r: CoefficientField::constant(0.0),
            theta: CoefficientField::constant(0.0),
            phi: CoefficientField::constant(0.0),
            v_star: Some(CoefficientField::constant(1.0)),
            x0: vec![0.0],
            domain: Domain::interval(-5.0, 5.0).unwrap(),
            horizon: 2.0,
        };
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 40, 20).unwrap();
        let p = pde::solve_zcb(&m, &grid, SolverOptions::default()).unwrap();
        assert!(p.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let u = candidate_bond_control(&p, &m).unwrap();
        assert!(u.max_norm() < 1e-10);
        let est = evaluate_bond_objective(&m, &u, 0.0, 0.0, 1.0, &SimConfig::new(0.0, 1.0, 0.01, 50, 1)).unwrap();
        assert!(est.mean.abs() < 1e-12);
    }

    #[test]
    fn deterministic_bond_problem() {
        let m = build_constant_coefficient(0.03, 0.0, 0.1, CoefficientField::constant(0.0), 0.0).unwrap();
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 40, 20).unwrap();
        let p = pde::solve_zcb(&m, &grid, SolverOptions::default()).unwrap();
        let u = candidate_bond_control(&p, &m).unwrap();
        assert!(u.max_norm() < 1e-10);
        let w = p.map("w", |v| -v.ln()).unwrap();
        assert!(w.row(0).iter().all(|v| (v - 0.03).abs() < 1e-12));
        let est = evaluate_bond_objective(&m, &u, 0.0, 0.0, 1.0, &SimConfig::new(0.0, 1.0, 0.01, 50, 1)).unwrap();
        assert!((est.mean - 0.03).abs() < 1e-12);
    }

    #[test]
    fn zero_control_bond_objective_matches_plain_simulation() {
        let m = vasicek(CoefficientField::constant(0.0));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 40, 20).unwrap();
        let zero = FeedbackControl::zero(grid, 1).unwrap();
        let cfg = SimConfig::new(0.0, 1.0, 0.01, 500, 12);
        let est = evaluate_bond_objective(&m, &zero, 0.0, 0.1, 1.0, &cfg).unwrap();
        // Independent Euler loop on the same streams.
        let mut total = 0.0;
        for p in 0..500 {
            let mut normals = crate::rng::NormalStream::for_path(12, p, false);
            let mut x = 0.1f64;
            for _ in 0..100 {
                let dw = normals.next_normal() * 0.1;
                x += (0.05 - x) * 0.01 + 0.1 * dw;
            }
            total += 2.0 * (x - 0.05) + 2.0 * (1.0 - 0.05);
        }
        // v*(T, x) = exp(2 (x - x0)); the time factor is absent for this model.
        let direct = total / 500.0 - 2.0 * (1.0 - 0.05);
        assert!((est.mean - direct).abs() < 1e-12, "{} vs {direct}", est.mean);
    }

    #[test]
    fn hjb_residual_of_exact_solution_is_small() {
        let m = vasicek(CoefficientField::constant(0.0));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 200, 200).unwrap();
        let p = pde::solve_zcb(&m, &grid, SolverOptions::default()).unwrap();
        let w = p.map("w", |v| -v.ln()).unwrap();
        assert!(bond_hjb_residual(&w, &m, 0.1).unwrap() < 1e-3);
        let bent = w.map("bent", |v| v * 1.01).unwrap();
        assert!(bond_hjb_residual(&bent, &m, 0.1).unwrap() > bond_hjb_residual(&w, &m, 0.1).unwrap());
    }

    #[test]
    fn unit_spread_verification_is_degenerate() {
        let m = vasicek(CoefficientField::constant(0.0));
        let r = verify_spot_representation(&m, 1.0, &[0.5], &[2.0], &quick(), &[(0.0, 0.05)]).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.identities.iter().all(|row| (row.transformed - 1.0).abs() < 1e-12));
        assert_eq!(r.sandwich[0].min_margin, 0.0);
    }

    #[test]
    fn constant_spread_verification() {
        let m = vasicek(CoefficientField::constant(0.02));
        let r = verify_spot_representation(&m, 1.0, &[0.5], &[2.0], &quick(), &[(0.0, 0.05), (0.5, 0.1)]).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        let row = &r.identities[0];
        assert!((row.mc.mean - 0.01f64.exp()).abs() < 1e-10);
        assert!((row.transformed - 0.02f64.exp()).abs() < 1e-10);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(json["problem"], "spot");
    }

    #[test]
    fn constant_forward_verification() {
        let m = vasicek(CoefficientField::constant(0.02));
        let r = verify_fwd_representation(&m, 1.0, 0.5, &[0.5], &[2.0], &quick(), &[(0.0, 0.05)]).unwrap();
        assert!(r.passed(), "{}", r.to_text());
        assert!(r.terminal_gap.unwrap() <= 1e-10);
        assert!((r.identities[0].transformed - 0.01f64.exp()).abs() < 1e-9);
    }

    #[test]
    fn bond_verification_on_vasicek() {
        let m = vasicek(CoefficientField::constant(0.0));
        let r = verify_bond_representation(&m, 1.0, &quick(), &[(0.0, 0.05), (0.5, 0.0)]).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn perturbed_control_lowers_maximized_objective() {
        let m = vasicek(CoefficientField::quadratic_1d(0.05, 0.01, 0.001));
        let grid = Grid1D::over_domain(&m, 0.0, 1.0, 120, 60).unwrap();
        let s = pde::solve_spot_spread(&m, &grid, SolverOptions::default()).unwrap();
        let b = ControlBranch::lower(0.5).unwrap();
        let c = candidate_spot_control(&s, &m, b).unwrap().control;
        let cfg = SimConfig::new(0.0, 1.0, 1e-2, 2_000, 5);
        let base = evaluate_spot_objective(&m, &c, b, 0.0, 0.05, 1.0, &cfg).unwrap();
        let worse = evaluate_spot_objective(
            &m,
            &c.perturbed(Perturbation {
                epsilon: 0.5,
                shape: PerturbationShape::Constant,
            }),
            b,
            0.0,
            0.05,
            1.0,
            &cfg,
        )
        .unwrap();
        assert!(worse.mean < base.mean);
    }

    #[test]
    fn probes_must_be_interior() {
        let m = vasicek(CoefficientField::constant(0.0));
        assert!(verify_spot_representation(&m, 1.0, &[0.5], &[2.0], &quick(), &[(1.0, 0.05)]).is_err());
        assert!(verify_bond_representation(&m, 1.0, &quick(), &[(0.0, 10.0)]).is_err());
    }
}

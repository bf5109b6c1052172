//! Backward θ-scheme solver for one-dimensional linear parabolic problems
//!
//! ```text
//! u_t + b u_x + a u_xx + c u = 0,   u(t_end, x) = h(x)
//! ```
//!
//! and the three pricing problems built on it (benchmarked bond, spot
//! spread, forward spread).

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::FactorModelSpec;

/// Tensor grid: `n_x` equispaced space nodes by `n_t` equispaced time levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid1D {
    pub x_min: f64,
    pub x_max: f64,
    pub n_x: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub n_t: usize,
}

impl Grid1D {
    pub fn new(x_min: f64, x_max: f64, n_x: usize, t_start: f64, t_end: f64, n_t: usize) -> Result<Self> {
        let grid = Self {
            x_min,
            x_max,
            n_x,
            t_start,
            t_end,
            n_t,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid over the model's (one-dimensional) domain.
    pub fn over_domain(model: &FactorModelSpec, t_start: f64, t_end: f64, n_x: usize, n_t: usize) -> Result<Self> {
        if model.n != 1 {
            return Err(Error::NotOneFactor(model.n));
        }
        Self::new(model.domain.lower[0], model.domain.upper[0], n_x, t_start, t_end, n_t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max) || !self.x_min.is_finite() || !self.x_max.is_finite() {
            return Err(Error::invalid("grid", "need finite x_min < x_max"));
        }
        if !(self.t_start < self.t_end) || !self.t_start.is_finite() || !self.t_end.is_finite() {
            return Err(Error::invalid("grid", "need finite t_start < t_end"));
        }
        if self.n_x < 3 {
            return Err(Error::invalid("grid", "need at least 3 space nodes"));
        }
        if self.n_t < 2 {
            return Err(Error::invalid("grid", "need at least 2 time levels"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_x - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / (self.n_t - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        if j + 1 == self.n_x {
            self.x_max
        } else {
            self.x_min + j as f64 * self.dx()
        }
    }

    pub fn t(&self, i: usize) -> f64 {
        if i + 1 == self.n_t {
            self.t_end
        } else {
            self.t_start + i as f64 * self.dt()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| self.x(j)).collect()
    }

    pub fn ts(&self) -> Vec<f64> {
        (0..self.n_t).map(|i| self.t(i)).collect()
    }

    /// Same space nodes as `other` (to round-off).
    pub fn same_space(&self, other: &Grid1D) -> bool {
        let tol = 1e-12 * (self.x_max - self.x_min);
        self.n_x == other.n_x && (self.x_min - other.x_min).abs() <= tol && (self.x_max - other.x_max).abs() <= tol
    }

    /// Index of the time level equal to `t` within a tiny tolerance.
    pub fn level_of(&self, t: f64) -> Option<usize> {
        let dt = self.dt();
        let k = ((t - self.t_start) / dt).round();
        if k < 0.0 || k > (self.n_t - 1) as f64 {
            return None;
        }
        let k = k as usize;
        ((self.t(k) - t).abs() <= 1e-9 * dt.max(1.0)).then_some(k)
    }

    /// Cell index and weight for `x`, snapping to nodes within round-off.
    fn locate(lo: f64, step: f64, n: usize, v: f64) -> (usize, f64) {
        let s = ((v - lo) / step).clamp(0.0, (n - 1) as f64);
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            let k = nearest as usize;
            return if k == n - 1 { (n - 2, 1.0) } else { (k, 0.0) };
        }
        let k = (s.floor() as usize).min(n - 2);
        (k, s - k as f64)
    }

    fn contains(&self, t: f64, x: f64) -> bool {
        let tx = 1e-9 * (self.x_max - self.x_min);
        let tt = 1e-9 * (self.t_end - self.t_start).max(1.0);
        x >= self.x_min - tx && x <= self.x_max + tx && t >= self.t_start - tt && t <= self.t_end + tt
    }
}

pub type SpaceTimeFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;
pub type TerminalFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// `u_t + b u_x + a u_xx + c u = 0` with terminal data `h`.
#[derive(Clone)]
pub struct ParabolicProblem {
    pub id: String,
    pub b: SpaceTimeFn,
    pub a: SpaceTimeFn,
    pub c: SpaceTimeFn,
    pub h: TerminalFn,
}

impl fmt::Debug for ParabolicProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ParabolicProblem").field("id", &self.id).finish_non_exhaustive()
    }
}

impl ParabolicProblem {
    pub fn new<B, A, C, H>(id: impl Into<String>, b: B, a: A, c: C, h: H) -> Self
    where
        B: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        A: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        C: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        H: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            b: Arc::new(b),
            a: Arc::new(a),
            c: Arc::new(c),
            h: Arc::new(h),
        }
    }
}

/// Treatment of the two edge nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryRule {
    /// `u_xx = 0`: the edge value is linearly extrapolated from the two
    /// nearest interior nodes.
    #[default]
    ZeroSecondDerivative,
    /// `u_x = 0`: the edge copies its neighbour. Keeps the implicit scheme
    /// monotone, so discrete maximum principles hold exactly.
    ZeroFirstDerivative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Weight of the implicit part: 1 is implicit Euler, 1/2 Crank–Nicolson.
    pub theta: f64,
    pub boundary: BoundaryRule,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            theta: 0.5,
            boundary: BoundaryRule::default(),
        }
    }
}

impl SolverOptions {
    pub fn implicit() -> Self {
        Self {
            theta: 1.0,
            ..Self::default()
        }
    }

    pub fn boundary(mut self, boundary: BoundaryRule) -> Self {
        self.boundary = boundary;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub problem: String,
    pub scheme_theta: f64,
    pub boundary: BoundaryRule,
    /// `max 2 a dt / dx^2` over the run; only recorded for explicit-leaning
    /// schemes (theta < 1/2), where it governs stability.
    pub cfl: Option<f64>,
}

/// Tabulated solution `u(t_i, x_j)`, stored row-major by time level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: Grid1D,
    pub values: Vec<f64>,
    pub meta: GridMeta,
}

impl GridFunction {
    /// Tabulates `f(t, x)` on the grid.
    pub fn tabulate(grid: Grid1D, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        grid.validate()?;
        let mut values = Vec::with_capacity(grid.n_t * grid.n_x);
        for i in 0..grid.n_t {
            let t = grid.t(i);
            for j in 0..grid.n_x {
                values.push(f(t, grid.x(j)));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tabulated {name}")));
        }
        Ok(Self {
            grid,
            values,
            meta: GridMeta {
                problem: name.to_string(),
                scheme_theta: f64::NAN,
                boundary: BoundaryRule::default(),
                cfl: None,
            },
        })
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.n_x + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.grid.n_x..(i + 1) * self.grid.n_x]
    }

    /// Row at a time that must coincide with a grid level.
    pub fn row_at(&self, t: f64) -> Result<&[f64]> {
        let i = self
            .grid
            .level_of(t)
            .ok_or_else(|| Error::GridMismatch(format!("t = {t} is not a time level of the grid")))?;
        Ok(self.row(i))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn covers(&self, t0: f64, t1: f64, x_lo: f64, x_hi: f64) -> bool {
        self.grid.contains(t0, x_lo) && self.grid.contains(t1, x_hi)
    }

    /// Bilinear interpolation; points off the grid are an error.
    pub fn interpolate(&self, t: f64, x: f64) -> Result<f64> {
        if !self.grid.contains(t, x) {
            return Err(Error::OutOfDomain {
                t,
                point: vec![x],
                reason: format!("outside the grid of {}", self.meta.problem),
            });
        }
        Ok(self.interpolate_unchecked(t, x))
    }

    /// Bilinear interpolation clamped to the grid.
    #[inline]
    pub fn interpolate_unchecked(&self, t: f64, x: f64) -> f64 {
        let g = &self.grid;
        let (i, wt) = Grid1D::locate(g.t_start, g.dt(), g.n_t, t);
        let (j, wx) = Grid1D::locate(g.x_min, g.dx(), g.n_x, x);
        let lerp = |i: usize| {
            let (u0, u1) = (self.at(i, j), self.at(i, j + 1));
            if wx == 0.0 {
                u0
            } else {
                u0 + wx * (u1 - u0)
            }
        };
        let lo = lerp(i);
        if wt == 0.0 {
            lo
        } else {
            lo + wt * (lerp(i + 1) - lo)
        }
    }

    /// Linear interpolation in `x` along an existing time level.
    pub fn interpolate_row(&self, i: usize, x: f64) -> f64 {
        let g = &self.grid;
        let (j, wx) = Grid1D::locate(g.x_min, g.dx(), g.n_x, x);
        let (u0, u1) = (self.at(i, j), self.at(i, j + 1));
        if wx == 0.0 {
            u0
        } else {
            u0 + wx * (u1 - u0)
        }
    }

    pub fn map(&self, name: &str, f: impl Fn(f64) -> f64) -> Result<Self> {
        let values: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("transformed grid {name}")));
        }
        Ok(Self {
            grid: self.grid,
            values,
            meta: GridMeta {
                problem: name.to_string(),
                ..self.meta.clone()
            },
        })
    }

    /// Rows are time levels, columns space nodes; the header carries the
    /// space nodes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "t")?;
        for x in self.grid.xs() {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
        for i in 0..self.grid.n_t {
            write!(w, "{}", self.grid.t(i))?;
            for v in self.row(i) {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// JSON sidecar: grid and metadata, without the values.
    pub fn sidecar_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            grid: &'a Grid1D,
            meta: &'a GridMeta,
            min: f64,
            max: f64,
        }
        Ok(serde_json::to_string_pretty(&Sidecar {
            grid: &self.grid,
            meta: &self.meta,
            min: self.min(),
            max: self.max(),
        })?)
    }
}

/// Solves `A x = d` for tridiagonal `A` with sub-, main and super-diagonal
/// `lower`, `diag`, `upper` (`lower[0]` and `upper[n-1]` are ignored).
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64], out: &mut [f64]) -> Result<()> {
    let n = diag.len();
    let mut c_star = vec![0.0; n];
    let mut d_star = vec![0.0; n];
    let mut beta = diag[0];
    if beta.abs() < 1e-300 || !beta.is_finite() {
        return Err(Error::SingularSystem { row: 0 });
    }
    c_star[0] = upper[0] / beta;
    d_star[0] = rhs[0] / beta;
    for k in 1..n {
        beta = diag[k] - lower[k] * c_star[k - 1];
        if beta.abs() < 1e-300 || !beta.is_finite() {
            return Err(Error::SingularSystem { row: k });
        }
        c_star[k] = if k + 1 < n { upper[k] / beta } else { 0.0 };
        d_star[k] = (rhs[k] - lower[k] * d_star[k - 1]) / beta;
    }
    out[n - 1] = d_star[n - 1];
    for k in (0..n - 1).rev() {
        out[k] = d_star[k] - c_star[k] * out[k + 1];
    }
    Ok(())
}

/// Spatial operator at one time level: tridiagonal coefficients plus the
/// raw diffusion/advection/potential weights for difference-form evaluation.
struct Stencil {
    lo: Vec<f64>,
    mid: Vec<f64>,
    up: Vec<f64>,
    diff: Vec<f64>,
    adv: Vec<f64>,
    pot: Vec<f64>,
}

impl Stencil {
    fn new(n: usize) -> Self {
        Self {
            lo: vec![0.0; n],
            mid: vec![0.0; n],
            up: vec![0.0; n],
            diff: vec![0.0; n],
            adv: vec![0.0; n],
            pot: vec![0.0; n],
        }
    }

    fn fill(&mut self, problem: &ParabolicProblem, grid: &Grid1D, t: f64, max_cfl: &mut f64) -> Result<()> {
        let dx = grid.dx();
        let (inv_2dx, inv_dx2) = (0.5 / dx, 1.0 / (dx * dx));
        for j in 0..grid.n_x {
            let x = grid.x(j);
            let (b, a, c) = ((problem.b)(t, x), (problem.a)(t, x), (problem.c)(t, x));
            if !(b.is_finite() && a.is_finite() && c.is_finite()) {
                return Err(Error::NonFinite(format!("coefficients of {} at (t={t}, x={x})", problem.id)));
            }
            if a < 0.0 {
                return Err(Error::invalid("diffusion", format!("negative at (t={t}, x={x})")));
            }
            self.diff[j] = a * inv_dx2;
            self.adv[j] = b * inv_2dx;
            self.pot[j] = c;
            self.lo[j] = self.diff[j] - self.adv[j];
            self.mid[j] = c - 2.0 * self.diff[j];
            self.up[j] = self.diff[j] + self.adv[j];
            *max_cfl = max_cfl.max(2.0 * a * inv_dx2 * grid.dt());
        }
        Ok(())
    }

    /// `(L u)_j` written with differences, so that it vanishes exactly on
    /// constants when the potential is zero.
    #[inline]
    fn apply(&self, u: &[f64], j: usize) -> f64 {
        self.diff[j] * ((u[j + 1] - u[j]) - (u[j] - u[j - 1]))
            + self.adv[j] * (u[j + 1] - u[j - 1])
            + self.pot[j] * u[j]
    }
}

fn close_boundary(u: &mut [f64], rule: BoundaryRule) {
    let n = u.len();
    match rule {
        BoundaryRule::ZeroSecondDerivative => {
            u[0] = 2.0 * u[1] - u[2];
            u[n - 1] = 2.0 * u[n - 2] - u[n - 3];
        }
        BoundaryRule::ZeroFirstDerivative => {
            u[0] = u[1];
            u[n - 1] = u[n - 2];
        }
    }
}

/// Edge values implied by the rule minus the stored ones.
fn edge_mismatch(u: &[f64], rule: BoundaryRule) -> (f64, f64) {
    let n = u.len();
    match rule {
        BoundaryRule::ZeroSecondDerivative => ((2.0 * u[1] - u[2]) - u[0], (2.0 * u[n - 2] - u[n - 3]) - u[n - 1]),
        BoundaryRule::ZeroFirstDerivative => (u[1] - u[0], u[n - 2] - u[n - 1]),
    }
}

/// Marches the θ-scheme
/// `(I - θ dt L^k) u^k = (I + (1-θ) dt L^{k+1}) u^{k+1}`
/// from `u(t_end) = h` down to `t_start`.
///
/// Each step solves for the increment `u^k - u^{k+1}`, whose right-hand
/// side `dt ((1-θ) L^{k+1} + θ L^k) u^{k+1}` is exactly zero whenever
/// `u^{k+1}` is annihilated by both operators.
pub fn solve_parabolic(problem: &ParabolicProblem, grid: &Grid1D, options: SolverOptions) -> Result<GridFunction> {
    grid.validate()?;
    let theta = options.theta;
    if !(0.0..=1.0).contains(&theta) {
        return Err(Error::invalid("theta", "must lie in [0, 1]"));
    }
    let nx = grid.n_x;
    if options.boundary == BoundaryRule::ZeroSecondDerivative && nx < 4 {
        return Err(Error::invalid("grid", "linear extrapolation at the edges needs at least 4 space nodes"));
    }
    let dt = grid.dt();
    let mut values = vec![0.0; grid.n_t * nx];
    let last = grid.n_t - 1;
    for j in 0..nx {
        let v = (problem.h)(grid.x(j));
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("terminal value of {} at x = {}", problem.id, grid.x(j))));
        }
        values[last * nx + j] = v;
    }

    let m = nx - 2;
    let (mut lo, mut mid, mut up, mut rhs, mut sol) = (vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let mut cfl = 0.0f64;
    let mut next = Stencil::new(nx);
    let mut cur = Stencil::new(nx);
    next.fill(problem, grid, grid.t(last), &mut cfl)?;
    for k in (0..last).rev() {
        cur.fill(problem, grid, grid.t(k), &mut cfl)?;
        let (done, todo) = values.split_at_mut((k + 1) * nx);
        let u_next = &todo[..nx];
        for j in 1..nx - 1 {
            let r = j - 1;
            rhs[r] = dt * ((1.0 - theta) * next.apply(u_next, j) + theta * cur.apply(u_next, j));
            lo[r] = -theta * dt * cur.lo[j];
            mid[r] = 1.0 - theta * dt * cur.mid[j];
            up[r] = -theta * dt * cur.up[j];
        }
        // The edge relation holds for u^k, not for the increment, when u^{k+1}
        // violates it (terminal data); the mismatch moves to the right.
        let (e_lo, e_hi) = edge_mismatch(u_next, options.boundary);
        rhs[0] -= lo[0] * e_lo;
        rhs[m - 1] -= up[m - 1] * e_hi;
        // Fold the edge relation into the first and last interior rows.
        match options.boundary {
            BoundaryRule::ZeroSecondDerivative => {
                mid[0] += 2.0 * lo[0];
                up[0] -= lo[0];
                mid[m - 1] += 2.0 * up[m - 1];
                lo[m - 1] -= up[m - 1];
            }
            BoundaryRule::ZeroFirstDerivative => {
                mid[0] += lo[0];
                mid[m - 1] += up[m - 1];
            }
        }
        thomas(&lo, &mid, &up, &rhs, &mut sol)?;
        let u = &mut done[k * nx..(k + 1) * nx];
        for j in 1..nx - 1 {
            u[j] = u_next[j] + sol[j - 1];
        }
        close_boundary(u, options.boundary);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("solution of {} at t = {}", problem.id, grid.t(k))));
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(GridFunction {
        grid: *grid,
        values,
        meta: GridMeta {
            problem: problem.id.clone(),
            scheme_theta: theta,
            boundary: options.boundary,
            cfl: (theta < 0.5).then_some(cfl),
        },
    })
}

/// `u_x` by central differences inside and second-order one-sided
/// differences at the two edges.
pub fn grid_gradient(u: &GridFunction) -> Result<GridFunction> {
    let g = u.grid;
    if g.n_x < 3 {
        return Err(Error::invalid("grid", "gradient needs at least 3 space nodes"));
    }
    let (nx, dx) = (g.n_x, g.dx());
    let mut values = vec![0.0; u.values.len()];
    for i in 0..g.n_t {
        let row = u.row(i);
        let out = &mut values[i * nx..(i + 1) * nx];
        for j in 1..nx - 1 {
            out[j] = (row[j + 1] - row[j - 1]) / (2.0 * dx);
        }
        out[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx);
        out[nx - 1] = (3.0 * row[nx - 1] - 4.0 * row[nx - 2] + row[nx - 3]) / (2.0 * dx);
    }
    Ok(GridFunction {
        grid: g,
        values,
        meta: GridMeta {
            problem: format!("d/dx {}", u.meta.problem),
            ..u.meta.clone()
        },
    })
}

fn one_factor(model: &FactorModelSpec, maturity: f64) -> Result<Arc<FactorModelSpec>> {
    if model.n != 1 {
        return Err(Error::NotOneFactor(model.n));
    }
    if !(maturity > 0.0 && maturity <= model.horizon + 1e-12) {
        return Err(Error::invalid("maturity", format!("must lie in (0, {}]", model.horizon)));
    }
    Ok(Arc::new(model.clone()))
}

/// `g(t,x) * theta(t,x)` for a one-factor model (sum over Brownian drivers).
fn g_dot(model: &FactorModelSpec, t: f64, x: f64, other: &[f64]) -> f64 {
    let g = model.g.eval_vec(t, &[x]);
    g.iter().zip(other).map(|(a, b)| a * b).sum()
}

fn half_g_sq(model: &FactorModelSpec, t: f64, x: f64) -> f64 {
    let mut g = [0.0; 16];
    let g = &mut g[..model.d];
    model.g.eval_into(t, &[x], g);
    0.5 * g.iter().map(|v| v * v).sum::<f64>()
}

/// Benchmarked bond `p^T`: `b = f`, `c = 0`, `h = 1 / v*(T, x)`.
pub fn zcb_problem(model: &FactorModelSpec, maturity: f64) -> Result<ParabolicProblem> {
    let m = one_factor(model, maturity)?;
    m.v_star()?;
    let (mb, ma, mh) = (m.clone(), m.clone(), m);
    Ok(ParabolicProblem::new(
        format!("zcb T={maturity}"),
        move |t, x| mb.f.eval_scalar(t, &[x]),
        move |t, x| half_g_sq(&ma, t, x),
        |_, _| 0.0,
        move |x| 1.0 / mh.v_star.as_ref().map_or(f64::NAN, |v| v.eval_scalar(maturity, &[x])),
    ))
}

/// Spot spread `s^T`: `b = f - g theta`, `c = phi`, `h = 1`.
pub fn spot_spread_problem(model: &FactorModelSpec, maturity: f64) -> Result<ParabolicProblem> {
    let m = one_factor(model, maturity)?;
    let (mb, ma, mc) = (m.clone(), m.clone(), m);
    Ok(ParabolicProblem::new(
        format!("spot spread T={maturity}"),
        move |t, x| {
            let theta = mb.theta.eval_vec(t, &[x]);
            mb.f.eval_scalar(t, &[x]) - g_dot(&mb, t, x, &theta)
        },
        move |t, x| half_g_sq(&ma, t, x),
        move |t, x| mc.phi.eval_scalar(t, &[x]),
        |_| 1.0,
    ))
}

/// Forward spread `s^{T,delta}`: `b = f + g^2 p_x / p`, `c = 0`, terminal
/// data `s^{T+delta}(T, x)` read from `s_long`.
///
/// The problem lives on the grid of `p_hat` (which must end at `T`); `s_long`
/// must share its space nodes and have `T` as a time level.
pub fn forward_spread_problem(
    model: &FactorModelSpec,
    maturity: f64,
    delta: f64,
    p_hat: &GridFunction,
    s_long: &GridFunction,
) -> Result<ParabolicProblem> {
    let m = one_factor(model, maturity)?;
    if !(delta > 0.0) {
        return Err(Error::invalid("delta", "must be positive"));
    }
    if !p_hat.grid.same_space(&s_long.grid) {
        return Err(Error::GridMismatch("p_hat and s_long use different space nodes".into()));
    }
    if (p_hat.grid.t_end - maturity).abs() > 1e-9 {
        return Err(Error::GridMismatch(format!("p_hat grid ends at {} instead of T = {maturity}", p_hat.grid.t_end)));
    }
    if (s_long.grid.t_end - (maturity + delta)).abs() > 1e-9 {
        return Err(Error::GridMismatch("s_long must be the spread to T + delta".into()));
    }
    if let Some(bad) = p_hat.values.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::invalid("p_hat", format!("must be strictly positive, found {bad}")));
    }
    let terminal: Vec<f64> = s_long.row_at(maturity)?.to_vec();
    let dp = grid_gradient(p_hat)?;
    let log_slope = GridFunction {
        values: dp.values.iter().zip(&p_hat.values).map(|(d, p)| d / p).collect(),
        ..dp
    };
    let grid = p_hat.grid;
    let ma = m.clone();
    Ok(ParabolicProblem::new(
        format!("forward spread T={maturity} delta={delta}"),
        move |t, x| m.f.eval_scalar(t, &[x]) + 2.0 * half_g_sq(&m, t, x) * log_slope.interpolate_unchecked(t, x),
        move |t, x| half_g_sq(&ma, t, x),
        |_, _| 0.0,
        move |x| {
            let (j, w) = Grid1D::locate(grid.x_min, grid.dx(), grid.n_x, x);
            if w == 0.0 {
                terminal[j]
            } else {
                terminal[j] + w * (terminal[j + 1] - terminal[j])
            }
        },
    ))
}

/// Solves `p^T` on `grid` (which must end at `T`).
pub fn solve_zcb(model: &FactorModelSpec, grid: &Grid1D, options: SolverOptions) -> Result<GridFunction> {
    solve_parabolic(&zcb_problem(model, grid.t_end)?, grid, options)
}

/// Solves `s^T` on `grid` (which must end at `T`).
pub fn solve_spot_spread(model: &FactorModelSpec, grid: &Grid1D, options: SolverOptions) -> Result<GridFunction> {
    solve_parabolic(&spot_spread_problem(model, grid.t_end)?, grid, options)
}

/// Forward-spread solution together with its inputs.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub p_hat: GridFunction,
    pub s_long: GridFunction,
    pub s_fwd: GridFunction,
}

/// Solves `p^T` and `s^{T,delta}` on `grid` (ending at `T`), with
/// `s^{T+delta}` solved on `[t_start, T + delta]` so that its values at `T`
/// fall on a grid level. The long grid keeps the time step of `grid`
/// as closely as possible.
pub fn solve_forward_spread(
    model: &FactorModelSpec,
    grid: &Grid1D,
    delta: f64,
    options: SolverOptions,
) -> Result<ForwardSolution> {
    let maturity = grid.t_end;
    let long = long_grid(grid, delta)?;
    let p_hat = solve_zcb(model, grid, options)?;
    let s_long = solve_spot_spread(model, &long, options)?;
    let problem = forward_spread_problem(model, maturity, delta, &p_hat, &s_long)?;
    let s_fwd = solve_parabolic(&problem, grid, options)?;
    Ok(ForwardSolution { p_hat, s_long, s_fwd })
}

/// Grid on `[t_start, T + delta]` whose levels include every level of
/// `grid` and `T` itself: the step on `[T, T + delta]` is the largest
/// divisor of `delta` not exceeding `grid.dt()`.
pub fn long_grid(grid: &Grid1D, delta: f64) -> Result<Grid1D> {
    let head = grid.n_t - 1;
    let tail = (delta / grid.dt() - 1e-9).ceil().max(1.0) as usize;
    // Uniform spacing requires the tail to reuse the head's step; fall back
    // to an evenly refined head otherwise.
    let step = grid.dt();
    if ((tail as f64) * step - delta).abs() <= 1e-9 * delta.max(1.0) {
        return Grid1D::new(grid.x_min, grid.x_max, grid.n_x, grid.t_start, grid.t_end + delta, head + tail + 1);
    }
    // Choose a common step `(T - t) / a = delta / b`.
    let span = grid.t_end - grid.t_start;
    for a in head..head * 64 {
        let s = span / a as f64;
        let b = delta / s;
        if (b - b.round()).abs() < 1e-9 && b.round() >= 1.0 {
            return Grid1D::new(
                grid.x_min,
                grid.x_max,
                grid.n_x,
                grid.t_start,
                grid.t_end + delta,
                a + b.round() as usize + 1,
            );
        }
    }
    Err(Error::GridMismatch(format!(
        "cannot align a uniform grid with T - t = {span} and delta = {delta}"
    )))
}

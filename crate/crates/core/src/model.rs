//! Markovian factor-market specifications and the GOP consistency check.
//!
//! A model is the factor SDE `dX = f dt + g dW` on a box `D`, together with
//! the short rate `r`, market price of risk `theta`, funding-liquidity spread
//! `phi` and, optionally, a GOP value function `v*` with `V*_t = v*(t, X_t)`.
//! The distribution of `X_t` is assumed to have full support on `D`; this is
//! a modelling assumption and is not checked.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::field::CoefficientField;

/// Axis-aligned box `[lower_i, upper_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                context: "domain bounds",
                expected: lower.len(),
                actual: upper.len(),
            });
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid("domain", format!("need finite lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }

    /// Distance from `x` to the nearest face, per coordinate minimum.
    pub fn margin(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (v - l).min(u - v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModelSpec {
    /// Factor dimension.
    pub n: usize,
    /// Brownian dimension.
    pub d: usize,
    /// Drift, n-vector.
    pub f: CoefficientField,
    /// Diffusion, n x d row-major.
    pub g: CoefficientField,
    pub r: CoefficientField,
    /// Market price of risk, d-vector.
    pub theta: CoefficientField,
    pub phi: CoefficientField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_star: Option<CoefficientField>,
    pub x0: Vec<f64>,
    pub domain: Domain,
    pub horizon: f64,
}

/// Default finite-difference step for consistency checks.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

impl FactorModelSpec {
    /// Checks arities, the initial point, positivity of `v*` and
    /// `v*(0, x0) = 1`, and finiteness of every field on a probe set.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::invalid("n/d", "dimensions must be positive"));
        }
        ensure_finite("horizon", self.horizon)?;
        if self.horizon <= 0.0 {
            return Err(Error::invalid("horizon", "must be positive"));
        }
        if self.domain.dim() != self.n {
            return Err(Error::Dimension {
                context: "domain",
                expected: self.n,
                actual: self.domain.dim(),
            });
        }
        if self.x0.len() != self.n {
            return Err(Error::Dimension {
                context: "x0",
                expected: self.n,
                actual: self.x0.len(),
            });
        }
        if !self.domain.contains(&self.x0) {
            return Err(Error::OutOfDomain {
                t: 0.0,
                point: self.x0.clone(),
                reason: "x0 not in D".into(),
            });
        }
        let arities: [(&'static str, &CoefficientField, usize); 5] = [
            ("f", &self.f, self.n),
            ("g", &self.g, self.n * self.d),
            ("r", &self.r, 1),
            ("theta", &self.theta, self.d),
            ("phi", &self.phi, 1),
        ];
        for (name, field, len) in arities {
            field.validate()?;
            if field.output_len() != len {
                return Err(Error::Dimension {
                    context: name,
                    expected: len,
                    actual: field.output_len(),
                });
            }
            if let Some(k) = field.input_len() {
                if k != self.n {
                    return Err(Error::Dimension {
                        context: name,
                        expected: self.n,
                        actual: k,
                    });
                }
            }
        }
        if let Some(v) = &self.v_star {
            v.validate()?;
            if v.output_len() != 1 {
                return Err(Error::Dimension {
                    context: "v_star",
                    expected: 1,
                    actual: v.output_len(),
                });
            }
            let v0 = v.eval_scalar(0.0, &self.x0);
            if (v0 - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("v_star", format!("v*(0, x0) must be 1, got {v0}")));
            }
        }
        for (t, x) in self.probe_points() {
            for (name, field) in [
                ("f", &self.f),
                ("g", &self.g),
                ("r", &self.r),
                ("theta", &self.theta),
                ("phi", &self.phi),
            ] {
                if field.eval_vec(t, &x).iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("{name} at t={t}, x={x:?}")));
                }
            }
            if let Some(v) = &self.v_star {
                let val = v.eval_scalar(t, &x);
                if !(val.is_finite() && val > 0.0) {
                    return Err(Error::invalid("v_star", format!("must be finite and positive, got {val} at t={t}, x={x:?}")));
                }
            }
        }
        Ok(())
    }

    /// Corners, center and x0 of the box, at a few times across the horizon.
    fn probe_points(&self) -> Vec<(f64, Vec<f64>)> {
        let mut xs = vec![self.x0.clone(), self.domain.center()];
        if self.n <= 6 {
            for mask in 0..(1usize << self.n) {
                xs.push(
                    (0..self.n)
                        .map(|i| if mask >> i & 1 == 1 { self.domain.upper[i] } else { self.domain.lower[i] })
                        .collect(),
                );
            }
        }
        let mut out = Vec::new();
        for t in [0.0, 0.5 * self.horizon, self.horizon] {
            for x in &xs {
                out.push((t, x.clone()));
            }
        }
        out
    }

    pub fn v_star(&self) -> Result<&CoefficientField> {
        self.v_star.as_ref().ok_or(Error::MissingValueFunction)
    }

    pub fn with_phi(&self, phi: CoefficientField) -> Self {
        Self { phi, ..self.clone() }
    }

    pub fn with_domain(mut self, domain: Domain) -> Result<Self> {
        self.domain = domain;
        self.validate()?;
        Ok(self)
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        self.horizon = horizon;
        self.validate()?;
        Ok(self)
    }

    /// Samples `phi` over the domain and reports whether it stays `>= 0`.
    pub fn phi_nonnegative(&self) -> bool {
        const NODES: usize = 101;
        let mut points: Vec<Vec<f64>> = Vec::new();
        if self.n == 1 {
            let (l, u) = (self.domain.lower[0], self.domain.upper[0]);
            points.extend((0..NODES).map(|j| vec![l + (u - l) * j as f64 / (NODES - 1) as f64]));
        } else {
            points.extend(self.probe_points().into_iter().map(|(_, x)| x));
        }
        [0.0, 0.5 * self.horizon, self.horizon]
            .iter()
            .all(|&t| points.iter().all(|x| self.phi.eval_scalar(t, x) >= 0.0))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: Self = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }
}

/// One-factor Vasicek dynamics `f = kappa (mu_bar - x)`, `g = sigma_x`, with
/// `r`, `theta` and `v*` chosen so that both GOP conditions hold exactly:
/// `v* = exp(lambda (x - x0))`, `theta = sigma_x lambda`,
/// `r = lambda kappa (mu_bar - x) - lambda^2 sigma_x^2 / 2`.
///
/// The domain is `mu_bar +- 6` stationary standard deviations (or
/// `x0 +- 6 sigma_x sqrt(horizon)` when `kappa = 0`) and the horizon is 10y.
pub fn build_consistent_vasicek(
    kappa: f64,
    mu_bar: f64,
    sigma_x: f64,
    lambda: f64,
    phi: CoefficientField,
    x0: f64,
) -> Result<FactorModelSpec> {
    for (name, v) in [("kappa", kappa), ("mu_bar", mu_bar), ("sigma_x", sigma_x), ("lambda", lambda), ("x0", x0)] {
        ensure_finite(name, v)?;
    }
    if sigma_x <= 0.0 {
        return Err(Error::invalid("sigma_x", "must be positive"));
    }
    if kappa < 0.0 {
        return Err(Error::invalid("kappa", "must be non-negative"));
    }
    let horizon: f64 = 10.0;
    let (lo, hi) = if kappa > 0.0 {
        let sd = sigma_x / (2.0 * kappa).sqrt();
        (mu_bar.min(x0) - 6.0 * sd, mu_bar.max(x0) + 6.0 * sd)
    } else {
        let sd = sigma_x * horizon.sqrt();
        (x0 - 6.0 * sd, x0 + 6.0 * sd)
    };
    let model = FactorModelSpec {
        n: 1,
        d: 1,
        f: CoefficientField::affine_1d(kappa * mu_bar, -kappa),
        g: CoefficientField::constant(sigma_x),
        r: CoefficientField::affine_1d(
            lambda * kappa * mu_bar - 0.5 * lambda * lambda * sigma_x * sigma_x,
            -lambda * kappa,
        ),
        theta: CoefficientField::constant(sigma_x * lambda),
        phi,
        v_star: Some(CoefficientField::ExpAffine {
            scale: 1.0,
            time_rate: 0.0,
            slope: vec![lambda],
            anchor: vec![x0],
        }),
        x0: vec![x0],
        domain: Domain::interval(lo, hi)?,
        horizon,
    };
    model.validate()?;
    Ok(model)
}

/// Constant short rate `r0` and market price of risk `theta`, with a driftless
/// factor `dX = sigma_x dW` carrying the GOP:
/// `v* = exp((r0 + theta^2 / 2) t + (theta / sigma_x)(x - x0))`.
/// With `theta = 0` this is the deterministic `v* = exp(r0 t)`.
pub fn build_constant_coefficient(
    r0: f64,
    theta: f64,
    sigma_x: f64,
    phi: CoefficientField,
    x0: f64,
) -> Result<FactorModelSpec> {
    for (name, v) in [("r0", r0), ("theta", theta), ("sigma_x", sigma_x), ("x0", x0)] {
        ensure_finite(name, v)?;
    }
    if sigma_x <= 0.0 {
        return Err(Error::invalid("sigma_x", "must be positive"));
    }
    let horizon: f64 = 10.0;
    let half = 6.0 * sigma_x * horizon.sqrt();
    let model = FactorModelSpec {
        n: 1,
        d: 1,
        f: CoefficientField::constant(0.0),
        g: CoefficientField::constant(sigma_x),
        r: CoefficientField::constant(r0),
        theta: CoefficientField::constant(theta),
        phi,
        v_star: Some(CoefficientField::ExpAffine {
            scale: 1.0,
            time_rate: r0 + 0.5 * theta * theta,
            slope: vec![theta / sigma_x],
            anchor: vec![x0],
        }),
        x0: vec![x0],
        domain: Domain::interval(x0 - half, x0 + half)?,
        horizon,
    };
    model.validate()?;
    Ok(model)
}

/// Residuals of both GOP conditions at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GopResidual {
    pub t: f64,
    pub x: Vec<f64>,
    pub v_star: f64,
    /// `g^T grad v* - v* theta`, d-vector.
    pub cond1: Vec<f64>,
    /// `dv*/dt + grad v* . (f - g theta) + tr(g^T H g)/2 - v* r`.
    pub cond2: f64,
    /// Spatial steps used per coordinate.
    pub space_steps: Vec<f64>,
    pub time_step: f64,
}

impl GopResidual {
    /// Largest residual component divided by `v*`.
    pub fn max_relative(&self) -> f64 {
        self.cond1
            .iter()
            .map(|c| c.abs())
            .fold(self.cond2.abs(), f64::max)
            / self.v_star
    }
}

/// Evaluates both GOP conditions with central finite differences.
///
/// Spatial steps are `step * max(1, |x_i|)`; the time derivative uses a
/// central difference, or a second-order one-sided stencil within one step
/// of `t = 0` or the horizon.
pub fn gop_consistency_residuals(
    model: &FactorModelSpec,
    points: &[(f64, Vec<f64>)],
    step: f64,
) -> Result<Vec<GopResidual>> {
    let v = model.v_star()?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", "must be positive"));
    }
    let (n, d) = (model.n, model.d);
    points
        .iter()
        .map(|(t, x)| {
            let t = *t;
            if x.len() != n {
                return Err(Error::Dimension {
                    context: "residual point",
                    expected: n,
                    actual: x.len(),
                });
            }
            if !(0.0..=model.horizon).contains(&t) {
                return Err(Error::OutOfDomain {
                    t,
                    point: x.clone(),
                    reason: "time outside [0, horizon]".into(),
                });
            }
            let hs: Vec<f64> = x.iter().map(|xi| step * xi.abs().max(1.0)).collect();
            for i in 0..n {
                if x[i] - hs[i] < model.domain.lower[i] || x[i] + hs[i] > model.domain.upper[i] {
                    return Err(Error::OutOfDomain {
                        t,
                        point: x.clone(),
                        reason: "within one finite-difference step of the boundary".into(),
                    });
                }
            }
            let at = |tt: f64, xx: &[f64]| v.eval_scalar(tt, xx);
            let v0 = at(t, x);
            let mut grad = vec![0.0; n];
            let mut hess = vec![0.0; n * n];
            let mut xp = x.clone();
            for i in 0..n {
                xp[i] = x[i] + hs[i];
                let up = at(t, &xp);
                xp[i] = x[i] - hs[i];
                let dn = at(t, &xp);
                xp[i] = x[i];
                grad[i] = (up - dn) / (2.0 * hs[i]);
                hess[i * n + i] = (up - 2.0 * v0 + dn) / (hs[i] * hs[i]);
                for j in 0..i {
                    let corner = |si: f64, sj: f64| {
                        let mut y = x.clone();
                        y[i] += si * hs[i];
                        y[j] += sj * hs[j];
                        at(t, &y)
                    };
                    let hij = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                        / (4.0 * hs[i] * hs[j]);
                    hess[i * n + j] = hij;
                    hess[j * n + i] = hij;
                }
            }
            let ht = step * t.abs().max(1.0);
            let dvdt = if t - ht >= 0.0 && t + ht <= model.horizon {
                (at(t + ht, x) - at(t - ht, x)) / (2.0 * ht)
            } else if t - ht < 0.0 {
                (-3.0 * v0 + 4.0 * at(t + ht, x) - at(t + 2.0 * ht, x)) / (2.0 * ht)
            } else {
                (3.0 * v0 - 4.0 * at(t - ht, x) + at(t - 2.0 * ht, x)) / (2.0 * ht)
            };

            let f = model.f.eval_vec(t, x);
            let g = model.g.eval_vec(t, x);
            let theta = model.theta.eval_vec(t, x);
            let r = model.r.eval_scalar(t, x);

            // g^T grad v* - v* theta
            let cond1: Vec<f64> = (0..d)
                .map(|k| (0..n).map(|i| g[i * d + k] * grad[i]).sum::<f64>() - v0 * theta[k])
                .collect();
            let g_theta: Vec<f64> = (0..n).map(|i| (0..d).map(|k| g[i * d + k] * theta[k]).sum()).collect();
            let drift_term: f64 = (0..n).map(|i| grad[i] * (f[i] - g_theta[i])).sum();
            // tr(g^T H g) = sum_k sum_{i,j} g_ik H_ij g_jk
            let mut trace = 0.0;
            for k in 0..d {
                for i in 0..n {
                    for j in 0..n {
                        trace += g[i * d + k] * hess[i * n + j] * g[j * d + k];
                    }
                }
            }
            let cond2 = dvdt + drift_term + 0.5 * trace - v0 * r;
            Ok(GopResidual {
                t,
                x: x.clone(),
                v_star: v0,
                cond1,
                cond2,
                space_steps: hs,
                time_step: ht,
            })
        })
        .collect()
}

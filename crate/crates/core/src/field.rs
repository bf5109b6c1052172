//! Coefficient fields `(t, x) -> value` used for drift, diffusion, rates and
//! value functions.
//!
//! Fields are plain data so that models round-trip through JSON. Each builtin
//! is written as `{"name": <kind>, "params": {...}}`. Matrix-valued fields
//! are stored row-major.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

pub(crate) type Buf = SmallVec<[f64; 16]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", content = "params", rename_all = "snake_case")]
pub enum CoefficientField {
    /// Time- and state-independent value.
    Constant { value: Vec<f64> },
    /// `constant[k] + sum_j slope[k][j] * x[j]`.
    Affine {
        constant: Vec<f64>,
        slope: Vec<Vec<f64>>,
    },
    /// Scalar `curvature * |x - center|^2 + level`.
    Quadratic {
        center: Vec<f64>,
        curvature: f64,
        level: f64,
    },
    /// Scalar `scale * exp(time_rate * t + slope . (x - anchor))`.
    ExpAffine {
        scale: f64,
        time_rate: f64,
        slope: Vec<f64>,
        anchor: Vec<f64>,
    },
    /// Scalar table over a one-dimensional state, bilinear in `(t, x)`,
    /// flat beyond the table edges. `values[i][j]` sits at `(t[i], x[j])`;
    /// a single time row makes the table time-invariant.
    Tabulated {
        t: Vec<f64>,
        x: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// Pointwise sum of fields of equal arity.
    Sum { terms: Vec<CoefficientField> },
    /// Funding-liquidity spread implied by a risk-sensitive investor.
    RiskSensitiveSpread(Box<SpreadComposition>),
}

/// Inputs of the endogenous spread, evaluated pointwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadComposition {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub r: CoefficientField,
    pub mu: CoefficientField,
    pub sigma: CoefficientField,
    pub g: CoefficientField,
    pub xi: CoefficientField,
    pub gamma: f64,
}

impl CoefficientField {
    pub fn constant(value: f64) -> Self {
        CoefficientField::Constant { value: vec![value] }
    }

    pub fn constant_vec(value: Vec<f64>) -> Self {
        CoefficientField::Constant { value }
    }

    /// One-dimensional affine scalar `a + b x`.
    pub fn affine_1d(a: f64, b: f64) -> Self {
        CoefficientField::Affine {
            constant: vec![a],
            slope: vec![vec![b]],
        }
    }

    pub fn quadratic_1d(center: f64, curvature: f64, level: f64) -> Self {
        CoefficientField::Quadratic {
            center: vec![center],
            curvature,
            level,
        }
    }

    pub fn plus(self, other: CoefficientField) -> Self {
        match self {
            CoefficientField::Sum { mut terms } => {
                terms.push(other);
                CoefficientField::Sum { terms }
            }
            f => CoefficientField::Sum {
                terms: vec![f, other],
            },
        }
    }

    /// Number of scalar components produced by one evaluation.
    pub fn output_len(&self) -> usize {
        match self {
            CoefficientField::Constant { value } => value.len(),
            CoefficientField::Affine { constant, .. } => constant.len(),
            CoefficientField::Sum { terms } => terms.first().map_or(0, |t| t.output_len()),
            _ => 1,
        }
    }

    /// State dimension the field expects, when it constrains one.
    pub fn input_len(&self) -> Option<usize> {
        match self {
            CoefficientField::Constant { .. } => None,
            CoefficientField::Affine { slope, .. } => slope.first().map(|r| r.len()),
            CoefficientField::Quadratic { center, .. } => Some(center.len()),
            CoefficientField::ExpAffine { slope, .. } => Some(slope.len()),
            CoefficientField::Tabulated { .. } => Some(1),
            CoefficientField::Sum { terms } => terms.iter().find_map(|t| t.input_len()),
            CoefficientField::RiskSensitiveSpread(c) => Some(c.n),
        }
    }

    /// True when the field ignores both `t` and `x`.
    pub fn is_constant(&self) -> bool {
        match self {
            CoefficientField::Constant { .. } => true,
            CoefficientField::Affine { slope, .. } => slope.iter().flatten().all(|&b| b == 0.0),
            CoefficientField::Quadratic { curvature, .. } => *curvature == 0.0,
            CoefficientField::ExpAffine {
                time_rate, slope, ..
            } => *time_rate == 0.0 && slope.iter().all(|&b| b == 0.0),
            CoefficientField::Tabulated { values, .. } => {
                let first = values.first().and_then(|r| r.first()).copied();
                values.iter().flatten().all(|&v| Some(v) == first)
            }
            CoefficientField::Sum { terms } => terms.iter().all(|t| t.is_constant()),
            CoefficientField::RiskSensitiveSpread(c) => {
                c.r.is_constant()
                    && c.mu.is_constant()
                    && c.sigma.is_constant()
                    && c.g.is_constant()
                    && c.xi.is_constant()
            }
        }
    }

    /// True when the field is identically zero by construction.
    pub fn is_zero(&self) -> bool {
        match self {
            CoefficientField::Constant { value } => value.iter().all(|&v| v == 0.0),
            CoefficientField::Affine { constant, slope } => {
                constant.iter().all(|&v| v == 0.0) && slope.iter().flatten().all(|&v| v == 0.0)
            }
            CoefficientField::Quadratic {
                curvature, level, ..
            } => *curvature == 0.0 && *level == 0.0,
            CoefficientField::ExpAffine { scale, .. } => *scale == 0.0,
            CoefficientField::Tabulated { values, .. } => values.iter().flatten().all(|&v| v == 0.0),
            CoefficientField::Sum { terms } => terms.iter().all(|t| t.is_zero()),
            CoefficientField::RiskSensitiveSpread(c) => c.gamma == 0.0,
        }
    }

    /// Evaluates the field at `(t, x)` into `out`, whose length must equal
    /// [`output_len`](Self::output_len).
    pub fn eval_into(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            CoefficientField::Constant { value } => out.copy_from_slice(value),
            CoefficientField::Affine { constant, slope } => {
                for (k, o) in out.iter_mut().enumerate() {
                    let mut v = constant[k];
                    for (b, xj) in slope[k].iter().zip(x) {
                        v += b * xj;
                    }
                    *o = v;
                }
            }
            CoefficientField::Quadratic {
                center,
                curvature,
                level,
            } => {
                let mut q = 0.0;
                for (c, xj) in center.iter().zip(x) {
                    q += (xj - c) * (xj - c);
                }
                out[0] = curvature * q + level;
            }
            CoefficientField::ExpAffine {
                scale,
                time_rate,
                slope,
                anchor,
            } => {
                let mut e = time_rate * t;
                for ((b, a), xj) in slope.iter().zip(anchor).zip(x) {
                    e += b * (xj - a);
                }
                out[0] = scale * e.exp();
            }
            CoefficientField::Tabulated {
                t: ts,
                x: xs,
                values,
            } => out[0] = table_lookup(ts, xs, values, t, x[0]),
            CoefficientField::Sum { terms } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut tmp: Buf = SmallVec::from_elem(0.0, out.len());
                for term in terms {
                    term.eval_into(t, x, &mut tmp);
                    for (o, v) in out.iter_mut().zip(&tmp) {
                        *o += v;
                    }
                }
            }
            CoefficientField::RiskSensitiveSpread(c) => out[0] = c.eval(t, x),
        }
    }

    pub fn eval_scalar(&self, t: f64, x: &[f64]) -> f64 {
        let mut out = [0.0];
        self.eval_into(t, x, &mut out);
        out[0]
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.output_len()];
        self.eval_into(t, x, &mut out);
        out
    }

    /// Structural checks that do not need a state point.
    pub fn validate(&self) -> Result<()> {
        match self {
            CoefficientField::Constant { value } if value.is_empty() => {
                Err(Error::invalid("field", "constant with no components"))
            }
            CoefficientField::Affine { constant, slope } => {
                if constant.len() != slope.len() {
                    return Err(Error::Dimension {
                        context: "affine field rows",
                        expected: constant.len(),
                        actual: slope.len(),
                    });
                }
                let w = slope.first().map_or(0, |r| r.len());
                if slope.iter().any(|r| r.len() != w) {
                    return Err(Error::invalid("field", "ragged affine slope"));
                }
                Ok(())
            }
            CoefficientField::ExpAffine { slope, anchor, .. } if slope.len() != anchor.len() => {
                Err(Error::Dimension {
                    context: "exp-affine anchor",
                    expected: slope.len(),
                    actual: anchor.len(),
                })
            }
            CoefficientField::Tabulated { t, x, values } => {
                if x.len() < 2 || t.is_empty() || values.len() != t.len() {
                    return Err(Error::invalid("field", "table needs >= 2 x nodes and one row per time"));
                }
                if values.iter().any(|r| r.len() != x.len()) {
                    return Err(Error::invalid("field", "table row length differs from x grid"));
                }
                if x.windows(2).any(|w| w[1] <= w[0]) || t.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid("field", "table axes must be strictly increasing"));
                }
                Ok(())
            }
            CoefficientField::Sum { terms } => {
                let len = self.output_len();
                for term in terms {
                    term.validate()?;
                    if term.output_len() != len {
                        return Err(Error::Dimension {
                            context: "sum field terms",
                            expected: len,
                            actual: term.output_len(),
                        });
                    }
                }
                if terms.is_empty() {
                    return Err(Error::invalid("field", "empty sum"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

impl SpreadComposition {
    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        let r = self.r.eval_scalar(t, x);
        let mut mu: Buf = SmallVec::from_elem(0.0, self.m);
        let mut sigma: Buf = SmallVec::from_elem(0.0, self.m * self.d);
        let mut g: Buf = SmallVec::from_elem(0.0, self.n * self.d);
        let mut xi: Buf = SmallVec::from_elem(0.0, self.n);
        self.mu.eval_into(t, x, &mut mu);
        self.sigma.eval_into(t, x, &mut sigma);
        self.g.eval_into(t, x, &mut g);
        self.xi.eval_into(t, x, &mut xi);
        let theta = match crate::risk::market_price_of_risk(&mu, &sigma, self.m, self.d, r) {
            Ok(theta) => theta,
            Err(_) => return f64::NAN,
        };
        let g_xi = crate::risk::transpose_apply(&g, self.n, self.d, &xi);
        crate::risk::funding_liquidity_spread(r, &theta, &g_xi, self.gamma)
    }
}

fn bracket(axis: &[f64], v: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || v <= axis[0] {
        return (0, 0.0);
    }
    if v >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = match axis.binary_search_by(|a| a.partial_cmp(&v).unwrap()) {
        Ok(i) => i.min(n - 2),
        Err(i) => i - 1,
    };
    (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
}

fn table_lookup(ts: &[f64], xs: &[f64], values: &[Vec<f64>], t: f64, x: f64) -> f64 {
    let (j, wx) = bracket(xs, x);
    let row = |i: usize| values[i][j] * (1.0 - wx) + values[i][j + 1] * wx;
    if ts.len() == 1 {
        return row(0);
    }
    let (i, wt) = bracket(ts, t);
    row(i) * (1.0 - wt) + row(i + 1) * wt
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_uses_name_and_params() {
        let f = CoefficientField::affine_1d(0.05, -1.0);
        let s = serde_json::to_string(&f).unwrap();
        assert!(s.starts_with("{\"name\":\"affine\",\"params\":"), "{s}");
        let back: CoefficientField = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn builtins_evaluate() {
        assert_eq!(CoefficientField::affine_1d(0.08, -2.0).eval_scalar(0.0, &[0.01]), 0.06);
        let q = CoefficientField::quadratic_1d(0.05, 0.01, 0.001);
        assert!((q.eval_scalar(3.0, &[0.15]) - (0.001 + 0.01 * 0.01)).abs() < 1e-16);
        let e = CoefficientField::ExpAffine {
            scale: 1.0,
            time_rate: 0.02,
            slope: vec![2.0],
            anchor: vec![0.05],
        };
        assert!((e.eval_scalar(1.0, &[0.05]) - 0.02f64.exp()).abs() < 1e-15);
        let s = CoefficientField::constant(0.01).plus(CoefficientField::affine_1d(0.0, 1.0));
        assert_eq!(s.eval_scalar(0.0, &[0.5]), 0.51);
    }

    #[test]
    fn table_is_bilinear_and_flat_outside() {
        let f = CoefficientField::Tabulated {
            t: vec![0.0, 1.0],
            x: vec![0.0, 1.0, 2.0],
            values: vec![vec![0.0, 1.0, 2.0], vec![1.0, 2.0, 3.0]],
        };
        f.validate().unwrap();
        assert!((f.eval_scalar(0.5, &[1.5]) - 2.0).abs() < 1e-15);
        assert_eq!(f.eval_scalar(0.0, &[-5.0]), 0.0);
        assert_eq!(f.eval_scalar(2.0, &[9.0]), 3.0);
    }

    #[test]
    fn constant_detection() {
        assert!(CoefficientField::constant(0.3).is_constant());
        assert!(!CoefficientField::affine_1d(0.0, 1.0).is_constant());
        assert!(CoefficientField::affine_1d(0.2, 0.0).is_constant());
        assert!(CoefficientField::constant(0.0).is_zero());
    }
}

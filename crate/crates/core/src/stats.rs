//! Monte Carlo estimates and order-fixed reductions.

use serde::{Deserialize, Serialize};

/// Mean and standard error of a Monte Carlo estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_paths: usize,
    pub seed: u64,
}

impl Estimate {
    /// Builds an estimate from iid samples (pairs already averaged for
    /// antithetic runs). `n_paths` is the number of simulated paths.
    pub fn from_samples(samples: &[f64], n_paths: usize, seed: u64) -> Self {
        let (mean, stderr) = mean_stderr(samples);
        Self {
            mean,
            stderr,
            n_paths,
            seed,
        }
    }

    pub fn scaled(self, factor: f64) -> Self {
        Self {
            mean: self.mean * factor,
            stderr: self.stderr * factor.abs(),
            ..self
        }
    }

    /// True when `value` lies within `k` standard errors of the mean.
    pub fn covers(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("estimate serializes")
    }
}

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut s = 0.0;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&dev) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Averages consecutive pairs (antithetic partners).
pub fn pair_means(xs: &[f64]) -> Vec<f64> {
    xs.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
}

/// Ratio estimator `mean(num) / mean(den)` with delta-method standard error.
pub fn ratio_estimate(num: &[f64], den: &[f64]) -> (f64, f64) {
    let (mn, _) = mean_stderr(num);
    let (md, _) = mean_stderr(den);
    let ratio = mn / md;
    let resid: Vec<f64> = num.iter().zip(den).map(|(a, b)| a - ratio * b).collect();
    let (_, se_resid) = mean_stderr(&resid);
    (ratio, se_resid / md.abs())
}

/// Paired difference `b - a` of two estimators evaluated on common random
/// numbers.
pub fn paired_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    mean_stderr(&diff)
}

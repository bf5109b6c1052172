//! Randomized checks of the structural properties of each layer.

use proptest::prelude::*;

use rollover::control::{self, ControlBranch, VerifyConfig};
use rollover::model::{build_consistent_vasicek, gop_consistency_residuals};
use rollover::pde::{self, BoundaryRule, Grid1D, ParabolicProblem, SolverOptions};
use rollover::risk;
use rollover::sim::{self, Series, SimConfig};
use rollover::{CoefficientField, Execution};

fn vasicek_with(kappa: f64, sigma: f64, lambda: f64, phi: CoefficientField) -> rollover::FactorModelSpec {
    build_consistent_vasicek(kappa, 0.05, sigma, lambda, phi, 0.05).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn consistent_vasicek_residuals_shrink_with_step(
        kappa in 0.2f64..3.0,
        sigma in 0.02f64..0.3,
        lambda in -3.0f64..3.0,
        t in 0.5f64..9.5,
        frac in 0.2f64..0.8,
    ) {
        let m = vasicek_with(kappa, sigma, lambda, CoefficientField::constant(0.0));
        let x = m.domain.lower[0] + frac * (m.domain.upper[0] - m.domain.lower[0]);
        let at = |h: f64| gop_consistency_residuals(&m, &[(t, vec![x])], h).unwrap()[0].max_relative();
        let (coarse, fine) = (at(1e-2), at(1e-4));
        // C h^2 with C bounded by the size of the third derivatives.
        prop_assert!(coarse <= 10.0 * lambda.abs().max(1.0).powi(4) * 1e-4, "coarse {coarse}");
        prop_assert!(fine <= 1e-6, "fine {fine}");
    }

    #[test]
    fn accounts_positive_and_ordered(
        seed in any::<u64>(),
        level in 0.0f64..0.05,
        curvature in 0.0f64..0.5,
        antithetic in any::<bool>(),
    ) {
        let m = vasicek_with(1.0, 0.1, 2.0, CoefficientField::quadratic_1d(0.05, curvature, level));
        let cfg = SimConfig::new(0.0, 1.0, 2e-2, 40, seed).antithetic(antithetic);
        let b = sim::simulate(&m, &cfg, &m.x0, 1.0).unwrap();
        for k in 0..b.gop.len() {
            prop_assert!(b.gop[k] > 0.0 && b.savings[k] > 0.0 && b.borrowing[k] > 0.0);
            prop_assert!(b.borrowing[k] >= b.savings[k]);
        }
    }

    #[test]
    fn bundles_do_not_depend_on_execution_mode(seed in any::<u64>()) {
        let m = vasicek_with(1.0, 0.1, 2.0, CoefficientField::quadratic_1d(0.05, 0.01, 0.001));
        let cfg = SimConfig::new(0.0, 1.0, 5e-2, 100, seed);
        let par = sim::simulate(&m, &cfg, &m.x0, 1.0).unwrap();
        let seq = sim::simulate(&m, &cfg.clone().execution(Execution::Sequential), &m.x0, 1.0).unwrap();
        prop_assert_eq!(par.series(Series::Deflator), seq.series(Series::Deflator));
        prop_assert_eq!(par.factor, seq.factor);
    }

    #[test]
    fn implicit_scheme_obeys_maximum_principle(
        b0 in -0.5f64..0.5,
        b1 in -0.5f64..0.5,
        a0 in 0.005f64..0.05,
        w1 in -1.0f64..1.0,
        w2 in -1.0f64..1.0,
    ) {
        let grid = Grid1D::new(0.0, 1.0, 101, 0.0, 1.0, 51).unwrap();
        let h = move |x: f64| w1 * (3.0 * x).sin() + w2 * (7.0 * x).cos() + x * x;
        let problem = ParabolicProblem::new(
            "max-principle",
            move |t, x| b0 + b1 * x * (1.0 - t),
            move |_, x| a0 * (1.0 + x),
            |_, _| 0.0,
            h,
        );
        let opts = SolverOptions::implicit().boundary(BoundaryRule::ZeroFirstDerivative);
        let u = pde::solve_parabolic(&problem, &grid, opts).unwrap();
        let terminal: Vec<f64> = grid.xs().into_iter().map(h).collect();
        let lo = terminal.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = terminal.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(u.min() >= lo - 1e-12 && u.max() <= hi + 1e-12, "[{}, {}] vs [{lo}, {hi}]", u.min(), u.max());
    }

    #[test]
    fn constants_survive_any_coefficients(
        value in -5.0f64..5.0,
        b0 in -1.0f64..1.0,
        a0 in 0.001f64..0.1,
        theta in prop::sample::select(vec![0.5, 1.0]),
    ) {
        let grid = Grid1D::new(-1.0, 1.0, 80, 0.0, 2.0, 40).unwrap();
        let problem = ParabolicProblem::new("constant", move |t, x| b0 * x + t, move |_, x| a0 * (1.0 + x * x), |_, _| 0.0, move |_| value);
        let opts = SolverOptions { theta, ..SolverOptions::default() };
        let u = pde::solve_parabolic(&problem, &grid, opts).unwrap();
        prop_assert!(u.values.iter().all(|v| (v - value).abs() <= 1e-12));
    }

    #[test]
    fn implicit_spreads_stay_above_one(level in 0.0f64..0.05, curvature in 0.0f64..1.0, maturity in 0.25f64..3.0) {
        let m = vasicek_with(1.0, 0.1, 2.0, CoefficientField::quadratic_1d(0.05, curvature, level));
        let grid = Grid1D::over_domain(&m, 0.0, maturity, 120, 60).unwrap();
        let s = pde::solve_spot_spread(&m, &grid, SolverOptions::implicit()).unwrap();
        prop_assert!(s.min() >= 1.0 - 1e-8);
    }

    #[test]
    fn spreads_increase_with_constant_spread(pa in 0.0f64..0.05, gap in 1e-4f64..0.05) {
        let solve = |phi: f64| {
            let m = vasicek_with(1.0, 0.1, 2.0, CoefficientField::constant(phi));
            let grid = Grid1D::over_domain(&m, 0.0, 2.0, 60, 40).unwrap();
            pde::solve_spot_spread(&m, &grid, SolverOptions::default()).unwrap()
        };
        let (a, b) = (solve(pa), solve(pa + gap));
        let last = a.grid.n_t - 1;
        for i in 0..last {
            for (u, v) in a.row(i).iter().zip(b.row(i)) {
                prop_assert!(v > u);
            }
        }
    }

    #[test]
    fn spread_vanishes_without_risk_aversion(
        r in -0.1f64..0.2,
        theta in prop::collection::vec(-2.0f64..2.0, 1..4),
        scale in -2.0f64..2.0,
    ) {
        let g_xi: Vec<f64> = theta.iter().map(|t| scale * t + 0.1).collect();
        prop_assert_eq!(risk::funding_liquidity_spread(r, &theta, &g_xi, 0.0), 0.0);
    }

    #[test]
    fn spread_without_hedging_demand(r in -0.1f64..0.2, theta in prop::collection::vec(-2.0f64..2.0, 1..4), gamma in -20.0f64..-1e-3) {
        let zeros = vec![0.0; theta.len()];
        let full = risk::funding_liquidity_spread(r, &theta, &zeros, gamma);
        let norm_sq: f64 = theta.iter().map(|t| t * t).sum();
        let simple = -gamma * (r + norm_sq / (2.0 * (1.0 - gamma)));
        prop_assert!((full - simple).abs() <= 1e-14 * (1.0 + simple.abs()));
    }
}

#[test]
fn standard_error_scales_with_path_count() {
    let m = vasicek_with(1.0, 0.1, 2.0, CoefficientField::quadratic_1d(0.05, 0.01, 0.001));
    let cfg = SimConfig::new(0.0, 1.0, 1e-2, 20_000, 9);
    let se = |n: usize| sim::mc_spot_spread(&m, 1.0, 0.0, &[0.05], &SimConfig { n_paths: n, ..cfg.clone() }).unwrap().stderr;
    let ratio = se(40_000) / se(20_000);
    let expected = 0.5f64.sqrt();
    assert!((ratio / expected - 1.0).abs() <= 0.2, "ratio {ratio}");
}

#[test]
fn negative_eta_reproduces_the_spread() {
    let m = vasicek_with(1.0, 0.1, 2.0, CoefficientField::quadratic_1d(0.05, 0.01, 0.001));
    let cfg = VerifyConfig {
        n_x: 200,
        n_t: 100,
        sim: SimConfig::new(0.0, 1.0, 1e-2, 2_000, 4),
        perturbation_probes: 1,
        ..VerifyConfig::default()
    };
    let report = control::verify_spot_representation(&m, 1.0, &[0.5], &[-1.0, 2.0], &cfg, &[(0.0, 0.05), (0.5, 0.1)]).unwrap();
    assert!(report.passed(), "{}", report.to_text());
    let negative: Vec<_> = report.identities.iter().filter(|r| r.eta == Some(-1.0)).collect();
    assert_eq!(negative.len(), 2);
    assert!(negative.iter().all(|r| r.passed));
    // The right-hand sandwich is only asserted for eta > 1.
    assert!(report.sandwich.iter().all(|row| row.eta_upper > 1.0));
    assert!(ControlBranch::upper(-1.0).unwrap().prefactor() == 2.0f64.sqrt());
}

#[test]
fn martingale_test_detects_spread_offsets() {
    use rollover::model::build_constant_coefficient;
    use rollover::risk::{AssetMarketSpec, RiskParams};
    let base = build_constant_coefficient(0.02, 0.3, 0.2, CoefficientField::constant(0.0), 0.0).unwrap();
    let market = AssetMarketSpec::implied_by(&base, vec![0.2]).unwrap();
    let params = RiskParams::new(-2.0, 1).unwrap();
    let model = risk::rs_spread_pipeline(&base, &market, &params).unwrap();
    let phi = model.phi.eval_scalar(0.0, &[0.0]);
    let cfg = SimConfig::new(0.0, 1.0, 1e-2, 40_000, 8).record_stride(100);
    assert!(risk::verify_rs_martingale(&model, &market, &params, &cfg).unwrap().passes);
    for offset in [0.02, 0.05] {
        let shifted = model.with_phi(CoefficientField::constant(phi + offset));
        let r = risk::verify_rs_martingale(&shifted, &market, &params, &cfg).unwrap();
        assert!(r.drift.z > 3.0, "offset {offset}: z = {}", r.drift.z);
    }
}

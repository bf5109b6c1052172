//! Numerical laboratory for interest-rate markets with roll-over risk.
//!
//! A Markovian factor model drives the short rate, the market price of risk
//! and the funding-liquidity spread. On top of it the crate computes
//! benchmarked zero-coupon bond prices, spot and forward multiplicative
//! spreads, term rates and single-period swap values, both by finite
//! differences ([`pde`]) and by Feynman–Kac Monte Carlo ([`sim`]). The
//! [`control`] module checks the stochastic-control representations of
//! bonds and spreads, and [`risk`] endogenizes the spread through a
//! risk-sensitive representative investor.
//!
//! Monte Carlo work is path-parallel when the `parallel` feature (default)
//! is enabled and falls back to a sequential loop otherwise. Results are
//! bit-identical in both modes: every path draws from its own counter-based
//! stream and reductions run in a fixed order.

pub mod control;
pub mod curves;
pub mod error;
pub mod exec;
pub mod field;
pub mod model;
pub mod pde;
pub mod risk;
pub mod rng;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
pub use exec::Execution;
pub use field::CoefficientField;
pub use model::{Domain, FactorModelSpec};
pub use stats::Estimate;

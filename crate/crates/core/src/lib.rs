//! Portfolio volatility forecasting and rank-based backtesting.
//!
//! The crate implements four portfolio volatility estimators (direct return
//! covariance or factor-model covariance, each with a naive equal-weight window
//! or per-series GARCH(1,1) variances) and a rolling backtest that scores how
//! well each estimator ranks portfolios by realized volatility, measured with
//! Kendall's tau-b.
//!
//! Module map:
//!
//! - [`calendar`], [`panel`], [`io`], [`preprocess`]: panels of returns,
//!   loadings and market caps on a shared trading calendar.
//! - [`factor`]: daily constrained weighted least-squares cross-sections.
//! - [`cov`], [`nearest`]: pairwise covariance with missing data and
//!   nearest positive definite repair.
//! - [`garch`]: GARCH(1,1) quasi maximum likelihood with a fallback ladder.
//! - [`forecast`]: the four estimation schemes.
//! - [`portfolio`], [`region`]: factor portfolios and random resamples.
//! - [`kendall`], [`backtest`]: evaluation.
//! - [`synth`]: synthetic universes with known ground truth.
//!
//! With the default `parallel` feature the per-day, per-series and per-period
//! loops run on rayon; without it everything runs sequentially with identical
//! results.

pub mod backtest;
pub mod calendar;
pub mod cov;
pub mod error;
pub mod factor;
pub mod forecast;
pub mod garch;
pub mod io;
pub mod kendall;
pub mod nearest;
pub mod panel;
pub mod portfolio;
pub mod preprocess;
pub mod region;
pub mod synth;

mod par;

pub use error::{Error, Result};

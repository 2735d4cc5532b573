//! Month-level exclusion and imputation rules applied before any fitting.
//!
//! - country and industry loadings missing for an in-universe company-month
//!   become 0; the market loading becomes 1
//! - style loadings stay missing
//! - a missing market cap is replaced by the square of the company's
//!   square-root-cap regression weight from the previous month (its previous
//!   observed cap); without one, the month's cross-sectional median cap is
//!   used. Substituted cells are flagged on the [`MarketCapSeries`].
//! - a company is excluded for a month when it has no registered loading or no
//!   registered return in that month

use crate::panel::{FactorKind, LoadingPanel, MarketCapSeries, ReturnPanel, UniverseMask};

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub loadings: LoadingPanel,
    pub mcaps: MarketCapSeries,
    pub mask: UniverseMask,
}

/// Whether company `k` has an observed return in loadings-month position `m`.
fn has_return(returns: &ReturnPanel, k: usize, month: crate::calendar::MonthId) -> bool {
    let range = returns.calendar().day_range(month, month);
    returns.row(k)[range].iter().any(|v| !v.is_nan())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn apply_preprocessing(
    loadings: &LoadingPanel,
    mcaps: &MarketCapSeries,
    returns: &ReturnPanel,
) -> Preprocessed {
    let n = loadings.companies().len();
    let months = loadings.months().to_vec();
    let mut out_loadings = loadings.clone();
    let mut out_caps = mcaps.clone();
    let fill_zero: Vec<usize> = loadings
        .factors()
        .iter()
        .enumerate()
        .filter(|(_, f)| matches!(f.kind, FactorKind::Country | FactorKind::Industry))
        .map(|(i, _)| i)
        .collect();
    let market = loadings.market_pos();

    let mut eligible = vec![false; n * months.len()];
    for k in 0..n {
        for (m, month) in months.iter().enumerate() {
            let registered = loadings.has_any(k, m);
            if registered {
                let row = out_loadings.row_mut(k, m);
                for &f in &fill_zero {
                    if row[f].is_nan() {
                        row[f] = 0.0;
                    }
                }
                if let Some(mk) = market {
                    row[mk] = 1.0;
                }
            }
            eligible[k * months.len() + m] = registered && has_return(returns, k, *month);
        }
    }

    for m in 0..months.len() {
        let observed: Vec<f64> = (0..n)
            .filter(|&k| !mcaps.is_proxied(k, m))
            .filter_map(|k| mcaps.get(k, m))
            .collect();
        let fallback = median(observed);
        for k in 0..n {
            if mcaps.get(k, m).is_some() || !loadings.has_any(k, m) {
                continue;
            }
            let previous = (m > 0)
                .then(|| mcaps.get(k, m - 1).filter(|_| !mcaps.is_proxied(k, m - 1)))
                .flatten();
            // (sqrt-cap weight)^2 of the previous month is that month's cap
            if let Some(p) = previous.or(fallback) {
                out_caps.set_proxy(k, m, p);
            }
        }
    }

    Preprocessed {
        loadings: out_loadings,
        mcaps: out_caps,
        mask: UniverseMask::new(n, months, eligible),
    }
}

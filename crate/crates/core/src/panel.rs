//! In-memory panels. Missing cells are stored as `NaN`; accessors expose them
//! as `Option<f64>`.

use std::collections::HashMap;
use std::fmt;

use crate::calendar::{MonthId, TradingCalendar};
use crate::error::{Error, Result};

/// Series × trading-days matrix (row-major). Used for company returns,
/// factor returns and residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPanel {
    ids: Vec<String>,
    calendar: TradingCalendar,
    values: Vec<f64>,
}

pub type ReturnPanel = SeriesPanel;
pub type ResidualPanel = SeriesPanel;

impl SeriesPanel {
    /// All cells missing.
    pub fn missing(ids: Vec<String>, calendar: TradingCalendar) -> Self {
        let n = ids.len() * calendar.len();
        SeriesPanel {
            ids,
            calendar,
            values: vec![f64::NAN; n],
        }
    }

    pub fn from_values(ids: Vec<String>, calendar: TradingCalendar, values: Vec<f64>) -> Result<Self> {
        let expected = ids.len() * calendar.len();
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "series panel values",
                expected,
                actual: values.len(),
            });
        }
        Ok(SeriesPanel {
            ids,
            calendar,
            values,
        })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn calendar(&self) -> &TradingCalendar {
        &self.calendar
    }

    pub fn n_series(&self) -> usize {
        self.ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.calendar.len()
    }

    pub fn get(&self, i: usize, t: usize) -> Option<f64> {
        let v = self.values[i * self.n_days() + t];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, i: usize, t: usize, value: Option<f64>) {
        let n = self.n_days();
        self.values[i * n + t] = value.unwrap_or(f64::NAN);
    }

    /// Raw row with `NaN` for missing cells.
    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_days();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.n_days();
        &mut self.values[i * n..(i + 1) * n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn missing_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_nan()).count()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }

    pub fn slice_days(&self, range: std::ops::Range<usize>) -> SeriesPanel {
        let n = self.n_days();
        let mut values = Vec::with_capacity(self.ids.len() * range.len());
        for i in 0..self.ids.len() {
            values.extend_from_slice(&self.values[i * n + range.start..i * n + range.end]);
        }
        SeriesPanel {
            ids: self.ids.clone(),
            calendar: self.calendar.slice(range),
            values,
        }
    }

    /// Observed values of row `i` restricted to a day range, in day order.
    pub fn observed(&self, i: usize, range: std::ops::Range<usize>) -> Vec<f64> {
        self.row(i)[range].iter().copied().filter(|v| !v.is_nan()).collect()
    }

    /// Multiply every present cell by `c`.
    pub fn scaled(&self, c: f64) -> SeriesPanel {
        SeriesPanel {
            ids: self.ids.clone(),
            calendar: self.calendar.clone(),
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }
}

/// Trading days of the `q` calendar months ending the day before `end_month`.
pub fn window_slice(panel: &SeriesPanel, end_month: MonthId, q: u32) -> Result<SeriesPanel> {
    let range = panel.calendar().window(end_month, q)?;
    Ok(panel.slice_days(range))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorKind {
    Market,
    Style,
    Country,
    Industry,
}

impl fmt::Display for FactorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FactorKind::Market => "market",
            FactorKind::Style => "style",
            FactorKind::Country => "country",
            FactorKind::Industry => "industry",
        })
    }
}

/// A factor identified by `<kind>:<name>` (or the literal `market`).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Factor {
    pub name: String,
    pub kind: FactorKind,
}

pub const MARKET: &str = "market";

impl Factor {
    pub fn market() -> Self {
        Factor {
            name: MARKET.into(),
            kind: FactorKind::Market,
        }
    }

    pub fn new(kind: FactorKind, label: &str) -> Self {
        match kind {
            FactorKind::Market => Factor::market(),
            _ => Factor {
                name: format!("{kind}:{label}"),
                kind,
            },
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim();
        if name == MARKET {
            return Ok(Factor::market());
        }
        let (prefix, label) = name
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("factor {name:?} lacks a style:/country:/industry: prefix")))?;
        let kind = match prefix {
            "style" => FactorKind::Style,
            "country" => FactorKind::Country,
            "industry" => FactorKind::Industry,
            _ => return Err(Error::Invalid(format!("unknown factor kind in {name:?}"))),
        };
        if label.is_empty() {
            return Err(Error::Invalid(format!("empty factor label in {name:?}")));
        }
        Ok(Factor {
            name: name.to_string(),
            kind,
        })
    }

    /// Label after the kind prefix; the ISO code for country factors.
    pub fn label(&self) -> &str {
        self.name.split_once(':').map(|(_, l)| l).unwrap_or(&self.name)
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Orders factors market first, then styles, countries and industries, each
/// block sorted by name.
pub fn canonical_order(mut factors: Vec<Factor>) -> Vec<Factor> {
    factors.sort_by(|a, b| (a.kind, &a.name).cmp(&(b.kind, &b.name)));
    factors.dedup();
    factors
}

/// Companies × months × factors loadings, constant within each month.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingPanel {
    factors: Vec<Factor>,
    companies: Vec<String>,
    months: Vec<MonthId>,
    values: Vec<f64>,
}

impl LoadingPanel {
    pub fn missing(factors: Vec<Factor>, companies: Vec<String>, months: Vec<MonthId>) -> Self {
        let n = factors.len() * companies.len() * months.len();
        LoadingPanel {
            factors,
            companies,
            months,
            values: vec![f64::NAN; n],
        }
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn companies(&self) -> &[String] {
        &self.companies
    }

    pub fn months(&self) -> &[MonthId] {
        &self.months
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn month_pos(&self, month: MonthId) -> Option<usize> {
        self.months.binary_search(&month).ok()
    }

    pub fn factor_pos(&self, name: &str) -> Option<usize> {
        self.factors.iter().position(|f| f.name == name)
    }

    pub fn market_pos(&self) -> Option<usize> {
        self.factors.iter().position(|f| f.kind == FactorKind::Market)
    }

    fn offset(&self, k: usize, m: usize) -> usize {
        (k * self.months.len() + m) * self.factors.len()
    }

    /// Loadings of company `k` in month position `m` (`NaN` = missing).
    pub fn row(&self, k: usize, m: usize) -> &[f64] {
        let o = self.offset(k, m);
        &self.values[o..o + self.factors.len()]
    }

    pub fn row_mut(&mut self, k: usize, m: usize) -> &mut [f64] {
        let o = self.offset(k, m);
        let l = self.factors.len();
        &mut self.values[o..o + l]
    }

    pub fn get(&self, k: usize, m: usize, f: usize) -> Option<f64> {
        let v = self.row(k, m)[f];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, k: usize, m: usize, f: usize, value: f64) {
        self.row_mut(k, m)[f] = value;
    }

    /// True when any loading is registered for company `k` in month `m`.
    pub fn has_any(&self, k: usize, m: usize) -> bool {
        self.row(k, m).iter().any(|v| !v.is_nan())
    }

    pub fn indices_of(&self, kind: FactorKind) -> Vec<usize> {
        (0..self.factors.len())
            .filter(|&f| self.factors[f].kind == kind)
            .collect()
    }
}

/// Companies × months market capitalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketCapSeries {
    companies: Vec<String>,
    months: Vec<MonthId>,
    values: Vec<f64>,
    proxied: Vec<bool>,
}

impl MarketCapSeries {
    pub fn missing(companies: Vec<String>, months: Vec<MonthId>) -> Self {
        let n = companies.len() * months.len();
        MarketCapSeries {
            companies,
            months,
            values: vec![f64::NAN; n],
            proxied: vec![false; n],
        }
    }

    pub fn companies(&self) -> &[String] {
        &self.companies
    }

    pub fn months(&self) -> &[MonthId] {
        &self.months
    }

    pub fn month_pos(&self, month: MonthId) -> Option<usize> {
        self.months.binary_search(&month).ok()
    }

    pub fn get(&self, k: usize, m: usize) -> Option<f64> {
        let v = self.values[k * self.months.len() + m];
        (!v.is_nan()).then_some(v)
    }

    pub fn set(&mut self, k: usize, m: usize, value: f64) {
        let n = self.months.len();
        self.values[k * n + m] = value;
    }

    /// Whether the value at `(k, m)` is a proxy for a missing cap.
    pub fn is_proxied(&self, k: usize, m: usize) -> bool {
        self.proxied[k * self.months.len() + m]
    }

    pub(crate) fn set_proxy(&mut self, k: usize, m: usize, value: f64) {
        let n = self.months.len();
        self.values[k * n + m] = value;
        self.proxied[k * n + m] = true;
    }

    pub fn proxied_count(&self) -> usize {
        self.proxied.iter().filter(|p| **p).count()
    }

    /// Caps of all companies in month position `m` (`NaN` = missing).
    pub fn month_column(&self, m: usize) -> Vec<f64> {
        let n = self.months.len();
        (0..self.companies.len()).map(|k| self.values[k * n + m]).collect()
    }
}

/// Companies × months eligibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniverseMask {
    n_companies: usize,
    months: Vec<MonthId>,
    eligible: Vec<bool>,
}

impl UniverseMask {
    pub fn new(n_companies: usize, months: Vec<MonthId>, eligible: Vec<bool>) -> Self {
        assert_eq!(eligible.len(), n_companies * months.len());
        UniverseMask {
            n_companies,
            months,
            eligible,
        }
    }

    pub fn all(n_companies: usize, months: Vec<MonthId>) -> Self {
        let n = n_companies * months.len();
        UniverseMask::new(n_companies, months, vec![true; n])
    }

    pub fn n_companies(&self) -> usize {
        self.n_companies
    }

    pub fn months(&self) -> &[MonthId] {
        &self.months
    }

    pub fn month_pos(&self, month: MonthId) -> Option<usize> {
        self.months.binary_search(&month).ok()
    }

    pub fn is_eligible(&self, k: usize, m: usize) -> bool {
        self.eligible[k * self.months.len() + m]
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.iter().filter(|e| **e).count()
    }
}

pub(crate) fn index_map(ids: &[String]) -> HashMap<&str, usize> {
    ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    #[test]
    fn factor_names_round_trip() {
        for name in ["market", "style:momentum", "country:US", "industry:energy"] {
            assert_eq!(Factor::parse(name).unwrap().name, name);
        }
        assert_eq!(Factor::parse("country:US").unwrap().label(), "US");
        assert!(Factor::parse("momentum").is_err());
        assert!(Factor::parse("sector:x").is_err());
        assert!(Factor::parse("style:").is_err());
    }

    #[test]
    fn canonical_order_puts_market_first() {
        let f = canonical_order(vec![
            Factor::parse("industry:a").unwrap(),
            Factor::parse("style:b").unwrap(),
            Factor::market(),
            Factor::parse("country:US").unwrap(),
        ]);
        let kinds: Vec<_> = f.iter().map(|f| f.kind).collect();
        assert_eq!(
            kinds,
            [FactorKind::Market, FactorKind::Style, FactorKind::Country, FactorKind::Industry]
        );
    }

    #[test]
    fn q3_slice_length_is_sum_of_month_day_counts() {
        let start = NaiveDate::from_ymd_opt(2012, 9, 1).unwrap();
        let cal = TradingCalendar::weekdays(start, 200);
        let panel = SeriesPanel::missing(vec!["a".into()], cal.clone());
        let end = MonthId::new(2013, 2);
        let s = window_slice(&panel, end, 3).unwrap();
        // count weekdays of Nov 2012, Dec 2012 and Jan 2013 directly
        let count = |y: i32, m: u32| {
            (1..=31)
                .filter_map(|d| NaiveDate::from_ymd_opt(y, m, d))
                .filter(|d| {
                    use chrono::Datelike;
                    d.weekday().num_days_from_monday() < 5
                })
                .count()
        };
        assert_eq!(s.n_days(), count(2012, 11) + count(2012, 12) + count(2013, 1));
        assert_eq!(s.n_days(), 22 + 21 + 23);
    }

    proptest! {
        #[test]
        fn shorter_windows_nest_in_longer(q1 in 1u32..8, extra in 0u32..6, end_off in 14i32..20) {
            let start = NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
            let cal = TradingCalendar::weekdays(start, 600);
            let panel = SeriesPanel::missing(vec!["a".into()], cal);
            let end = MonthId::new(2010, 1).offset(end_off);
            let a = window_slice(&panel, end, q1).unwrap();
            let b = window_slice(&panel, end, q1 + extra).unwrap();
            let bd = b.calendar().days();
            prop_assert!(a.calendar().days().iter().all(|d| bd.contains(d)));
            prop_assert_eq!(a.calendar().days().last(), bd.last());
        }
    }
}

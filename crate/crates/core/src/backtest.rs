//! Rolling rank backtest.
//!
//! For each test period the portfolios are built from the month before the
//! period, every scheme estimates every portfolio from data strictly before
//! the period, and the target is the realized in-period volatility. Kendall's
//! tau-b between estimates and targets is computed per portfolio subset and
//! averaged over the periods where it is defined.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::{MonthId, TradingCalendar};
use crate::error::{Error, Result};
use crate::factor::PanelFit;
use crate::forecast::{Approach, DirectEstimator, FactorEstimator, SchemeId, VarianceModel, factor_garch, method_name};
use crate::garch::{GarchRecord, HISTORY_MONTHS, garch_stdev_diagonal};
use crate::kendall::kendall_tau_b;
use crate::panel::{LoadingPanel, MarketCapSeries, ReturnPanel};
use crate::par;
use crate::portfolio::{
    Portfolio, PortfolioKind, PortfolioRules, Restriction, Skip, build_universe_of_portfolios,
};
use crate::region::RegionMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestPeriod {
    /// 1-based position in the schedule.
    pub index: usize,
    pub start: MonthId,
    /// Last month, inclusive.
    pub end: MonthId,
}

impl TestPeriod {
    pub fn start_date(&self) -> NaiveDate {
        self.start.first_day()
    }

    pub fn days(&self, calendar: &TradingCalendar) -> std::ops::Range<usize> {
        calendar.day_range(self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeriodSchedule {
    periods: Vec<TestPeriod>,
}

impl PeriodSchedule {
    /// `count` periods of `width` months, the first starting at
    /// `first_start`, each starting one month after the previous one.
    pub fn monthly(first_start: MonthId, count: usize, width: u32) -> Result<Self> {
        if count == 0 || width == 0 {
            return Err(Error::Invalid("schedule needs at least one period of at least one month".into()));
        }
        Ok(PeriodSchedule {
            periods: (0..count)
                .map(|i| {
                    let start = first_start.offset(i as i32);
                    TestPeriod {
                        index: i + 1,
                        start,
                        end: start.offset(width as i32 - 1),
                    }
                })
                .collect(),
        })
    }

    /// 97 three-month periods, the first covering February to April 2013.
    pub fn reference() -> Self {
        Self::monthly(MonthId::new(2013, 2), 97, 3).expect("non-empty schedule")
    }

    pub fn periods(&self) -> &[TestPeriod] {
        &self.periods
    }

    /// Checks that every estimation window of up to `max_q` months and every
    /// period lies inside the calendar.
    pub fn validate(&self, calendar: &TradingCalendar, max_q: u32) -> Result<()> {
        let (Some(first), Some(last)) = (calendar.first_month(), calendar.last_month()) else {
            return Err(Error::Invalid("empty calendar".into()));
        };
        for p in &self.periods {
            calendar.window(p.start, max_q)?;
            if p.end > last || p.start < first {
                return Err(Error::Invalid(format!(
                    "period {} ({}..{}) is outside the data ({first}..{last})",
                    p.index, p.start, p.end
                )));
            }
        }
        Ok(())
    }
}

/// Realized volatility `sqrt(w' S w)` with `S` the pairwise sample
/// covariance of in-period returns.
pub fn target_volatility(portfolio: &Portfolio, returns: &ReturnPanel, period: &TestPeriod) -> Result<f64> {
    let companies: Vec<usize> = portfolio.companies().collect();
    DirectEstimator::over_days(returns, &companies, period.days(returns.calendar()))?
        .volatility(&portfolio.members, VarianceModel::Naive)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OriginFilter {
    Any,
    Original,
    Random,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    All,
    Unrestricted,
    Region(String),
    Subregion(String),
}

/// A named set of portfolios ranked together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetDef {
    pub slug: String,
    pub kind: PortfolioKind,
    pub origin: OriginFilter,
    pub scope: Scope,
}

impl SubsetDef {
    pub fn new(slug: &str, kind: PortfolioKind, origin: OriginFilter, scope: Scope) -> Self {
        SubsetDef {
            slug: slug.to_string(),
            kind,
            origin,
            scope,
        }
    }

    pub fn contains(&self, p: &Portfolio) -> bool {
        let origin = match self.origin {
            OriginFilter::Any => true,
            OriginFilter::Original => !p.is_random(),
            OriginFilter::Random => p.is_random(),
        };
        let scope = match (&self.scope, &p.spec.restriction) {
            (Scope::All, _) => true,
            (Scope::Unrestricted, Restriction::Unrestricted) => true,
            (Scope::Region(a), Restriction::Region(b)) => a == b,
            (Scope::Subregion(a), Restriction::Subregion(b)) => a == b,
            _ => false,
        };
        p.kind() == self.kind && origin && scope
    }

    /// All long, all long/short, and original / random splits of all,
    /// unrestricted and North American portfolios.
    pub fn defaults() -> Vec<SubsetDef> {
        use OriginFilter::*;
        use PortfolioKind::*;
        let na = || Scope::Subregion("Northern America".into());
        let mut v = vec![
            SubsetDef::new("all_long", Long, Any, Scope::All),
            SubsetDef::new("all_long_short", LongShort, Any, Scope::All),
        ];
        for (prefix, scope) in [("all", Scope::All), ("unrestricted", Scope::Unrestricted), ("north_america", na())] {
            for (o, origin) in [("original", Original), ("random", Random)] {
                for (k, kind) in [("long", Long), ("long_short", LongShort)] {
                    v.push(SubsetDef::new(&format!("{prefix}_{o}_{k}"), kind, origin, scope.clone()));
                }
            }
        }
        v
    }
}

/// Extra estimators evaluated next to the schemes, e.g. for testing.
pub trait ProbeScheme: Sync {
    fn name(&self) -> String;
    fn estimate(&self, period: &TestPeriod, portfolios: &[Portfolio], targets: &[f64]) -> Vec<f64>;
}

/// Returns the targets themselves.
pub struct OracleProbe;

impl ProbeScheme for OracleProbe {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn estimate(&self, _: &TestPeriod, _: &[Portfolio], targets: &[f64]) -> Vec<f64> {
        targets.to_vec()
    }
}

/// Returns the targets in a random order, a no-skill baseline.
pub struct ShuffledProbe {
    pub seed: u64,
}

impl ProbeScheme for ShuffledProbe {
    fn name(&self) -> String {
        "shuffled".into()
    }

    fn estimate(&self, period: &TestPeriod, _: &[Portfolio], targets: &[f64]) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (period.index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut v = targets.to_vec();
        v.shuffle(&mut rng);
        v
    }
}

/// Preprocessed inputs shared by all periods.
#[derive(Debug, Clone, Copy)]
pub struct BacktestInputs<'a> {
    pub returns: &'a ReturnPanel,
    pub loadings: &'a LoadingPanel,
    pub mcaps: &'a MarketCapSeries,
    pub fit: &'a PanelFit,
    pub regions: &'a RegionMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub schemes: Vec<SchemeId>,
    pub subsets: Vec<SubsetDef>,
    pub rules: PortfolioRules,
    pub garch_history_months: u32,
    pub seed: u64,
}

impl BacktestConfig {
    pub fn new(schemes: Vec<SchemeId>, seed: u64) -> Self {
        BacktestConfig {
            schemes,
            subsets: SubsetDef::defaults(),
            rules: PortfolioRules::default(),
            garch_history_months: HISTORY_MONTHS,
            seed,
        }
    }

    pub fn max_q(&self) -> u32 {
        self.schemes.iter().map(|s| s.q).max().unwrap_or(1)
    }
}

/// Where each period's portfolios come from.
#[derive(Debug, Clone, Copy)]
pub enum PortfolioSource<'a> {
    Generate,
    /// `(period start date, portfolio)` pairs, e.g. read from a CSV.
    Fixed(&'a [(NaiveDate, Portfolio)]),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct MethodKey {
    pub method: String,
    /// `None` for probes.
    pub q: Option<u32>,
}

impl MethodKey {
    pub fn scheme(s: &SchemeId) -> Self {
        MethodKey {
            method: s.method().to_string(),
            q: Some(s.q),
        }
    }

    pub fn probe(name: &str) -> Self {
        MethodKey {
            method: name.to_string(),
            q: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodTau {
    pub period: usize,
    pub start: NaiveDate,
    pub subset: String,
    pub method: String,
    pub q: Option<u32>,
    /// `None` when tau-b is undefined (fewer than two portfolios or ties).
    pub tau: Option<f64>,
    pub portfolios: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeanTau {
    pub subset: String,
    pub method: String,
    pub q: Option<u32>,
    pub mean: Option<f64>,
    /// Periods with a defined tau.
    pub used: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TauReport {
    pub per_period: Vec<PeriodTau>,
    pub means: Vec<MeanTau>,
}

impl TauReport {
    #[allow(clippy::type_complexity)]
    fn from_periods(per_period: Vec<PeriodTau>) -> Self {
        // (subset, method, q) -> (tau sum, used, excluded)
        let mut groups: BTreeMap<(String, String, Option<u32>), (f64, usize, usize)> = BTreeMap::new();
        let mut order = Vec::new();
        for row in &per_period {
            let key = (row.subset.clone(), row.method.clone(), row.q);
            let e = groups.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0.0, 0, 0)
            });
            match row.tau {
                Some(t) => {
                    e.0 += t;
                    e.1 += 1;
                }
                None => e.2 += 1,
            }
        }
        let means = order
            .into_iter()
            .map(|key| {
                let (sum, used, excluded) = groups[&key];
                MeanTau {
                    subset: key.0,
                    method: key.1,
                    q: key.2,
                    mean: (used > 0).then(|| sum / used as f64),
                    used,
                    excluded,
                }
            })
            .collect();
        TauReport { per_period, means }
    }

    pub fn mean(&self, subset: &str, method: &str, q: Option<u32>) -> Option<f64> {
        self.means
            .iter()
            .find(|m| m.subset == subset && m.method == method && m.q == q)
            .and_then(|m| m.mean)
    }

    pub fn series(&self, subset: &str, method: &str, q: Option<u32>) -> Vec<Option<f64>> {
        self.per_period
            .iter()
            .filter(|r| r.subset == subset && r.method == method && r.q == q)
            .map(|r| r.tau)
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct PeriodResult {
    pub period: TestPeriod,
    pub portfolios: Vec<Portfolio>,
    pub skipped: Vec<Skip>,
    pub targets: Vec<f64>,
    /// Schemes in configuration order, then probes.
    pub estimates: Vec<(MethodKey, Vec<f64>)>,
    pub garch: Vec<GarchRecord>,
}

#[derive(Debug, Clone)]
pub struct BacktestOutput {
    pub report: TauReport,
    pub periods: Vec<PeriodResult>,
}

impl BacktestOutput {
    pub fn portfolio_count(&self) -> usize {
        self.periods.iter().map(|p| p.portfolios.len()).sum()
    }
}

fn period_portfolios(
    inputs: &BacktestInputs,
    config: &BacktestConfig,
    source: PortfolioSource,
    period: &TestPeriod,
) -> Result<(Vec<Portfolio>, Vec<Skip>)> {
    match source {
        PortfolioSource::Generate => {
            let set = build_universe_of_portfolios(
                inputs.loadings,
                inputs.mcaps,
                inputs.regions,
                period.start,
                &config.rules,
                config.seed,
            )?;
            Ok((set.portfolios, set.skipped))
        }
        PortfolioSource::Fixed(all) => Ok((
            all.iter()
                .filter(|(d, _)| MonthId::of(*d) == period.start)
                .map(|(_, p)| p.clone())
                .collect(),
            Vec::new(),
        )),
    }
}

fn run_period(
    inputs: &BacktestInputs,
    config: &BacktestConfig,
    source: PortfolioSource,
    probes: &[&dyn ProbeScheme],
    period: &TestPeriod,
) -> Result<PeriodResult> {
    let (portfolios, skipped) = period_portfolios(inputs, config, source, period)?;
    let union: Vec<usize> = portfolios
        .iter()
        .flat_map(|p| p.companies())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let returns = inputs.returns;

    let realized = DirectEstimator::over_days(returns, &union, period.days(returns.calendar()))?;
    let targets = portfolios
        .iter()
        .map(|p| realized.volatility(&p.members, VarianceModel::Naive))
        .collect::<Result<Vec<f64>>>()?;
    drop(realized);

    let wants = |a: Approach, m: VarianceModel| config.schemes.iter().any(|s| s.approach == a && s.variance_model == m);
    let mut garch = Vec::new();
    let company_garch = wants(Approach::Direct, VarianceModel::Garch)
        .then(|| garch_stdev_diagonal(returns, &union, period.start, config.garch_history_months));
    let factors = &inputs.fit.factor_returns;
    let factor_fits = wants(Approach::Factor, VarianceModel::Garch)
        .then(|| factor_garch(factors, period.start, config.garch_history_months));
    if let Some(d) = &company_garch {
        garch.extend(union.iter().zip(&d.fits).map(|(&k, fit)| GarchRecord {
            series: returns.ids()[k].clone(),
            period: period.start_date(),
            fit: fit.clone(),
        }));
    }
    if let Some(d) = &factor_fits {
        garch.extend(factors.factors.iter().zip(&d.fits).map(|(f, fit)| GarchRecord {
            series: f.name.clone(),
            period: period.start_date(),
            fit: fit.clone(),
        }));
    }

    let qs: BTreeSet<u32> = config.schemes.iter().map(|s| s.q).collect();
    let mut by_scheme: HashMap<SchemeId, Vec<f64>> = HashMap::new();
    for q in qs {
        let in_q = |a: Approach| config.schemes.iter().filter(move |s| s.q == q && s.approach == a);
        if in_q(Approach::Direct).next().is_some() {
            let mut est = DirectEstimator::new(returns, &union, period.start, q)?;
            if let Some(d) = &company_garch {
                est.set_garch(&d.with_fallback(est.naive_stdevs()))?;
            }
            for s in in_q(Approach::Direct) {
                let v = portfolios
                    .iter()
                    .map(|p| est.volatility(&p.members, s.variance_model))
                    .collect::<Result<Vec<f64>>>()?;
                by_scheme.insert(*s, v);
            }
        }
        if in_q(Approach::Factor).next().is_some() {
            let mut est = FactorEstimator::new(factors, &inputs.fit.residuals, inputs.loadings, period.start, q)?;
            if let Some(d) = &factor_fits {
                est.set_garch(&d.with_fallback(est.naive_stdevs()))?;
            }
            for s in in_q(Approach::Factor) {
                let v = portfolios
                    .iter()
                    .map(|p| est.volatility(&p.members, s.variance_model))
                    .collect::<Result<Vec<f64>>>()?;
                by_scheme.insert(*s, v);
            }
        }
    }
    let mut estimates: Vec<(MethodKey, Vec<f64>)> = config
        .schemes
        .iter()
        .map(|s| (MethodKey::scheme(s), by_scheme[s].clone()))
        .collect();
    for probe in probes {
        estimates.push((MethodKey::probe(&probe.name()), probe.estimate(period, &portfolios, &targets)));
    }

    Ok(PeriodResult {
        period: *period,
        portfolios,
        skipped,
        targets,
        estimates,
        garch,
    })
}

fn period_taus(result: &PeriodResult, subsets: &[SubsetDef]) -> Vec<PeriodTau> {
    let mut out = Vec::new();
    for subset in subsets {
        let idx: Vec<usize> = (0..result.portfolios.len())
            .filter(|&i| subset.contains(&result.portfolios[i]))
            .collect();
        let target: Vec<f64> = idx.iter().map(|&i| result.targets[i]).collect();
        for (key, est) in &result.estimates {
            let e: Vec<f64> = idx.iter().map(|&i| est[i]).collect();
            out.push(PeriodTau {
                period: result.period.index,
                start: result.period.start_date(),
                subset: subset.slug.clone(),
                method: key.method.clone(),
                q: key.q,
                tau: kendall_tau_b(&e, &target).ok(),
                portfolios: idx.len(),
            });
        }
    }
    out
}

/// Runs every period (in parallel with the `parallel` feature) and
/// assembles the tau report.
pub fn run_backtest(
    inputs: &BacktestInputs,
    config: &BacktestConfig,
    schedule: &PeriodSchedule,
    source: PortfolioSource,
    probes: &[&dyn ProbeScheme],
) -> Result<BacktestOutput> {
    if config.schemes.is_empty() && probes.is_empty() {
        return Err(Error::Invalid("no schemes to evaluate".into()));
    }
    schedule.validate(inputs.returns.calendar(), config.max_q())?;
    let results = par::map_slice(schedule.periods(), |p| {
        run_period(inputs, config, source, probes, p)
            .map_err(|e| Error::Invalid(format!("period {} starting {}: {e}", p.index, p.start)))
    });
    let periods = results.into_iter().collect::<Result<Vec<_>>>()?;
    for p in &periods {
        log::info!(
            "period {} ({}): {} portfolios, {} skipped",
            p.period.index,
            p.period.start,
            p.portfolios.len(),
            p.skipped.len()
        );
    }
    let per_period = periods.iter().flat_map(|r| period_taus(r, &config.subsets)).collect();
    Ok(BacktestOutput {
        report: TauReport::from_periods(per_period),
        periods,
    })
}

fn fmt_tau(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |t| format!("{t:.6}"))
}

/// Wide mean-tau table for one subset: one row per approach and variance
/// model present in `schemes`, one column per window length.
pub fn write_mean_tau<W: Write>(report: &TauReport, subset: &str, schemes: &[SchemeId], out: W) -> Result<()> {
    let qs: BTreeSet<u32> = schemes.iter().map(|s| s.q).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["approach".to_string(), "variance_model".to_string()];
    header.extend(qs.iter().map(|q| format!("q{q}")));
    w.write_record(&header)?;
    for approach in [Approach::Direct, Approach::Factor] {
        for model in [VarianceModel::Naive, VarianceModel::Garch] {
            if !schemes.iter().any(|s| s.approach == approach && s.variance_model == model) {
                continue;
            }
            let method = method_name(approach, model);
            let (a, m) = method.split_once('_').expect("method names contain an underscore");
            let mut row = vec![a.to_string(), m.to_string()];
            row.extend(qs.iter().map(|&q| fmt_tau(report.mean(subset, method, Some(q)))));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Tidy per-period tau series for one subset.
pub fn write_tau_series<W: Write>(report: &TauReport, subset: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["period", "start", "method", "q", "tau", "portfolios"])?;
    for r in report.per_period.iter().filter(|r| r.subset == subset) {
        w.write_record([
            r.period.to_string(),
            r.start.to_string(),
            r.method.clone(),
            r.q.map_or_else(String::new, |q| q.to_string()),
            fmt_tau(r.tau),
            r.portfolios.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Wide per-portfolio table: `portfolio,period,target` followed by one
/// column per scheme and probe.
pub fn write_estimate_table<W: Write>(periods: &[PeriodResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["portfolio".to_string(), "period".to_string(), "target".to_string()];
    if let Some(first) = periods.first() {
        header.extend(first.estimates.iter().map(|(key, _)| match key.q {
            Some(q) => format!("{}_q{q}", key.method),
            None => key.method.clone(),
        }));
    }
    w.write_record(&header)?;
    for p in periods {
        for (i, portfolio) in p.portfolios.iter().enumerate() {
            let mut row = vec![portfolio.id.clone(), p.period.start_date().to_string(), format!("{:e}", p.targets[i])];
            row.extend(p.estimates.iter().map(|(_, v)| format!("{:e}", v[i])));
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

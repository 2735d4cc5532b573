//! Synthetic universes generated from a known factor model.
//!
//! Loadings are month-constant: one-hot countries and industries (stored as
//! missing outside the company's own country / industry, like raw vendor
//! data), a unit market column, and cap-centred Gaussian styles that follow a
//! monthly AR(1). Factor returns are correlated Gaussians with optional
//! GARCH(1,1) and Markov regime-switching volatility; company returns add
//! independent residuals with the same optional dynamics. Country and
//! industry factor returns are shifted into the market factor so that their
//! cap-weighted sums are zero, which is the identification the factor fit
//! uses; the shift leaves every company return unchanged.

use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{Cholesky, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calendar::TradingCalendar;
use crate::error::{Error, Result};
use crate::io::{create, write_loadings, write_mcaps, write_returns, write_series};
use crate::panel::{Factor, FactorKind, LoadingPanel, MarketCapSeries, ReturnPanel, SeriesPanel};
use crate::region::RegionMap;

const STYLE_NAMES: [&str; 11] = [
    "momentum",
    "value",
    "size",
    "volatility",
    "quality",
    "growth",
    "leverage",
    "liquidity",
    "dividend_yield",
    "short_term_reversal",
    "earnings_yield",
];

const INDUSTRY_NAMES: [&str; 12] = [
    "energy",
    "materials",
    "industrials",
    "consumer_discretionary",
    "consumer_staples",
    "health_care",
    "financials",
    "information_technology",
    "communication_services",
    "utilities",
    "real_estate",
    "transportation",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchShape {
    pub alpha: f64,
    pub beta: f64,
}

/// Two-state volatility regimes per series: calm (multiplier 1) and
/// turbulent (`high_multiplier`), switching with probability
/// `1 / mean_duration_days` each day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub mean_duration_days: f64,
    pub high_multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_companies: usize,
    pub n_styles: usize,
    pub n_countries: usize,
    pub n_industries: usize,
    pub start: NaiveDate,
    pub n_days: usize,
    pub seed: u64,
    /// Daily standard deviations by factor block.
    pub market_vol: f64,
    pub style_vol: f64,
    pub country_vol: f64,
    pub industry_vol: f64,
    /// Common pairwise correlation of factor innovations.
    pub factor_correlation: f64,
    /// Per-company residual standard deviations are uniform on this range.
    pub residual_vol_min: f64,
    pub residual_vol_max: f64,
    pub missing_rate: f64,
    pub factor_garch: Option<GarchShape>,
    pub residual_garch: Option<GarchShape>,
    pub regimes: Option<RegimeConfig>,
    /// Log-normal market cap parameters (natural log of dollars).
    pub log_cap_mean: f64,
    pub log_cap_sd: f64,
    /// Monthly standard deviation of log cap changes.
    pub cap_drift_sd: f64,
    /// Monthly AR(1) coefficient of raw style scores.
    pub style_persistence: f64,
    /// Freeze loadings and caps at their first-month values.
    pub static_loadings: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_companies: 300,
            n_styles: 4,
            n_countries: 9,
            n_industries: 4,
            start: NaiveDate::from_ymd_opt(2010, 1, 1).expect("valid date"),
            n_days: 1000,
            seed: 1,
            market_vol: 0.01,
            style_vol: 0.004,
            country_vol: 0.006,
            industry_vol: 0.005,
            factor_correlation: 0.1,
            residual_vol_min: 0.01,
            residual_vol_max: 0.03,
            missing_rate: 0.02,
            factor_garch: None,
            residual_garch: None,
            regimes: None,
            log_cap_mean: 21.5,
            log_cap_sd: 1.5,
            cap_drift_sd: 0.05,
            style_persistence: 0.9,
            static_loadings: false,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("synth config: {m}")));
        if self.n_companies == 0 || self.n_days == 0 || self.n_countries == 0 || self.n_industries == 0 {
            return bad("company, day, country and industry counts must be positive");
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad("missing_rate must lie in [0, 1)");
        }
        if self.residual_vol_min < 0.0 || self.residual_vol_max < self.residual_vol_min {
            return bad("residual vol range must satisfy 0 <= min <= max");
        }
        for g in [self.factor_garch, self.residual_garch].into_iter().flatten() {
            if g.alpha < 0.0 || g.beta < 0.0 || g.alpha + g.beta >= 1.0 {
                return bad("GARCH shapes need alpha, beta >= 0 and alpha + beta < 1");
            }
        }
        if self
            .regimes
            .is_some_and(|r| r.mean_duration_days < 1.0 || r.high_multiplier <= 0.0)
        {
            return bad("regimes need mean_duration_days >= 1 and a positive multiplier");
        }
        if !(0.0..=1.0).contains(&self.style_persistence) {
            return bad("style_persistence must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Known quantities behind a generated universe.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    /// Covariance of the factor innovations before regimes and before the
    /// identification shift, in [`SynthUniverse::factors`] order.
    pub factor_cov: DMatrix<f64>,
    /// Factor returns before the identification shift.
    pub raw_factor_returns: SeriesPanel,
    /// Identified factor returns, the target of the cross-sectional fit.
    pub factor_returns: SeriesPanel,
    /// Base residual variance per company.
    pub residual_vars: Vec<f64>,
    pub country_of: Vec<usize>,
    pub industry_of: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SynthUniverse {
    pub returns: ReturnPanel,
    /// Raw loadings: country and industry cells outside a company's own are
    /// missing; run preprocessing before fitting.
    pub loadings: LoadingPanel,
    pub mcaps: MarketCapSeries,
    pub regions: RegionMap,
    pub factors: Vec<Factor>,
    pub truth: SynthTruth,
}

/// Country codes spread round-robin over the subregions of the default map.
fn pick_countries(n: usize) -> Result<(Vec<String>, RegionMap)> {
    let iso = RegionMap::iso_default();
    let pools: Vec<Vec<&str>> = iso.subregions().iter().map(|s| iso.countries_in_subregion(s)).collect();
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < n {
        let before = out.len();
        for pool in &pools {
            if let (true, Some(c)) = (out.len() < n, pool.get(round)) {
                out.push(c.to_string());
            }
        }
        if out.len() == before {
            return Err(Error::Invalid(format!("at most {} synthetic countries are available", out.len())));
        }
        round += 1;
    }
    let mut map = RegionMap::default();
    for c in &out {
        let e = iso.get(c).expect("picked from the map");
        map.insert(c, &e.region, e.subregion.as_deref())?;
    }
    Ok((out, map))
}

fn names(base: &[&str], n: usize, prefix: &str) -> Vec<String> {
    (0..n)
        .map(|i| base.get(i).map_or_else(|| format!("{prefix}{:02}", i + 1), |s| s.to_string()))
        .collect()
}

/// Per-series volatility path: GARCH multiplier and regime multiplier.
struct VolPath {
    base_var: f64,
    garch: Option<GarchShape>,
    var: f64,
    high: bool,
}

impl VolPath {
    fn new(base_sd: f64, garch: Option<GarchShape>) -> Self {
        VolPath {
            base_var: base_sd * base_sd,
            garch,
            var: base_sd * base_sd,
            high: false,
        }
    }

    /// Draws one innovation from the standard normal `z`, then advances.
    fn step<R: Rng>(&mut self, z: f64, regimes: Option<RegimeConfig>, rng: &mut R) -> f64 {
        let e = self.var.sqrt() * z;
        if let Some(g) = self.garch {
            let omega = self.base_var * (1.0 - g.alpha - g.beta);
            self.var = omega + g.alpha * e * e + g.beta * self.var;
        }
        let mult = match regimes {
            Some(r) => {
                if rng.random::<f64>() < 1.0 / r.mean_duration_days {
                    self.high = !self.high;
                }
                if self.high { r.high_multiplier } else { 1.0 }
            }
            None => 1.0,
        };
        e * mult
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthUniverse> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let calendar = TradingCalendar::weekdays(config.start, config.n_days);
    let months = calendar.months();
    let n = config.n_companies;
    let width = n.to_string().len().max(4);
    let companies: Vec<String> = (0..n).map(|k| format!("C{:0width$}", k + 1)).collect();

    let (country_codes, regions) = pick_countries(config.n_countries)?;
    let styles = names(&STYLE_NAMES, config.n_styles, "s");
    let industries = names(&INDUSTRY_NAMES, config.n_industries, "i");
    let mut factors = vec![Factor::market()];
    factors.extend(styles.iter().map(|s| Factor::new(FactorKind::Style, s)));
    factors.extend(country_codes.iter().map(|c| Factor::new(FactorKind::Country, c)));
    factors.extend(industries.iter().map(|i| Factor::new(FactorKind::Industry, i)));
    let l = factors.len();
    let style_pos = |s: usize| 1 + s;
    let country_pos = |c: usize| 1 + config.n_styles + c;
    let industry_pos = |i: usize| 1 + config.n_styles + config.n_countries + i;

    // structure
    let country_of: Vec<usize> = (0..n).map(|k| k % config.n_countries).collect();
    let industry_of: Vec<usize> = (0..n).map(|_| rng.random_range(0..config.n_industries)).collect();
    let cap_dist = Normal::new(config.log_cap_mean, config.log_cap_sd.max(0.0))
        .map_err(|e| Error::Invalid(format!("synth config: {e}")))?;
    let mut log_caps: Vec<f64> = (0..n).map(|_| cap_dist.sample(&mut rng)).collect();
    let mut scores: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..config.n_styles).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let mut loadings = LoadingPanel::missing(factors.clone(), companies.clone(), months.clone());
    let mut mcaps = MarketCapSeries::missing(companies.clone(), months.clone());
    let rho = config.style_persistence;
    for m in 0..months.len() {
        if m > 0 && !config.static_loadings {
            for lc in log_caps.iter_mut() {
                *lc += config.cap_drift_sd * rng.sample::<f64, _>(StandardNormal);
            }
            for row in scores.iter_mut() {
                for v in row.iter_mut() {
                    *v = rho * *v + (1.0 - rho * rho).sqrt() * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        let caps: Vec<f64> = log_caps.iter().map(|v| v.exp()).collect();
        let total: f64 = caps.iter().sum();
        for k in 0..n {
            mcaps.set(k, m, caps[k]);
            loadings.set(k, m, 0, 1.0);
            loadings.set(k, m, country_pos(country_of[k]), 1.0);
            loadings.set(k, m, industry_pos(industry_of[k]), 1.0);
        }
        for s in 0..config.n_styles {
            let centre: f64 = (0..n).map(|k| caps[k] * scores[k][s]).sum::<f64>() / total;
            for k in 0..n {
                loadings.set(k, m, style_pos(s), scores[k][s] - centre);
            }
        }
    }

    // factor innovations
    let mut sd = vec![config.market_vol];
    sd.extend(std::iter::repeat_n(config.style_vol, config.n_styles));
    sd.extend(std::iter::repeat_n(config.country_vol, config.n_countries));
    sd.extend(std::iter::repeat_n(config.industry_vol, config.n_industries));
    let corr = DMatrix::from_fn(l, l, |i, j| if i == j { 1.0 } else { config.factor_correlation });
    let chol = Cholesky::new(corr.clone())
        .ok_or_else(|| Error::Invalid("synth config: factor correlation is not positive definite".into()))?;
    let lower = chol.l();
    let factor_cov = DMatrix::from_fn(l, l, |i, j| sd[i] * corr[(i, j)] * sd[j]);

    let days = calendar.len();
    let mut factor_paths: Vec<VolPath> = sd.iter().map(|s| VolPath::new(*s, config.factor_garch)).collect();
    let residual_sd: Vec<f64> = (0..n)
        .map(|_| rng.random_range(config.residual_vol_min..=config.residual_vol_max))
        .collect();
    let mut residual_paths: Vec<VolPath> = residual_sd.iter().map(|s| VolPath::new(*s, config.residual_garch)).collect();

    let mut raw = vec![0.0; l * days];
    let mut identified = vec![0.0; l * days];
    let mut returns = vec![f64::NAN; n * days];
    for t in 0..days {
        let m = months.binary_search(&calendar.month_of(t)).expect("calendar month");
        let z: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
        let zc = &lower * nalgebra::DVector::from_vec(z);
        let mut f: Vec<f64> = (0..l).map(|i| factor_paths[i].step(zc[i], config.regimes, &mut rng)).collect();
        for i in 0..l {
            raw[i * days + t] = f[i];
        }
        // identification: cap-weighted country and industry sums are zero
        let blocks = [
            (country_pos(0), &country_of, config.n_countries),
            (industry_pos(0), &industry_of, config.n_industries),
        ];
        for (block, of, count) in blocks {
            let mut num = 0.0;
            let mut den = 0.0;
            for k in 0..n {
                let cap = mcaps.get(k, m).expect("generated");
                num += cap * f[block + of[k]];
                den += cap;
            }
            let shift = num / den;
            for c in 0..count {
                f[block + c] -= shift;
            }
            f[0] += shift;
        }
        for i in 0..l {
            identified[i * days + t] = f[i];
        }
        for k in 0..n {
            let eps = residual_paths[k].step(rng.sample(StandardNormal), config.regimes, &mut rng);
            let x = loadings.row(k, m);
            let systematic: f64 = x.iter().zip(&f).filter(|(v, _)| !v.is_nan()).map(|(v, fv)| v * fv).sum();
            let missing = config.missing_rate > 0.0 && rng.random::<f64>() < config.missing_rate;
            if !missing {
                returns[k * days + t] = systematic + eps;
            }
        }
    }

    let factor_names: Vec<String> = factors.iter().map(|f| f.name.clone()).collect();
    Ok(SynthUniverse {
        returns: SeriesPanel::from_values(companies, calendar.clone(), returns)?,
        loadings,
        mcaps,
        regions,
        truth: SynthTruth {
            factor_cov,
            raw_factor_returns: SeriesPanel::from_values(factor_names.clone(), calendar.clone(), raw)?,
            factor_returns: SeriesPanel::from_values(factor_names, calendar, identified)?,
            residual_vars: residual_sd.iter().map(|s| s * s).collect(),
            country_of,
            industry_of,
        },
        factors,
    })
}

/// Writes `returns.csv`, `loadings.csv`, `mcaps.csv`, `regions.csv` and
/// `truth_factor_returns.csv` into `dir`.
pub fn write_universe(universe: &SynthUniverse, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_returns(&universe.returns, create(&dir.join("returns.csv"))?)?;
    write_loadings(&universe.loadings, create(&dir.join("loadings.csv"))?)?;
    write_mcaps(&universe.mcaps, create(&dir.join("mcaps.csv"))?)?;
    universe.regions.write_csv(create(&dir.join("regions.csv"))?)?;
    write_series(
        &universe.truth.factor_returns,
        create(&dir.join("truth_factor_returns.csv"))?,
        ["factor", "date", "value"],
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_companies: 60,
            n_days: 130,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.returns.values().len(), b.returns.values().len());
        assert!(a.returns.values().iter().zip(b.returns.values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = generate(&SynthConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(format!("{:?}", a.returns.row(0)), format!("{:?}", c.returns.row(0)));
    }

    #[test]
    fn style_loadings_are_cap_centred() {
        let u = generate(&small()).unwrap();
        for m in 0..u.loadings.months().len() {
            for f in u.loadings.indices_of(FactorKind::Style) {
                let (mut s, mut scale) = (0.0, 0.0);
                for k in 0..60 {
                    let cap = u.mcaps.get(k, m).unwrap();
                    s += cap * u.loadings.get(k, m, f).unwrap();
                    scale += cap * u.loadings.get(k, m, f).unwrap().abs();
                }
                assert!(s.abs() <= 1e-10 * scale, "month {m} factor {f}: {s}");
            }
        }
    }

    #[test]
    fn missing_fraction_within_binomial_bounds() {
        let cfg = SynthConfig {
            missing_rate: 0.1,
            n_companies: 100,
            n_days: 500,
            ..SynthConfig::default()
        };
        let u = generate(&cfg).unwrap();
        let cells = (100 * 500) as f64;
        let missing = u.returns.missing_count() as f64;
        let sd = (cells * 0.1 * 0.9).sqrt();
        assert!((missing - 0.1 * cells).abs() < 3.0 * sd, "{missing}");
    }

    #[test]
    fn identification_leaves_returns_unchanged() {
        let cfg = SynthConfig {
            residual_vol_min: 0.0,
            residual_vol_max: 0.0,
            missing_rate: 0.0,
            ..small()
        };
        let u = generate(&cfg).unwrap();
        let days = u.returns.n_days();
        for t in [0, 50, days - 1] {
            let m = u.loadings.month_pos(u.returns.calendar().month_of(t)).unwrap();
            for k in 0..60 {
                let x = u.loadings.row(k, m);
                let raw: f64 = (0..x.len())
                    .filter(|&f| !x[f].is_nan())
                    .map(|f| x[f] * u.truth.raw_factor_returns.get(f, t).unwrap())
                    .sum();
                assert!((u.returns.get(k, t).unwrap() - raw).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn countries_cover_every_subregion_round_robin() {
        let (codes, map) = pick_countries(27).unwrap();
        assert_eq!(codes.len(), 27);
        assert_eq!(map.subregions().len(), 9);
        for s in map.subregions() {
            assert_eq!(map.countries_in_subregion(&s).len(), 3);
        }
        assert!(pick_countries(500).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate(&SynthConfig { missing_rate: 1.0, ..small() }).is_err());
        assert!(generate(&SynthConfig { n_companies: 0, ..small() }).is_err());
        assert!(
            generate(&SynthConfig {
                factor_garch: Some(GarchShape { alpha: 0.5, beta: 0.6 }),
                ..small()
            })
            .is_err()
        );
    }
}

//! Factor-based portfolio families and their random resamples.
//!
//! All weights come from the loadings and market caps of the month before the
//! test period. Long portfolios keep companies with a positive basis value,
//! long/short portfolios keep nonzero style loadings; both then keep the
//! largest companies by market cap and weight proportionally to the basis.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};

use chrono::NaiveDate;
use rand::SeedableRng;
use rand::distr::Distribution;
use rand::distr::weighted::WeightedIndex;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calendar::MonthId;
use crate::error::{Error, Result};
use crate::panel::{FactorKind, LoadingPanel, MarketCapSeries, index_map};
use crate::region::RegionMap;

const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioKind {
    Long,
    LongShort,
}

impl PortfolioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PortfolioKind::Long => "long",
            PortfolioKind::LongShort => "long_short",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Restriction {
    Unrestricted,
    Region(String),
    Subregion(String),
}

impl fmt::Display for Restriction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Restriction::Unrestricted => write!(f, "unrestricted"),
            Restriction::Region(r) => write!(f, "region={r}"),
            Restriction::Subregion(s) => write!(f, "subregion={s}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Basis {
    /// Factor name, e.g. `style:momentum`.
    Factor(String),
    MarketCap,
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Basis::Factor(name) => write!(f, "{name}"),
            Basis::MarketCap => write!(f, "mc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Original,
    /// Draw number, starting at 1.
    Random(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PortfolioSpec {
    pub kind: PortfolioKind,
    pub restriction: Restriction,
    pub basis: Basis,
}

impl PortfolioSpec {
    pub fn new(kind: PortfolioKind, restriction: Restriction, basis: Basis) -> Self {
        PortfolioSpec {
            kind,
            restriction,
            basis,
        }
    }

    pub fn id(&self) -> String {
        format!("{}|{}|{}", self.kind.as_str(), self.restriction, self.basis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Member {
    /// Company position in the panel's company list.
    pub company: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Portfolio {
    pub id: String,
    pub spec: PortfolioSpec,
    pub origin: Origin,
    /// Sorted by company.
    pub members: Vec<Member>,
}

impl Portfolio {
    pub fn kind(&self) -> PortfolioKind {
        self.spec.kind
    }

    pub fn is_random(&self) -> bool {
        matches!(self.origin, Origin::Random(_))
    }

    pub fn companies(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.company)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PortfolioRules {
    pub min_members: usize,
    pub max_members: usize,
    /// Minimum count of positive and of negative weights in long/short portfolios.
    pub min_side: usize,
    pub min_market_cap: f64,
    pub random_draws: usize,
    pub random_per_original: u32,
}

impl Default for PortfolioRules {
    fn default() -> Self {
        PortfolioRules {
            min_members: 40,
            max_members: 300,
            min_side: 20,
            min_market_cap: 2e8,
            random_draws: 50,
            random_per_original: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    TooFewMembers { found: usize, required: usize },
    TooFewOnSide { positive: usize, negative: usize, required: usize },
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SkipReason::TooFewMembers { found, required } => {
                write!(f, "{found} eligible companies, {required} required")
            }
            SkipReason::TooFewOnSide {
                positive,
                negative,
                required,
            } => write!(f, "{positive} long and {negative} short companies, {required} per side required"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skip {
    pub id: String,
    pub reason: SkipReason,
}

/// Candidates passing the basis test and the cap floor, reduced to the
/// `max_members` largest caps (ties broken by company position).
fn select(
    basis: &[f64],
    caps: &[f64],
    allowed: Option<&[bool]>,
    rules: &PortfolioRules,
    keep: impl Fn(f64) -> bool,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..basis.len())
        .filter(|&k| allowed.is_none_or(|a| a[k]))
        .filter(|&k| basis[k].is_finite() && keep(basis[k]))
        .filter(|&k| caps[k].is_finite() && caps[k] >= rules.min_market_cap)
        .collect();
    idx.sort_by(|&a, &b| caps[b].total_cmp(&caps[a]).then(a.cmp(&b)));
    idx.truncate(rules.max_members);
    idx.sort_unstable();
    idx
}

/// Long portfolio with weights proportional to a positive basis value.
/// `basis` and `caps` are per company (NaN = missing); `allowed` is the
/// region filter.
pub fn build_long(
    spec: PortfolioSpec,
    basis: &[f64],
    caps: &[f64],
    allowed: Option<&[bool]>,
    rules: &PortfolioRules,
) -> std::result::Result<Portfolio, Skip> {
    let idx = select(basis, caps, allowed, rules, |x| x > 0.0);
    if idx.len() < rules.min_members {
        return Err(Skip {
            id: spec.id(),
            reason: SkipReason::TooFewMembers {
                found: idx.len(),
                required: rules.min_members,
            },
        });
    }
    let total: f64 = idx.iter().map(|&k| basis[k]).sum();
    Ok(Portfolio {
        id: spec.id(),
        spec,
        origin: Origin::Original,
        members: idx
            .iter()
            .map(|&k| Member {
                company: k,
                weight: basis[k] / total,
            })
            .collect(),
    })
}

/// Scales positive weights to sum to 0.5 and negative weights to -0.5.
fn balance_sides(members: &mut [Member]) {
    let pos: f64 = members.iter().filter(|m| m.weight > 0.0).map(|m| m.weight).sum();
    let neg: f64 = members.iter().filter(|m| m.weight < 0.0).map(|m| -m.weight).sum();
    for m in members.iter_mut() {
        if m.weight > 0.0 {
            m.weight *= 0.5 / pos;
        } else {
            m.weight *= 0.5 / neg;
        }
    }
}

/// Dollar-neutral portfolio with weights proportional to a nonzero style
/// loading, each side scaled to half the gross exposure.
pub fn build_long_short(
    spec: PortfolioSpec,
    basis: &[f64],
    caps: &[f64],
    allowed: Option<&[bool]>,
    rules: &PortfolioRules,
) -> std::result::Result<Portfolio, Skip> {
    let idx = select(basis, caps, allowed, rules, |x| x != 0.0);
    let positive = idx.iter().filter(|&&k| basis[k] > 0.0).count();
    let negative = idx.len() - positive;
    if positive < rules.min_side || negative < rules.min_side {
        return Err(Skip {
            id: spec.id(),
            reason: SkipReason::TooFewOnSide {
                positive,
                negative,
                required: rules.min_side,
            },
        });
    }
    if idx.len() < rules.min_members {
        return Err(Skip {
            id: spec.id(),
            reason: SkipReason::TooFewMembers {
                found: idx.len(),
                required: rules.min_members,
            },
        });
    }
    let mut members: Vec<Member> = idx
        .iter()
        .map(|&k| Member {
            company: k,
            weight: basis[k],
        })
        .collect();
    balance_sides(&mut members);
    Ok(Portfolio {
        id: spec.id(),
        spec,
        origin: Origin::Original,
        members,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ *b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Stable seed for one resample of one portfolio in one period.
pub fn resample_seed(base: u64, period_start: MonthId, id: &str, draw: u32) -> u64 {
    let month = period_start.year() as i64 * 12 + period_start.month() as i64;
    let s = splitmix64(base ^ fnv1a(id.as_bytes()));
    let s = splitmix64(s ^ month as u64);
    splitmix64(s ^ draw as u64)
}

/// Draws `draws` members with replacement using `|w|` as sampling weights.
/// Repeated draws merge; the new weight is `sign(w) * count`, normalised to
/// unit gross exposure (long/short: each side to one half). Long/short
/// resamples that land on one side only are redrawn.
pub fn resample_random(portfolio: &Portfolio, seed: u64, draws: usize, draw_number: u32) -> Portfolio {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = WeightedIndex::new(portfolio.members.iter().map(|m| m.weight.abs()))
        .expect("portfolio has positive gross weight");
    let members = loop {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for _ in 0..draws {
            *counts.entry(sampler.sample(&mut rng)).or_default() += 1;
        }
        let mut members: Vec<Member> = counts
            .iter()
            .map(|(&i, &c)| {
                let m = portfolio.members[i];
                Member {
                    company: m.company,
                    weight: m.weight.signum() * c as f64,
                }
            })
            .collect();
        match portfolio.kind() {
            PortfolioKind::Long => {
                let total: f64 = members.iter().map(|m| m.weight).sum();
                members.iter_mut().for_each(|m| m.weight /= total);
                break members;
            }
            PortfolioKind::LongShort => {
                let both = members.iter().any(|m| m.weight > 0.0) && members.iter().any(|m| m.weight < 0.0);
                if both {
                    balance_sides(&mut members);
                    break members;
                }
            }
        }
    };
    Portfolio {
        id: format!("{}|random{draw_number}", portfolio.id),
        spec: portfolio.spec.clone(),
        origin: Origin::Random(draw_number),
        members,
    }
}

/// Checks the weight identities and, for original portfolios, the size and
/// side-count bounds. Returns a description of the first violation.
pub fn check_invariants(p: &Portfolio, rules: &PortfolioRules) -> std::result::Result<(), String> {
    let gross: f64 = p.members.iter().map(|m| m.weight.abs()).sum();
    if (gross - 1.0).abs() > NORM_TOL {
        return Err(format!("{}: sum of |w| is {gross}", p.id));
    }
    let positive = p.members.iter().filter(|m| m.weight > 0.0).count();
    let negative = p.members.iter().filter(|m| m.weight < 0.0).count();
    match p.kind() {
        PortfolioKind::Long if negative > 0 || positive != p.members.len() => {
            return Err(format!("{}: long portfolio with non-positive weights", p.id));
        }
        PortfolioKind::LongShort => {
            let net: f64 = p.members.iter().map(|m| m.weight).sum();
            if net.abs() > NORM_TOL {
                return Err(format!("{}: long/short net weight {net}", p.id));
            }
            if p.origin == Origin::Original && (positive < rules.min_side || negative < rules.min_side) {
                return Err(format!("{}: {positive} long / {negative} short members", p.id));
            }
        }
        _ => {}
    }
    if p.origin == Origin::Original && !(rules.min_members..=rules.max_members).contains(&p.members.len()) {
        return Err(format!("{}: {} members", p.id, p.members.len()));
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct PortfolioSet {
    pub portfolios: Vec<Portfolio>,
    pub skipped: Vec<Skip>,
}

impl PortfolioSet {
    pub fn originals(&self) -> impl Iterator<Item = &Portfolio> {
        self.portfolios.iter().filter(|p| !p.is_random())
    }
}

/// Builds every original portfolio family for the period starting at
/// `period_start`, followed by `rules.random_per_original` resamples of each.
///
/// - long, unrestricted: every country, industry and style factor, plus mc
/// - long/short, unrestricted: every style factor
/// - long, per region and per subregion: every style factor, plus mc
/// - long/short, per region and per subregion: every style factor
pub fn build_universe_of_portfolios(
    loadings: &LoadingPanel,
    mcaps: &MarketCapSeries,
    regions: &RegionMap,
    period_start: MonthId,
    rules: &PortfolioRules,
    seed: u64,
) -> Result<PortfolioSet> {
    let month = period_start.offset(-1);
    let (Some(lm), Some(cm)) = (loadings.month_pos(month), mcaps.month_pos(month)) else {
        return Err(Error::Invalid(format!(
            "no loadings or market caps for {month}, the month before the period starting {period_start}"
        )));
    };
    let n = loadings.companies().len();
    let column = |f: usize| -> Vec<f64> { (0..n).map(|k| loadings.row(k, lm)[f]).collect() };
    let caps: Vec<f64> = (0..n).map(|k| mcaps.get(k, cm).unwrap_or(f64::NAN)).collect();
    let styles = loadings.indices_of(FactorKind::Style);
    let countries = loadings.indices_of(FactorKind::Country);
    let industries = loadings.indices_of(FactorKind::Industry);
    let name = |f: usize| loadings.factors()[f].name.clone();

    let mut set = PortfolioSet::default();
    let mut push = |r: std::result::Result<Portfolio, Skip>| match r {
        Ok(p) => set.portfolios.push(p),
        Err(s) => set.skipped.push(s),
    };

    let long_bases: Vec<usize> = countries.iter().chain(&industries).chain(&styles).copied().collect();
    for &f in &long_bases {
        let spec = PortfolioSpec::new(PortfolioKind::Long, Restriction::Unrestricted, Basis::Factor(name(f)));
        push(build_long(spec, &column(f), &caps, None, rules));
    }
    push(build_long(
        PortfolioSpec::new(PortfolioKind::Long, Restriction::Unrestricted, Basis::MarketCap),
        &caps,
        &caps,
        None,
        rules,
    ));
    for &f in &styles {
        let spec = PortfolioSpec::new(PortfolioKind::LongShort, Restriction::Unrestricted, Basis::Factor(name(f)));
        push(build_long_short(spec, &column(f), &caps, None, rules));
    }

    let restrictions: Vec<(Restriction, Vec<&str>)> = regions
        .regions()
        .into_iter()
        .map(|r| {
            let c = regions.countries_in_region(&r);
            (Restriction::Region(r), c)
        })
        .chain(regions.subregions().into_iter().map(|s| {
            let c = regions.countries_in_subregion(&s);
            (Restriction::Subregion(s), c)
        }))
        .collect();
    for (restriction, members) in restrictions {
        let cols: Vec<usize> = countries
            .iter()
            .copied()
            .filter(|&f| members.contains(&loadings.factors()[f].label()))
            .collect();
        let allowed: Vec<bool> = (0..n).map(|k| cols.iter().any(|&f| loadings.row(k, lm)[f] > 0.0)).collect();
        for &f in &styles {
            let spec = PortfolioSpec::new(PortfolioKind::Long, restriction.clone(), Basis::Factor(name(f)));
            push(build_long(spec, &column(f), &caps, Some(&allowed), rules));
        }
        push(build_long(
            PortfolioSpec::new(PortfolioKind::Long, restriction.clone(), Basis::MarketCap),
            &caps,
            &caps,
            Some(&allowed),
            rules,
        ));
        for &f in &styles {
            let spec = PortfolioSpec::new(PortfolioKind::LongShort, restriction.clone(), Basis::Factor(name(f)));
            push(build_long_short(spec, &column(f), &caps, Some(&allowed), rules));
        }
    }

    let originals = set.portfolios.len();
    for i in 0..originals {
        for draw in 1..=rules.random_per_original {
            let p = &set.portfolios[i];
            let s = resample_seed(seed, period_start, &p.id, draw);
            let r = resample_random(p, s, rules.random_draws, draw);
            set.portfolios.push(r);
        }
    }
    Ok(set)
}

/// Rows of the original-portfolio type table: (kind, scope, basis type).
pub const TYPE_ROWS: [(&str, &str, &str); 8] = [
    ("Long", "Unrestricted", "country"),
    ("Long", "Unrestricted", "industry"),
    ("Long", "Unrestricted", "style + mc"),
    ("Long/short", "Unrestricted", "style"),
    ("Long", "regions", "style + mc"),
    ("Long/short", "regions", "style"),
    ("Long", "subregions", "style + mc"),
    ("Long/short", "subregions", "style"),
];

/// Counts of original portfolios per [`TYPE_ROWS`] entry.
pub fn type_counts(portfolios: &[Portfolio]) -> [usize; 8] {
    let mut counts = [0; 8];
    for p in portfolios.iter().filter(|p| !p.is_random()) {
        let basis_kind = match &p.spec.basis {
            Basis::MarketCap => None,
            Basis::Factor(name) => name.split(':').next(),
        };
        let row = match (p.kind(), &p.spec.restriction, basis_kind) {
            (PortfolioKind::Long, Restriction::Unrestricted, Some("country")) => 0,
            (PortfolioKind::Long, Restriction::Unrestricted, Some("industry")) => 1,
            (PortfolioKind::Long, Restriction::Unrestricted, _) => 2,
            (PortfolioKind::LongShort, Restriction::Unrestricted, _) => 3,
            (PortfolioKind::Long, Restriction::Region(_), _) => 4,
            (PortfolioKind::LongShort, Restriction::Region(_), _) => 5,
            (PortfolioKind::Long, Restriction::Subregion(_), _) => 6,
            (PortfolioKind::LongShort, Restriction::Subregion(_), _) => 7,
        };
        counts[row] += 1;
    }
    counts
}

/// Writes `portfolio_id,period,company,weight` rows.
pub fn write_portfolios<W: Write>(
    rows: &[(NaiveDate, &Portfolio)],
    companies: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["portfolio_id", "period", "company", "weight"])?;
    for (period, p) in rows {
        for m in &p.members {
            w.write_record([
                p.id.as_str(),
                &period.to_string(),
                &companies[m.company],
                &format!("{:e}", m.weight),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PortfolioRow {
    portfolio_id: String,
    period: NaiveDate,
    company: String,
    weight: f64,
}

/// Parses an id written by [`PortfolioSpec::id`], optionally followed by
/// `|randomN`. Unknown ids are inferred from the weights.
fn parse_id(id: &str, members: &[Member]) -> (PortfolioSpec, Origin) {
    let parts: Vec<&str> = id.split('|').collect();
    let origin = parts
        .last()
        .and_then(|s| s.strip_prefix("random"))
        .and_then(|n| n.parse().ok())
        .map_or(Origin::Original, Origin::Random);
    let kind = match parts.first() {
        Some(&"long") => PortfolioKind::Long,
        Some(&"long_short") => PortfolioKind::LongShort,
        _ if members.iter().any(|m| m.weight < 0.0) => PortfolioKind::LongShort,
        _ => PortfolioKind::Long,
    };
    let restriction = match parts.get(1).and_then(|s| s.split_once('=')) {
        Some(("region", r)) => Restriction::Region(r.to_string()),
        Some(("subregion", s)) => Restriction::Subregion(s.to_string()),
        _ => Restriction::Unrestricted,
    };
    let basis = match parts.get(2) {
        Some(&"mc") => Basis::MarketCap,
        Some(name) => Basis::Factor(name.to_string()),
        None => Basis::Factor(id.to_string()),
    };
    (PortfolioSpec::new(kind, restriction, basis), origin)
}

/// Reads a portfolio CSV into `(period start, portfolio)` pairs, in order of
/// first appearance. Companies must be known.
pub fn read_portfolios<R: Read>(input: R, file: &str, companies: &[String]) -> Result<Vec<(NaiveDate, Portfolio)>> {
    let index = index_map(companies);
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["portfolio_id", "period", "company", "weight"] {
        return Err(Error::Parse {
            file: file.to_string(),
            line: 1,
            message: "expected header portfolio_id,period,company,weight".into(),
        });
    }
    let mut order: Vec<(NaiveDate, String)> = Vec::new();
    let mut groups: BTreeMap<(NaiveDate, String), Vec<Member>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<PortfolioRow>().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| Error::Parse {
            file: file.to_string(),
            line,
            message: e.to_string(),
        })?;
        let Some(&k) = index.get(row.company.as_str()) else {
            return Err(Error::Parse {
                file: file.to_string(),
                line,
                message: format!("unknown company {}", row.company),
            });
        };
        let key = (row.period, row.portfolio_id);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            Vec::new()
        });
        if entry.iter().any(|m| m.company == k) {
            return Err(Error::Conflict {
                file: file.to_string(),
                line,
                key: format!("{}/{}/{}", key.1, key.0, row.company),
            });
        }
        entry.push(Member {
            company: k,
            weight: row.weight,
        });
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let mut members = groups.remove(&key).unwrap_or_default();
            members.sort_by_key(|m| m.company);
            let (spec, origin) = parse_id(&key.1, &members);
            (
                key.0,
                Portfolio {
                    id: key.1,
                    spec,
                    origin,
                    members,
                },
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(kind: PortfolioKind) -> PortfolioSpec {
        PortfolioSpec::new(kind, Restriction::Unrestricted, Basis::Factor("style:x".into()))
    }

    fn small_rules() -> PortfolioRules {
        PortfolioRules {
            min_members: 3,
            min_side: 1,
            ..PortfolioRules::default()
        }
    }

    #[test]
    fn proportional_long_weights() {
        let x = [1.0, 2.0, 3.0, 0.0, -1.0];
        let caps = [1e9; 5];
        let p = build_long(spec(PortfolioKind::Long), &x, &caps, None, &small_rules()).unwrap();
        assert_eq!(p.companies().collect::<Vec<_>>(), [0, 1, 2]);
        let w = p.weights();
        for (a, b) in w.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn keeps_the_300_largest() {
        let x = vec![1.0; 400];
        let caps: Vec<f64> = (0..400).map(|k| 1e9 + k as f64 * 1e6).collect();
        let p = build_long(spec(PortfolioKind::Long), &x, &caps, None, &PortfolioRules::default()).unwrap();
        assert_eq!(p.members.len(), 300);
        assert_eq!(p.companies().min(), Some(100));
    }

    #[test]
    fn thirty_nine_survivors_are_skipped() {
        let x = vec![1.0; 39];
        let caps = vec![1e9; 39];
        let err = build_long(spec(PortfolioKind::Long), &x, &caps, None, &PortfolioRules::default()).unwrap_err();
        assert_eq!(
            err.reason,
            SkipReason::TooFewMembers {
                found: 39,
                required: 40
            }
        );
    }

    #[test]
    fn cap_floor_and_region_filter() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let caps = [1e9, 1e8, 1e9, 1e9];
        let allowed = [true, true, false, true];
        let p = build_long(spec(PortfolioKind::Long), &x, &caps, Some(&allowed), &PortfolioRules {
            min_members: 2,
            ..PortfolioRules::default()
        })
        .unwrap();
        assert_eq!(p.companies().collect::<Vec<_>>(), [0, 3]);
    }

    #[test]
    fn symmetric_long_short_is_antisymmetric() {
        let x: Vec<f64> = (0..80).map(|k| if k < 40 { 0.7 } else { -0.7 }).collect();
        let caps = vec![1e9; 80];
        let p = build_long_short(spec(PortfolioKind::LongShort), &x, &caps, None, &PortfolioRules::default()).unwrap();
        assert!(p.members[..40].iter().zip(&p.members[40..]).all(|(a, b)| a.weight == -b.weight));
        let paired: f64 = p.members[..40].iter().zip(&p.members[40..]).map(|(a, b)| a.weight + b.weight).sum();
        assert_eq!(paired, 0.0);
        assert!(p.weights().iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn nineteen_shorts_are_skipped() {
        let x: Vec<f64> = (0..80).map(|k| if k < 61 { 1.0 } else { -1.0 }).collect();
        let caps = vec![1e9; 80];
        let err = build_long_short(spec(PortfolioKind::LongShort), &x, &caps, None, &PortfolioRules::default())
            .unwrap_err();
        assert!(matches!(err.reason, SkipReason::TooFewOnSide { negative: 19, .. }));
    }

    #[test]
    fn dominant_weight_is_almost_always_drawn() {
        let mut members = vec![Member {
            company: 0,
            weight: 0.99,
        }];
        members.extend((1..41).map(|k| Member {
            company: k,
            weight: 0.01 / 40.0,
        }));
        let p = Portfolio {
            id: "p".into(),
            spec: spec(PortfolioKind::Long),
            origin: Origin::Original,
            members,
        };
        for seed in 0..100 {
            let r = resample_random(&p, seed, 50, 1);
            assert_eq!(r.members[0].company, 0);
            assert!((1..=50).contains(&r.members.len()));
            check_invariants(&r, &PortfolioRules::default()).unwrap();
        }
    }

    #[test]
    fn inclusion_frequencies_match_sampling_weights() {
        let raw = [5.0, 3.0, 1.0, 0.5, 0.5];
        let total: f64 = raw.iter().sum();
        let p = Portfolio {
            id: "p".into(),
            spec: spec(PortfolioKind::Long),
            origin: Origin::Original,
            members: raw
                .iter()
                .enumerate()
                .map(|(k, w)| Member {
                    company: k,
                    weight: w / total,
                })
                .collect(),
        };
        let trials = 10_000;
        let draws = 5;
        let mut hits = [0usize; 5];
        for seed in 0..trials {
            let r = resample_random(&p, seed as u64, draws, 1);
            for m in &r.members {
                hits[m.company] += 1;
            }
        }
        for (k, w) in raw.iter().enumerate() {
            let prob = 1.0 - (1.0 - w / total).powi(draws as i32);
            let expected = prob * trials as f64;
            let sd = (trials as f64 * prob * (1.0 - prob)).sqrt();
            assert!((hits[k] as f64 - expected).abs() < 3.0 * sd, "company {k}: {} vs {expected}", hits[k]);
        }
    }

    #[test]
    fn resampling_is_deterministic() {
        let x: Vec<f64> = (0..60).map(|k| (k as f64 - 29.5) / 10.0).collect();
        let caps = vec![1e9; 60];
        let p = build_long_short(spec(PortfolioKind::LongShort), &x, &caps, None, &PortfolioRules::default()).unwrap();
        let seed = resample_seed(7, MonthId::new(2013, 2), &p.id, 1);
        assert_eq!(resample_random(&p, seed, 50, 1), resample_random(&p, seed, 50, 1));
        assert_ne!(seed, resample_seed(7, MonthId::new(2013, 2), &p.id, 2));
        assert_ne!(seed, resample_seed(7, MonthId::new(2013, 3), &p.id, 1));
        check_invariants(&resample_random(&p, seed, 50, 1), &PortfolioRules::default()).unwrap();
    }

    #[test]
    fn csv_round_trip_preserves_portfolios() {
        let x: Vec<f64> = (0..60).map(|k| (k as f64 - 29.5) / 10.0).collect();
        let caps = vec![1e9; 60];
        let p = build_long_short(
            PortfolioSpec::new(PortfolioKind::LongShort, Restriction::Subregion("Northern Europe".into()), Basis::Factor("style:x".into())),
            &x,
            &caps,
            None,
            &PortfolioRules::default(),
        )
        .unwrap();
        let r = resample_random(&p, 3, 50, 2);
        let companies: Vec<String> = (0..60).map(|k| format!("c{k}")).collect();
        let day = NaiveDate::from_ymd_opt(2013, 2, 1).unwrap();
        let mut buf = Vec::new();
        write_portfolios(&[(day, &p), (day, &r)], &companies, &mut buf).unwrap();
        let back = read_portfolios(buf.as_slice(), "p.csv", &companies).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].1, p);
        assert_eq!(back[1].1, r);
    }

    proptest! {
        #[test]
        fn built_portfolios_satisfy_invariants(
            x in prop::collection::vec(-3.0f64..3.0, 40..400),
            caps_seed in prop::collection::vec(1e8f64..1e11, 400),
        ) {
            let caps = &caps_seed[..x.len()];
            let rules = PortfolioRules::default();
            if let Ok(p) = build_long(spec(PortfolioKind::Long), &x, caps, None, &rules) {
                prop_assert!(check_invariants(&p, &rules).is_ok());
                prop_assert!(p.members.iter().all(|m| caps[m.company] >= rules.min_market_cap));
            }
            if let Ok(p) = build_long_short(spec(PortfolioKind::LongShort), &x, caps, None, &rules) {
                prop_assert!(check_invariants(&p, &rules).is_ok(), "{:?}", check_invariants(&p, &rules));
                for d in 1..3 {
                    let r = resample_random(&p, d as u64, 50, d);
                    prop_assert!(check_invariants(&r, &rules).is_ok());
                }
            }
        }
    }
}

//! The four portfolio volatility schemes.
//!
//! - direct: `sqrt(w' D R D w)` over the portfolio's companies
//! - factor: `sqrt(L' D_f R_f D_f L + sum_k w_k^2 s2_k)` with `L = X' w`
//!
//! `R` is always the pairwise naive correlation over the `q` months before
//! the period; `D` holds either the naive window standard deviations or the
//! latest GARCH standard deviations (naive where the GARCH fit fell back).
//! Correlation matrices that are not positive semidefinite are replaced by
//! their nearest correlation matrix.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calendar::MonthId;
use crate::cov::{PD_TOL, abs_quadratic_form, checked_sqrt, pairwise_cov, quadratic_form, recompose, repair_correlation};
use crate::error::{Error, Result};
use crate::factor::{FactorReturns, PanelFit, residual_variances};
use crate::garch::{GarchDiagonal, garch_stdev_diagonal};
use crate::panel::{LoadingPanel, ResidualPanel, ReturnPanel, window_slice};
use crate::portfolio::{Member, Portfolio};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Direct,
    Factor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceModel {
    Naive,
    Garch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SchemeId {
    pub approach: Approach,
    pub variance_model: VarianceModel,
    /// Window length in calendar months.
    pub q: u32,
}

impl SchemeId {
    pub fn new(approach: Approach, variance_model: VarianceModel, q: u32) -> Result<Self> {
        if q == 0 {
            return Err(Error::Invalid("window length q must be at least 1".into()));
        }
        Ok(SchemeId {
            approach,
            variance_model,
            q,
        })
    }

    /// `direct_naive`, `factor_garch`, ...
    pub fn method(&self) -> &'static str {
        method_name(self.approach, self.variance_model)
    }

    /// Every approach and variance model for each window length, ordered
    /// approach, variance model, q.
    pub fn grid(qs: &[u32]) -> Result<Vec<SchemeId>> {
        let mut out = Vec::new();
        for approach in [Approach::Direct, Approach::Factor] {
            for model in [VarianceModel::Naive, VarianceModel::Garch] {
                for &q in qs {
                    out.push(SchemeId::new(approach, model, q)?);
                }
            }
        }
        Ok(out)
    }
}

pub fn method_name(approach: Approach, model: VarianceModel) -> &'static str {
    match (approach, model) {
        (Approach::Direct, VarianceModel::Naive) => "direct_naive",
        (Approach::Direct, VarianceModel::Garch) => "direct_garch",
        (Approach::Factor, VarianceModel::Naive) => "factor_naive",
        (Approach::Factor, VarianceModel::Garch) => "factor_garch",
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_q{}", self.method(), self.q)
    }
}

impl std::str::FromStr for SchemeId {
    type Err = Error;

    /// Parses the [`Display`](fmt::Display) form, e.g. `factor_garch_q6`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("unknown scheme {s:?}, expected e.g. direct_naive_q1"));
        let (method, q) = s.rsplit_once("_q").ok_or_else(bad)?;
        let q: u32 = q.parse().map_err(|_| bad())?;
        let (approach, model) = match method {
            "direct_naive" => (Approach::Direct, VarianceModel::Naive),
            "direct_garch" => (Approach::Direct, VarianceModel::Garch),
            "factor_naive" => (Approach::Factor, VarianceModel::Naive),
            "factor_garch" => (Approach::Factor, VarianceModel::Garch),
            _ => return Err(bad()),
        };
        SchemeId::new(approach, model, q)
    }
}

/// `sqrt(v' R v)` for `v = w * d`, accepting rounding-level negatives.
fn correlation_volatility(corr: &DMatrix<f64>, v: &[f64]) -> Result<f64> {
    checked_sqrt(quadratic_form(corr, v), abs_quadratic_form(corr, v))
}

/// Direct-approach covariance pieces for one period and window length,
/// shared by every portfolio of the period. The correlation matrix of all
/// companies is repaired once if needed, which makes every portfolio's
/// sub-block PSD as well.
#[derive(Debug, Clone)]
pub struct DirectEstimator {
    companies: Vec<usize>,
    index: HashMap<usize, usize>,
    corr: DMatrix<f64>,
    naive: Vec<f64>,
    garch: Option<Vec<f64>>,
    repaired: bool,
}

impl DirectEstimator {
    /// Pairwise estimates for `companies` (panel positions) over the `q`
    /// months before `period_start`.
    pub fn new(returns: &ReturnPanel, companies: &[usize], period_start: MonthId, q: u32) -> Result<Self> {
        let range = returns.calendar().window(period_start, q)?;
        Self::over_days(returns, companies, range)
    }

    /// Pairwise estimates over an explicit range of trading days.
    pub fn over_days(returns: &ReturnPanel, companies: &[usize], days: Range<usize>) -> Result<Self> {
        let est = pairwise_cov(&returns.slice_days(days), companies);
        let naive: Vec<f64> = est.stdevs.iter().copied().collect();
        let (corr, repaired) = repair_correlation(&est.corr, &naive, PD_TOL)?;
        Ok(DirectEstimator {
            companies: companies.to_vec(),
            index: companies.iter().enumerate().map(|(i, &k)| (k, i)).collect(),
            corr,
            naive,
            garch: None,
            repaired,
        })
    }

    /// Whether the pairwise correlation matrix needed repair.
    pub fn repaired(&self) -> bool {
        self.repaired
    }

    pub fn companies(&self) -> &[usize] {
        &self.companies
    }

    pub fn naive_stdevs(&self) -> &[f64] {
        &self.naive
    }

    /// Sets GARCH standard deviations aligned with [`Self::companies`].
    /// Companies without observations in the window keep a zero stdev.
    pub fn set_garch(&mut self, stdevs: &[f64]) -> Result<()> {
        if stdevs.len() != self.naive.len() {
            return Err(Error::DimensionMismatch {
                context: "garch stdevs",
                expected: self.naive.len(),
                actual: stdevs.len(),
            });
        }
        self.garch = Some(
            stdevs
                .iter()
                .zip(&self.naive)
                .map(|(g, n)| if *n > 0.0 { *g } else { 0.0 })
                .collect(),
        );
        Ok(())
    }

    fn stdevs(&self, model: VarianceModel) -> Result<&[f64]> {
        match model {
            VarianceModel::Naive => Ok(&self.naive),
            VarianceModel::Garch => self
                .garch
                .as_deref()
                .ok_or_else(|| Error::Invalid("GARCH standard deviations were not computed".into())),
        }
    }

    pub fn volatility(&self, members: &[Member], model: VarianceModel) -> Result<f64> {
        let d = self.stdevs(model)?;
        let pos = members
            .iter()
            .map(|m| {
                self.index
                    .get(&m.company)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("company {} not in the estimation set", m.company)))
            })
            .collect::<Result<Vec<usize>>>()?;
        let p = pos.len();
        let corr = DMatrix::from_fn(p, p, |i, j| self.corr[(pos[i], pos[j])]);
        let v: Vec<f64> = members.iter().zip(&pos).map(|(m, &i)| m.weight * d[i]).collect();
        correlation_volatility(&corr, &v)
    }
}

/// `L = X' w`.
pub fn portfolio_loading_vector(exposures: &DMatrix<f64>, weights: &[f64]) -> DVector<f64> {
    exposures.transpose() * DVector::from_column_slice(weights)
}

/// `L' S L`.
pub fn systematic_variance(loading: &DVector<f64>, factor_cov: &DMatrix<f64>) -> f64 {
    quadratic_form(factor_cov, loading.as_slice())
}

/// `w' (X S X') w`, through the full company-by-company matrix.
pub fn systematic_variance_expanded(exposures: &DMatrix<f64>, weights: &[f64], factor_cov: &DMatrix<f64>) -> f64 {
    let company_cov = exposures * factor_cov * exposures.transpose();
    quadratic_form(&company_cov, weights)
}

/// Factor-approach pieces for one period and window length.
#[derive(Debug, Clone)]
pub struct FactorEstimator {
    naive: Vec<f64>,
    garch: Option<Vec<f64>>,
    corr: DMatrix<f64>,
    cov_naive: DMatrix<f64>,
    cov_garch: Option<DMatrix<f64>>,
    residual_var: Vec<f64>,
    /// Company × factor loadings of the month before the period, missing as 0.
    exposures: DMatrix<f64>,
}

impl FactorEstimator {
    pub fn new(
        factor_returns: &FactorReturns,
        residuals: &ResidualPanel,
        loadings: &LoadingPanel,
        period_start: MonthId,
        q: u32,
    ) -> Result<Self> {
        let l = factor_returns.factors.len();
        if loadings.n_factors() != l {
            return Err(Error::DimensionMismatch {
                context: "factor count of loadings vs factor returns",
                expected: l,
                actual: loadings.n_factors(),
            });
        }
        let window = window_slice(&factor_returns.values, period_start, q)?;
        let all: Vec<usize> = (0..l).collect();
        let est = pairwise_cov(&window, &all);
        let naive: Vec<f64> = est.stdevs.iter().copied().collect();
        let (corr, _) = repair_correlation(&est.corr, &naive, PD_TOL)?;
        let month = period_start.offset(-1);
        let m = loadings
            .month_pos(month)
            .ok_or_else(|| Error::Invalid(format!("no loadings for {month}")))?;
        let n = loadings.companies().len();
        let exposures = DMatrix::from_fn(n, l, |k, f| {
            let v = loadings.row(k, m)[f];
            if v.is_nan() { 0.0 } else { v }
        });
        let cov_naive = recompose(&DVector::from_column_slice(&naive), &corr);
        Ok(FactorEstimator {
            naive,
            garch: None,
            corr,
            cov_naive,
            cov_garch: None,
            residual_var: residual_variances(residuals, period_start, q)?,
            exposures,
        })
    }

    pub fn naive_stdevs(&self) -> &[f64] {
        &self.naive
    }

    /// GARCH standard deviations, one per factor.
    pub fn set_garch(&mut self, stdevs: &[f64]) -> Result<()> {
        if stdevs.len() != self.naive.len() {
            return Err(Error::DimensionMismatch {
                context: "factor garch stdevs",
                expected: self.naive.len(),
                actual: stdevs.len(),
            });
        }
        let g: Vec<f64> = stdevs
            .iter()
            .zip(&self.naive)
            .map(|(g, n)| if *n > 0.0 { *g } else { 0.0 })
            .collect();
        self.cov_garch = Some(recompose(&DVector::from_column_slice(&g), &self.corr));
        self.garch = Some(g);
        Ok(())
    }

    pub fn factor_covariance(&self, model: VarianceModel) -> Result<&DMatrix<f64>> {
        match model {
            VarianceModel::Naive => Ok(&self.cov_naive),
            VarianceModel::Garch => self
                .cov_garch
                .as_ref()
                .ok_or_else(|| Error::Invalid("GARCH factor standard deviations were not computed".into())),
        }
    }

    pub fn residual_variances(&self) -> &[f64] {
        &self.residual_var
    }

    pub fn volatility(&self, members: &[Member], model: VarianceModel) -> Result<f64> {
        let cov = self.factor_covariance(model)?;
        let l = self.exposures.ncols();
        let mut loading = DVector::zeros(l);
        let mut idio = 0.0;
        for m in members {
            if m.company >= self.exposures.nrows() {
                return Err(Error::Invalid(format!("company {} has no loadings", m.company)));
            }
            loading += self.exposures.row(m.company).transpose() * m.weight;
            idio += m.weight * m.weight * self.residual_var[m.company];
        }
        let sys = systematic_variance(&loading, cov);
        checked_sqrt(sys + idio, abs_quadratic_form(cov, loading.as_slice()) + idio)
    }
}

/// Single direct estimate, fitting GARCH on the members only when needed.
pub fn estimate_direct(
    portfolio: &Portfolio,
    returns: &ReturnPanel,
    scheme: SchemeId,
    period_start: MonthId,
    garch_history_months: u32,
) -> Result<f64> {
    if scheme.approach != Approach::Direct {
        return Err(Error::Invalid(format!("{scheme} is not a direct scheme")));
    }
    let companies: Vec<usize> = portfolio.companies().collect();
    let mut est = DirectEstimator::new(returns, &companies, period_start, scheme.q)?;
    if scheme.variance_model == VarianceModel::Garch {
        let diag = garch_stdev_diagonal(returns, &companies, period_start, garch_history_months);
        est.set_garch(&diag.with_fallback(est.naive_stdevs()))?;
    }
    est.volatility(&portfolio.members, scheme.variance_model)
}

/// Single factor estimate.
pub fn estimate_factor(
    portfolio: &Portfolio,
    fit: &PanelFit,
    loadings: &LoadingPanel,
    scheme: SchemeId,
    period_start: MonthId,
    garch_history_months: u32,
) -> Result<f64> {
    if scheme.approach != Approach::Factor {
        return Err(Error::Invalid(format!("{scheme} is not a factor scheme")));
    }
    let mut est = FactorEstimator::new(&fit.factor_returns, &fit.residuals, loadings, period_start, scheme.q)?;
    if scheme.variance_model == VarianceModel::Garch {
        let diag = factor_garch(&fit.factor_returns, period_start, garch_history_months);
        est.set_garch(&diag.with_fallback(est.naive_stdevs()))?;
    }
    est.volatility(&portfolio.members, scheme.variance_model)
}

pub fn factor_garch(factor_returns: &FactorReturns, period_start: MonthId, history_months: u32) -> GarchDiagonal {
    let all: Vec<usize> = (0..factor_returns.factors.len()).collect();
    garch_stdev_diagonal(&factor_returns.values, &all, period_start, history_months)
}

#[derive(Debug, Clone)]
pub struct EstimateRecord {
    pub portfolio: String,
    pub period: NaiveDate,
    pub scheme: SchemeId,
    pub estimate: f64,
}

/// Writes `portfolio,period,scheme,q,estimate` rows.
pub fn write_estimates<W: Write>(records: &[EstimateRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["portfolio", "period", "scheme", "q", "estimate"])?;
    for r in records {
        w.write_record([
            r.portfolio.as_str(),
            &r.period.to_string(),
            r.scheme.method(),
            &r.scheme.q.to_string(),
            &format!("{:e}", r.estimate),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::TradingCalendar;
    use crate::panel::SeriesPanel;
    use crate::portfolio::{Basis, Origin, PortfolioKind, PortfolioSpec, Restriction};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cal() -> TradingCalendar {
        // Jan to Mar 2020
        TradingCalendar::weekdays(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 66)
    }

    fn random_panel(n: usize, seed: u64) -> ReturnPanel {
        let cal = cal();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..n * cal.len()).map(|_| rng.random_range(-0.03..0.03)).collect();
        SeriesPanel::from_values((0..n).map(|k| format!("c{k}")).collect(), cal, values).unwrap()
    }

    fn portfolio(members: &[(usize, f64)]) -> Portfolio {
        Portfolio {
            id: "p".into(),
            spec: PortfolioSpec::new(PortfolioKind::Long, Restriction::Unrestricted, Basis::MarketCap),
            origin: Origin::Original,
            members: members.iter().map(|&(company, weight)| Member { company, weight }).collect(),
        }
    }

    fn naive(q: u32) -> SchemeId {
        SchemeId::new(Approach::Direct, VarianceModel::Naive, q).unwrap()
    }

    #[test]
    fn single_company_is_the_window_stdev() {
        let r = random_panel(2, 1);
        let march = MonthId::new(2020, 3);
        let v = estimate_direct(&portfolio(&[(1, 1.0)]), &r, naive(1), march, 36).unwrap();
        let range = r.calendar().window(march, 1).unwrap();
        let xs = r.observed(1, range);
        let m = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((v - var.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perfectly_correlated_long_short_cancels() {
        let cal = cal();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..cal.len()).map(|_| rng.random_range(-0.03..0.03)).collect();
        let values = a.iter().chain(&a).copied().collect();
        let r = SeriesPanel::from_values(vec!["a".into(), "b".into()], cal, values).unwrap();
        let v = estimate_direct(&portfolio(&[(0, 0.5), (1, -0.5)]), &r, naive(2), MonthId::new(2020, 3), 36).unwrap();
        assert!(v.abs() < 1e-9, "{v}");
    }

    #[test]
    fn three_company_window_matches_brute_force() {
        let r = random_panel(3, 3);
        let march = MonthId::new(2020, 3);
        let w = [0.2, 0.5, 0.3];
        let v = estimate_direct(&portfolio(&[(0, w[0]), (1, w[1]), (2, w[2])]), &r, naive(2), march, 36).unwrap();
        let range = r.calendar().window(march, 2).unwrap();
        let rows: Vec<Vec<f64>> = (0..3).map(|k| r.observed(k, range.clone())).collect();
        let n = rows[0].len() as f64;
        let means: Vec<f64> = rows.iter().map(|x| x.iter().sum::<f64>() / n).collect();
        let mut q = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let c: f64 = rows[i]
                    .iter()
                    .zip(&rows[j])
                    .map(|(a, b)| (a - means[i]) * (b - means[j]))
                    .sum::<f64>()
                    / (n - 1.0);
                q += w[i] * w[j] * c;
            }
        }
        assert!((v * v - q).abs() < 1e-12 * q.abs().max(1e-12));
    }

    #[test]
    fn naive_schemes_scale_with_returns() {
        let r = random_panel(4, 4);
        let p = portfolio(&[(0, 0.4), (1, 0.3), (2, -0.2), (3, 0.1)]);
        let march = MonthId::new(2020, 3);
        let a = estimate_direct(&p, &r, naive(2), march, 36).unwrap();
        let b = estimate_direct(&p, &r.scaled(3.0), naive(2), march, 36).unwrap();
        assert!((b - 3.0 * a).abs() < 1e-14);
    }

    #[test]
    fn expanded_and_compact_systematic_variance_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (p, l) = (30, 7);
        let x = DMatrix::from_fn(p, l, |_, _| rng.random_range(-1.0..1.0));
        let g = DMatrix::from_fn(l, l, |_, _| rng.random_range(-0.01..0.01));
        let s = &g * g.transpose();
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-0.1..0.1)).collect();
        let a = systematic_variance(&portfolio_loading_vector(&x, &w), &s);
        let b = systematic_variance_expanded(&x, &w, &s);
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn missing_garch_is_an_error() {
        let r = random_panel(2, 6);
        let est = DirectEstimator::new(&r, &[0, 1], MonthId::new(2020, 3), 1).unwrap();
        assert!(est.volatility(&[Member { company: 0, weight: 1.0 }], VarianceModel::Garch).is_err());
        assert!(est.volatility(&[Member { company: 5, weight: 1.0 }], VarianceModel::Naive).is_err());
    }

    #[test]
    fn scheme_grid_and_names() {
        let grid = SchemeId::grid(&[1, 3, 6, 12]).unwrap();
        assert_eq!(grid.len(), 16);
        assert_eq!(grid[0].to_string(), "direct_naive_q1");
        assert_eq!(grid[15].to_string(), "factor_garch_q12");
        assert!(SchemeId::new(Approach::Factor, VarianceModel::Naive, 0).is_err());
        for s in &grid {
            assert_eq!(s.to_string().parse::<SchemeId>().unwrap(), *s);
        }
        for bad in ["direct_naive", "direct_naive_q0", "factor_x_q1", "direct_naive_qx"] {
            assert!(bad.parse::<SchemeId>().is_err(), "{bad}");
        }
    }
}

//! Daily cross-sectional factor regression.
//!
//! For each trading day the factor returns `f` minimise
//! `sum_k w_k (r_k - x_k' f)^2` subject to linear constraints `C f = 0`,
//! where `w_k` is derived from the company's market cap. The default
//! constraints are cap-weighted sum-to-zero conditions on the country and the
//! industry blocks, which remove the collinearity of one-hot country and
//! industry exposures with the unit market column.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::calendar::MonthId;
use crate::cov::sample_variance;
use crate::error::{Error, Result};
use crate::io::write_series;
use crate::panel::{
    Factor, FactorKind, LoadingPanel, MarketCapSeries, ResidualPanel, ReturnPanel, SeriesPanel, UniverseMask,
};
use crate::par;

/// Relative singular-value threshold below which a design is rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `w_k = mc_k`
    #[default]
    MarketCap,
    /// `w_k = sqrt(mc_k)`
    SqrtMarketCap,
}

impl WeightRule {
    pub fn weight(self, cap: f64) -> f64 {
        match self {
            WeightRule::MarketCap => cap,
            WeightRule::SqrtMarketCap => cap.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub weighting: WeightRule,
    /// Factor blocks that get a cap-weighted sum-to-zero constraint.
    pub constrained_blocks: Vec<FactorKind>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            weighting: WeightRule::MarketCap,
            constrained_blocks: vec![FactorKind::Country, FactorKind::Industry],
        }
    }
}

impl FitConfig {
    pub fn unconstrained() -> Self {
        FitConfig {
            constrained_blocks: Vec::new(),
            ..FitConfig::default()
        }
    }
}

impl Serialize for FactorKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for FactorKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.as_str() {
            "market" => Ok(FactorKind::Market),
            "style" => Ok(FactorKind::Style),
            "country" => Ok(FactorKind::Country),
            "industry" => Ok(FactorKind::Industry),
            _ => Err(serde::de::Error::custom(format!("unknown factor kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossSectionFit {
    pub factor_returns: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// One row per constrained block: `sum_k mc_k x_{k,f}` on the block's
/// columns, zero elsewhere. Blocks without exposure are dropped.
pub fn constraint_matrix(loadings: &DMatrix<f64>, caps: &[f64], factors: &[Factor], config: &FitConfig) -> DMatrix<f64> {
    let l = factors.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for kind in &config.constrained_blocks {
        let mut row = vec![0.0; l];
        for (f, factor) in factors.iter().enumerate() {
            if factor.kind == *kind {
                row[f] = (0..loadings.nrows()).map(|k| caps[k] * loadings[(k, f)]).sum();
            }
        }
        if row.iter().any(|v| *v != 0.0) {
            rows.push(row);
        }
    }
    DMatrix::from_fn(rows.len(), l, |i, j| rows[i][j])
}

/// Orthonormal basis of the null space of `c` (columns), after checking that
/// `c` has full row rank.
fn null_space(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = c.ncols();
    let m = c.nrows();
    if m == 0 {
        return Ok(DMatrix::identity(l, l));
    }
    let mut normalized = c.clone();
    for mut row in normalized.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row /= norm;
        }
    }
    let sv = normalized.clone().svd(false, false).singular_values;
    let smax = sv.max();
    let rank = sv.iter().filter(|s| **s > RANK_TOL * smax.max(1.0)).count();
    if rank < m {
        return Err(Error::RankDeficientConstraints { rank, rows: m });
    }
    let gram = normalized.transpose() * &normalized;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let keep = &order[..l - m];
    Ok(DMatrix::from_fn(l, keep.len(), |i, j| eig.eigenvectors[(i, keep[j])]))
}

/// Constrained weighted least squares: minimise `sum_k w_k (y_k - x_k' f)^2`
/// subject to `constraints * f = 0`.
pub fn solve_constrained_wls(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    constraints: &DMatrix<f64>,
    factors: &[Factor],
) -> Result<DVector<f64>> {
    let (n, l) = design.shape();
    if y.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "cross-section rows",
            expected: n,
            actual: y.len().min(weights.len()),
        });
    }
    if factors.len() != l || constraints.ncols() != l {
        return Err(Error::DimensionMismatch {
            context: "cross-section factors",
            expected: l,
            actual: factors.len(),
        });
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Invalid(format!("regression weight {w} is not positive")));
    }
    let basis = null_space(constraints)?;
    let free = basis.ncols();
    if n < free {
        return Err(Error::Underdetermined {
            companies: n,
            required: free,
        });
    }
    let sw: Vec<f64> = weights.iter().map(|w| w.sqrt()).collect();
    let mut a = design * &basis;
    for (k, s) in sw.iter().enumerate() {
        a.row_mut(k).scale_mut(*s);
    }
    let b = DVector::from_iterator(n, y.iter().zip(&sw).map(|(y, s)| y * s));
    let svd = a.svd(true, true);
    let u = svd.u.as_ref().expect("requested");
    let vt = svd.v_t.as_ref().expect("requested");
    let sv = &svd.singular_values;
    let smax = sv.max();
    let (imin, smin) = sv
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, s)| (i, *s))
        .unwrap_or((0, 0.0));
    if free > 0 && (smax == 0.0 || smin <= RANK_TOL * smax) {
        let direction = &basis * vt.row(imin).transpose();
        let j = direction.iamax();
        return Err(Error::SingularFit {
            block: factors[j].kind.to_string(),
            factor: factors[j].name.clone(),
        });
    }
    let mut g = DVector::zeros(free);
    for i in 0..sv.len() {
        let coef = u.column(i).dot(&b) / sv[i];
        g += vt.row(i).transpose() * coef;
    }
    Ok(basis * g)
}

/// Fits one day's cross-section. `loadings` is companies × factors, `caps`
/// are market caps (weights follow `config.weighting`).
pub fn fit_cross_section(
    returns: &[f64],
    loadings: &DMatrix<f64>,
    caps: &[f64],
    factors: &[Factor],
    config: &FitConfig,
) -> Result<CrossSectionFit> {
    let weights: Vec<f64> = caps.iter().map(|c| config.weighting.weight(*c)).collect();
    let constraints = constraint_matrix(loadings, caps, factors, config);
    let f = solve_constrained_wls(loadings, returns, &weights, &constraints, factors)?;
    let fitted = loadings * &f;
    let residuals = DVector::from_iterator(returns.len(), returns.iter().zip(fitted.iter()).map(|(r, x)| r - x));
    Ok(CrossSectionFit {
        factor_returns: f,
        residuals,
    })
}

/// Factors × days; days that could not be fitted hold 0.
#[derive(Debug, Clone)]
pub struct FactorReturns {
    pub factors: Vec<Factor>,
    pub values: SeriesPanel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DayFit {
    Fitted { companies: usize },
    Skipped(String),
}

#[derive(Debug, Clone)]
pub struct PanelFit {
    pub factor_returns: FactorReturns,
    pub residuals: ResidualPanel,
    pub days: Vec<DayFit>,
}

impl PanelFit {
    pub fn fitted_days(&self) -> usize {
        self.days.iter().filter(|d| matches!(d, DayFit::Fitted { .. })).count()
    }
}

type DayOutput = std::result::Result<(Vec<(usize, f64)>, Vec<(usize, f64)>), String>;

fn fit_day(
    t: usize,
    returns: &ReturnPanel,
    loadings: &LoadingPanel,
    mcaps: &MarketCapSeries,
    mask: &UniverseMask,
    config: &FitConfig,
) -> DayOutput {
    let month = returns.calendar().month_of(t);
    let (Some(lm), Some(cm), Some(mm)) = (loadings.month_pos(month), mcaps.month_pos(month), mask.month_pos(month)) else {
        return Err(format!("no loadings for {month}"));
    };
    let mut rows = Vec::new();
    for k in 0..returns.n_series() {
        if !mask.is_eligible(k, mm) {
            continue;
        }
        let (Some(r), Some(cap)) = (returns.get(k, t), mcaps.get(k, cm)) else { continue };
        if cap <= 0.0 || loadings.row(k, lm).iter().any(|v| v.is_nan()) {
            continue;
        }
        rows.push((k, r, cap));
    }
    if rows.is_empty() {
        return Err("no eligible companies".into());
    }
    let active: Vec<usize> = (0..loadings.n_factors())
        .filter(|&f| rows.iter().any(|&(k, _, _)| loadings.row(k, lm)[f] != 0.0))
        .collect();
    let design = DMatrix::from_fn(rows.len(), active.len(), |i, j| loadings.row(rows[i].0, lm)[active[j]]);
    let y: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let caps: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let factors: Vec<Factor> = active.iter().map(|&f| loadings.factors()[f].clone()).collect();
    let fit = fit_cross_section(&y, &design, &caps, &factors, config).map_err(|e| e.to_string())?;
    Ok((
        active.iter().copied().zip(fit.factor_returns.iter().copied()).collect(),
        rows.iter().map(|r| r.0).zip(fit.residuals.iter().copied()).collect(),
    ))
}

/// Runs one cross-section per trading day. Unfittable days keep factor
/// returns of 0 and missing residuals.
pub fn fit_panel(
    returns: &ReturnPanel,
    loadings: &LoadingPanel,
    mcaps: &MarketCapSeries,
    mask: &UniverseMask,
    config: &FitConfig,
) -> PanelFit {
    for gap in style_centering_gaps(loadings, mcaps, mask, 1e-6) {
        log::warn!(
            "style loadings of {} are not cap-centred in {} (relative gap {:.3e})",
            gap.factor,
            gap.month,
            gap.relative_gap
        );
    }
    let cal = returns.calendar().clone();
    let outputs = par::map_range(cal.len(), |t| fit_day(t, returns, loadings, mcaps, mask, config));

    let factor_ids: Vec<String> = loadings.factors().iter().map(|f| f.name.clone()).collect();
    let mut fvalues = vec![0.0; factor_ids.len() * cal.len()];
    let mut residuals = SeriesPanel::missing(returns.ids().to_vec(), cal.clone());
    let mut days = Vec::with_capacity(cal.len());
    for (t, out) in outputs.into_iter().enumerate() {
        match out {
            Ok((fr, res)) => {
                for (f, v) in fr {
                    fvalues[f * cal.len() + t] = v;
                }
                days.push(DayFit::Fitted { companies: res.len() });
                for (k, e) in res {
                    residuals.set(k, t, Some(e));
                }
            }
            Err(reason) => {
                log::debug!("{}: factor returns set to 0 ({reason})", cal.day(t));
                days.push(DayFit::Skipped(reason));
            }
        }
    }
    PanelFit {
        factor_returns: FactorReturns {
            factors: loadings.factors().to_vec(),
            values: SeriesPanel::from_values(factor_ids, cal, fvalues).expect("dimensions"),
        },
        residuals,
        days,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenteringGap {
    pub month: MonthId,
    pub factor: String,
    pub relative_gap: f64,
}

/// Style factor months where `|sum_k mc_k x_k| / sum_k mc_k |x_k|` exceeds `tol`,
/// over eligible companies with a registered loading and cap.
pub fn style_centering_gaps(
    loadings: &LoadingPanel,
    mcaps: &MarketCapSeries,
    mask: &UniverseMask,
    tol: f64,
) -> Vec<CenteringGap> {
    let mut gaps = Vec::new();
    for f in loadings.indices_of(FactorKind::Style) {
        for (m, month) in loadings.months().iter().enumerate() {
            let (Some(cm), Some(mm)) = (mcaps.month_pos(*month), mask.month_pos(*month)) else { continue };
            let (mut signed, mut total) = (0.0, 0.0);
            for k in 0..loadings.companies().len() {
                if !mask.is_eligible(k, mm) {
                    continue;
                }
                if let (Some(x), Some(cap)) = (loadings.get(k, m, f), mcaps.get(k, cm)) {
                    signed += cap * x;
                    total += cap * x.abs();
                }
            }
            if total > 0.0 && signed.abs() / total > tol {
                gaps.push(CenteringGap {
                    month: *month,
                    factor: loadings.factors()[f].name.clone(),
                    relative_gap: signed.abs() / total,
                });
            }
        }
    }
    gaps
}

/// Per-company sample variance of residuals in the `q` months before
/// `end_month`; fewer than two observations give 0.
pub fn residual_variances(residuals: &ResidualPanel, end_month: MonthId, q: u32) -> Result<Vec<f64>> {
    let range = residuals.calendar().window(end_month, q)?;
    Ok((0..residuals.n_series())
        .map(|k| sample_variance(&residuals.observed(k, range.clone())).unwrap_or(0.0))
        .collect())
}

pub fn write_factor_returns<W: Write>(fr: &FactorReturns, out: W) -> Result<()> {
    write_series(&fr.values, out, ["factor", "date", "value"])
}

pub fn write_residuals<W: Write>(res: &ResidualPanel, out: W) -> Result<()> {
    write_series(res, out, ["company", "date", "value"])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::TradingCalendar;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn style(i: usize) -> Factor {
        Factor::new(FactorKind::Style, &format!("s{i}"))
    }

    #[test]
    fn intercept_only_fit_is_exact() {
        let c = 0.0123;
        let y = vec![c; 7];
        let x = DMatrix::from_element(7, 1, 1.0);
        let caps = [1.0, 5.0, 2.0, 9.0, 0.3, 4.0, 8.0];
        let fit = fit_cross_section(&y, &x, &caps, &[Factor::market()], &FitConfig::default()).unwrap();
        assert!((fit.factor_returns[0] - c).abs() < 1e-15);
        assert!(fit.residuals.iter().all(|e| e.abs() < 1e-15));
    }

    #[test]
    fn recovers_generating_factor_returns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, l) = (60, 5);
        let x = DMatrix::from_fn(n, l, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let f_true = DVector::from_vec(vec![0.01, -0.004, 0.002, 0.007, -0.001]);
        let y: Vec<f64> = (&x * &f_true).iter().copied().collect();
        let caps: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let factors: Vec<Factor> = std::iter::once(Factor::market()).chain((1..l).map(style)).collect();
        let fit = fit_cross_section(&y, &x, &caps, &factors, &FitConfig::default()).unwrap();
        for j in 0..l {
            assert!((fit.factor_returns[j] - f_true[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn duplicate_column_is_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 30;
        let col: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = DMatrix::from_fn(n, 3, |i, j| if j == 0 { 1.0 } else { col[i] });
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-0.01..0.01)).collect();
        let caps = vec![1.0; n];
        let factors = vec![Factor::market(), style(1), style(2)];
        let err = fit_cross_section(&y, &x, &caps, &factors, &FitConfig::default()).unwrap_err();
        match err {
            Error::SingularFit { block, .. } => assert_eq!(block, "style"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn country_collinearity_is_resolved_by_constraint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let factors = vec![
            Factor::market(),
            Factor::new(FactorKind::Country, "US"),
            Factor::new(FactorKind::Country, "DE"),
        ];
        let x = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => (i % 2 == 0) as u8 as f64,
            _ => (i % 2 == 1) as u8 as f64,
        });
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-0.02..0.02)).collect();
        let caps: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
        assert!(fit_cross_section(&y, &x, &caps, &factors, &FitConfig::unconstrained()).is_err());
        let config = FitConfig::default();
        let fit = fit_cross_section(&y, &x, &caps, &factors, &config).unwrap();
        let c = constraint_matrix(&x, &caps, &factors, &config);
        let violation = (&c * &fit.factor_returns)[0] / c.row(0).norm();
        assert!(violation.abs() < 1e-10);
        let fitted = &x * &fit.factor_returns;
        for k in 0..n {
            assert!((y[k] - fitted[k] - fit.residuals[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn scaling_weights_leaves_fit_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, l) = (50, 4);
        let x = DMatrix::from_fn(n, l, |_, j| if j == 0 { 1.0 } else { rng.random_range(-2.0..2.0) });
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-0.02..0.02)).collect();
        let caps: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..100.0)).collect();
        let scaled: Vec<f64> = caps.iter().map(|c| c * 1e6).collect();
        let factors: Vec<Factor> = std::iter::once(Factor::market()).chain((1..l).map(style)).collect();
        let a = fit_cross_section(&y, &x, &caps, &factors, &FitConfig::default()).unwrap();
        let b = fit_cross_section(&y, &x, &scaled, &factors, &FitConfig::default()).unwrap();
        for j in 0..l {
            assert!((a.factor_returns[j] - b.factor_returns[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_companies_is_underdetermined() {
        let x = DMatrix::from_fn(2, 3, |i, j| (i + j) as f64 + 1.0);
        let factors = vec![Factor::market(), style(1), style(2)];
        let err = fit_cross_section(&[0.1, 0.2], &x, &[1.0, 1.0], &factors, &FitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Underdetermined { companies: 2, required: 3 }));
    }

    #[test]
    fn residual_variance_of_symmetric_pair() {
        let cal = TradingCalendar::weekdays(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), 45);
        let mut res = SeriesPanel::missing(vec!["x".into(), "zero".into(), "gone".into()], cal);
        let a = 0.03;
        res.set(0, 0, Some(a));
        res.set(0, 5, Some(-a));
        for t in 0..20 {
            res.set(1, t, Some(0.0));
        }
        let v = residual_variances(&res, MonthId::new(2020, 2), 1).unwrap();
        assert!((v[0] - 2.0 * a * a).abs() < 1e-18);
        assert_eq!(v[1], 0.0);
        assert_eq!(v[2], 0.0);
    }
}

//! Pairwise-complete covariance estimation and the `D R D` decomposition.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::nearest::{min_eigenvalue, nearest_pd};
use crate::panel::SeriesPanel;
use crate::par;

/// Default tolerance for the positive-definiteness check and repair.
pub const PD_TOL: f64 = 1e-8;

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample variance with denominator `n - 1`; `None` below two observations.
pub fn sample_variance(v: &[f64]) -> Option<f64> {
    if v.len() < 2 {
        return None;
    }
    let m = mean(v);
    Some(v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64)
}

/// Covariance with its correlation / standard-deviation decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct CovEstimate {
    pub cov: DMatrix<f64>,
    pub corr: DMatrix<f64>,
    pub stdevs: DVector<f64>,
    /// Row-major `n × n`; false where fewer than two joint observations exist.
    pub estimable: Vec<bool>,
    pub repaired: bool,
}

impl CovEstimate {
    pub fn dim(&self) -> usize {
        self.stdevs.len()
    }

    pub fn is_estimable(&self, i: usize, j: usize) -> bool {
        self.estimable[i * self.dim() + j]
    }

    /// Restriction to the given positions (no repair applied).
    pub fn submatrix(&self, idx: &[usize]) -> CovEstimate {
        let p = idx.len();
        let n = self.dim();
        CovEstimate {
            cov: DMatrix::from_fn(p, p, |i, j| self.cov[(idx[i], idx[j])]),
            corr: DMatrix::from_fn(p, p, |i, j| self.corr[(idx[i], idx[j])]),
            stdevs: DVector::from_iterator(p, idx.iter().map(|&i| self.stdevs[i])),
            estimable: (0..p * p).map(|c| self.estimable[idx[c / p] * n + idx[c % p]]).collect(),
            repaired: self.repaired,
        }
    }

    /// Replaces the correlation matrix by its nearest correlation matrix when
    /// its smallest eigenvalue is below `-tol`, then recomposes `cov`.
    /// Series with zero standard deviation are left out of the repair.
    pub fn repair(mut self, tol: f64) -> Result<CovEstimate> {
        let (corr, repaired) = repair_correlation(&self.corr, self.stdevs.as_slice(), tol)?;
        if repaired {
            self.cov = recompose(&self.stdevs, &corr);
            self.corr = corr;
            self.repaired = true;
        }
        Ok(self)
    }
}

/// Cheap sufficient test for `min eigenvalue >= -tol`: a Cholesky
/// factorisation of `a + tol I`.
pub fn is_psd(a: &DMatrix<f64>, tol: f64) -> bool {
    let n = a.nrows();
    Cholesky::new(a + DMatrix::identity(n, n) * tol).is_some()
}

/// Nearest-correlation repair of the sub-block with positive standard
/// deviation. Returns the (possibly unchanged) matrix and whether it changed.
pub fn repair_correlation(corr: &DMatrix<f64>, stdevs: &[f64], tol: f64) -> Result<(DMatrix<f64>, bool)> {
    let active: Vec<usize> = (0..stdevs.len()).filter(|&i| stdevs[i] > 0.0).collect();
    if active.len() < 2 {
        return Ok((corr.clone(), false));
    }
    let p = active.len();
    let sub = DMatrix::from_fn(p, p, |i, j| corr[(active[i], active[j])]);
    if is_psd(&sub, tol) || min_eigenvalue(&sub) >= -tol {
        return Ok((corr.clone(), false));
    }
    let fixed = nearest_pd(&sub, true, tol)?;
    let mut out = corr.clone();
    for i in 0..p {
        for j in 0..p {
            out[(active[i], active[j])] = fixed.matrix[(i, j)];
        }
    }
    Ok((out, true))
}

/// Pairwise-complete sample covariance of the selected rows of `window`.
/// Each pair uses the days on which both series are observed, with that
/// overlap's own means and denominator `overlap - 1`. Pairs with fewer than
/// two common days are 0 and flagged not estimable.
pub fn pairwise_cov(window: &SeriesPanel, series: &[usize]) -> CovEstimate {
    let n = series.len();
    let rows: Vec<&[f64]> = series.iter().map(|&i| window.row(i)).collect();
    let upper: Vec<Vec<(f64, bool)>> = par::map_range(n, |i| {
        (i..n).map(|j| pair_cov(rows[i], rows[j])).collect()
    });
    let mut cov = DMatrix::zeros(n, n);
    let mut estimable = vec![false; n * n];
    for i in 0..n {
        for (d, &(c, ok)) in upper[i].iter().enumerate() {
            let j = i + d;
            cov[(i, j)] = c;
            cov[(j, i)] = c;
            estimable[i * n + j] = ok;
            estimable[j * n + i] = ok;
        }
    }
    let (stdevs, corr) = decompose(&cov).expect("pairwise variances are non-negative");
    CovEstimate {
        cov,
        corr,
        stdevs,
        estimable,
        repaired: false,
    }
}

fn pair_cov(a: &[f64], b: &[f64]) -> (f64, bool) {
    let (mut n, mut sa, mut sb) = (0usize, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        if !x.is_nan() && !y.is_nan() {
            n += 1;
            sa += x;
            sb += y;
        }
    }
    if n < 2 {
        return (0.0, false);
    }
    let (ma, mb) = (sa / n as f64, sb / n as f64);
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        if !x.is_nan() && !y.is_nan() {
            s += (x - ma) * (y - mb);
        }
    }
    (s / (n - 1) as f64, true)
}

/// `stdevs = sqrt(diag(cov))`, `corr_ij = cov_ij / (s_i s_j)` (0 when the
/// product is 0).
pub fn decompose(cov: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = cov.nrows();
    if cov.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "covariance matrix",
            expected: n,
            actual: cov.ncols(),
        });
    }
    for i in 0..n {
        if cov[(i, i)] < 0.0 || cov[(i, i)].is_nan() {
            return Err(Error::NegativeVariance {
                index: i,
                value: cov[(i, i)],
            });
        }
    }
    let s = DVector::from_fn(n, |i, _| cov[(i, i)].sqrt());
    let corr = DMatrix::from_fn(n, n, |i, j| {
        let d = s[i] * s[j];
        if d > 0.0 {
            cov[(i, j)] / d
        } else {
            0.0
        }
    });
    Ok((s, corr))
}

/// `diag(s) · corr · diag(s)`.
pub fn recompose(stdevs: &DVector<f64>, corr: &DMatrix<f64>) -> DMatrix<f64> {
    let n = stdevs.len();
    DMatrix::from_fn(n, n, |i, j| stdevs[i] * corr[(i, j)] * stdevs[j])
}

/// `w' A w`.
pub fn quadratic_form(a: &DMatrix<f64>, w: &[f64]) -> f64 {
    let n = w.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += a[(i, j)] * w[j];
        }
        total += w[i] * row;
    }
    total
}

/// Square root of a quadratic form, tolerating rounding-level negatives.
pub(crate) fn checked_sqrt(q: f64, scale: f64) -> Result<f64> {
    if q.is_nan() {
        return Err(Error::Internal("quadratic form is NaN".into()));
    }
    if q >= 0.0 {
        Ok(q.sqrt())
    } else if q >= -1e-12 * scale.max(f64::MIN_POSITIVE) {
        Ok(0.0)
    } else {
        Err(Error::Internal(format!("negative quadratic form {q:e} after repair")))
    }
}

/// `w' |A| w`, the rounding scale of a quadratic form.
pub(crate) fn abs_quadratic_form(a: &DMatrix<f64>, w: &[f64]) -> f64 {
    let n = w.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += (w[i] * a[(i, j)] * w[j]).abs();
        }
    }
    total
}

/// Writes a matrix as plain CSV (no header), for debugging.
pub fn write_matrix<W: std::io::Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calendar::TradingCalendar;
    use chrono::NaiveDate;

    fn panel(rows: &[&[f64]]) -> SeriesPanel {
        let cal = TradingCalendar::weekdays(NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(), rows[0].len());
        let ids = (0..rows.len()).map(|i| format!("s{i}")).collect();
        SeriesPanel::from_values(ids, cal, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn fully_observed_pair_is_textbook_covariance() {
        let a = [0.01, -0.02, 0.03, 0.0, 0.015];
        let b = [0.02, -0.01, 0.01, -0.005, 0.0];
        let est = pairwise_cov(&panel(&[&a, &b]), &[0, 1]);
        let (ma, mb) = (mean(&a), mean(&b));
        let c: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 4.0;
        assert!((est.cov[(0, 1)] - c).abs() < 1e-16);
        assert!((est.cov[(0, 0)] - sample_variance(&a).unwrap()).abs() < 1e-16);
        assert!(est.estimable.iter().all(|e| *e));
    }

    #[test]
    fn disjoint_series_are_not_estimable() {
        let nan = f64::NAN;
        let a = [0.01, -0.02, 0.03, nan, nan, nan];
        let b = [nan, nan, nan, 0.02, 0.01, -0.01];
        let est = pairwise_cov(&panel(&[&a, &b]), &[0, 1]);
        assert_eq!(est.cov[(0, 1)], 0.0);
        assert!(!est.is_estimable(0, 1));
        assert!(est.is_estimable(0, 0));
    }

    #[test]
    fn copy_has_unit_correlation() {
        let a = [0.01, -0.02, 0.03, 0.0, 0.015];
        let est = pairwise_cov(&panel(&[&a, &a]), &[0, 1]);
        assert!((est.corr[(0, 1)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn short_series_has_zero_variance() {
        let nan = f64::NAN;
        let est = pairwise_cov(&panel(&[&[0.1, nan, nan], &[0.1, 0.2, 0.3]]), &[0, 1]);
        assert_eq!(est.stdevs[0], 0.0);
        assert_eq!(est.corr[(0, 0)], 0.0);
        assert_eq!(est.corr[(1, 1)], 1.0);
    }

    #[test]
    fn decompose_examples() {
        let (s, r) = decompose(&DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 9.0])).unwrap();
        assert_eq!(s.as_slice(), &[2.0, 3.0]);
        assert_eq!(r, DMatrix::identity(2, 2));
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        assert_eq!(decompose(&c).unwrap().1, c);
        assert!(matches!(
            decompose(&DMatrix::from_row_slice(1, 1, &[-1.0])),
            Err(Error::NegativeVariance { index: 0, .. })
        ));
    }

    #[test]
    fn recompose_inverts_decompose() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.2, -0.4, 1.2, 9.0, 0.3, -0.4, 0.3, 0.25]);
        let (s, r) = decompose(&c).unwrap();
        let back = recompose(&s, &r);
        assert!((back - c).abs().max() < 1e-15);
    }

    #[test]
    fn inconsistent_pairwise_correlation_gets_repaired() {
        let nan = f64::NAN;
        // pairwise overlaps chosen so the implied correlations are mutually inconsistent
        let a = [1.0, 2.0, 3.0, 4.0, nan, nan, nan, nan, 1.0, 2.0];
        let b = [1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, nan, nan];
        let c = [nan, nan, nan, nan, 4.0, 3.0, 2.0, 1.0, 1.0, 2.0];
        let est = pairwise_cov(&panel(&[&a, &b, &c]), &[0, 1, 2]);
        assert!(min_eigenvalue(&est.corr) < -PD_TOL);
        let fixed = est.repair(PD_TOL).unwrap();
        assert!(fixed.repaired);
        assert!(min_eigenvalue(&fixed.corr) >= -PD_TOL);
        for i in 0..3 {
            assert!((fixed.corr[(i, i)] - 1.0).abs() < 1e-12);
        }
        let back = recompose(&fixed.stdevs, &fixed.corr);
        assert!((back - &fixed.cov).abs().max() < 1e-12);
    }
}

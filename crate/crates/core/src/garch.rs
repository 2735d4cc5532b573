//! Constant-mean GARCH(1,1) fitted by Gaussian quasi maximum likelihood.
//!
//! ```text
//! r_t       = mu + e_t
//! e_t       ~ N(0, s2_t)
//! s2_t      = omega + alpha * e_{t-1}^2 + beta * s2_{t-1}
//! ```
//!
//! The recursion starts from a pre-sample state where both `e^2` and `s2`
//! equal the sample variance of the series. The optimiser is BFGS over
//! `(mu, ln omega, logit(persistence / 0.999), logit(alpha share))`, so every
//! iterate satisfies `omega > 0`, `alpha, beta >= 0` and
//! `alpha + beta <= 0.999`.
//!
//! Any failure (short history, degenerate series, non-convergence) falls back
//! to the sample variance of the series with a status saying why.

use std::io::Write;

use chrono::NaiveDate;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calendar::MonthId;
use crate::cov::{mean, sample_variance};
use crate::error::{Error, Result};
use crate::panel::SeriesPanel;
use crate::par;

pub const MIN_OBSERVATIONS: usize = 100;
pub const MAX_PERSISTENCE: f64 = 0.999;
pub const GRADIENT_TOL: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 500;
/// Default estimation history before the test period.
pub const HISTORY_MONTHS: u32 = 36;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub mu: f64,
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GarchParams {
    pub fn persistence(&self) -> f64 {
        self.alpha + self.beta
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GarchStatus {
    Converged,
    FallbackShortHistory,
    FallbackNonconvergence,
    FallbackOther,
}

impl GarchStatus {
    pub fn is_fallback(self) -> bool {
        self != GarchStatus::Converged
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GarchStatus::Converged => "converged",
            GarchStatus::FallbackShortHistory => "fallback_short_history",
            GarchStatus::FallbackNonconvergence => "fallback_nonconvergence",
            GarchStatus::FallbackOther => "fallback_other",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GarchFit {
    /// `None` for fallback fits.
    pub params: Option<GarchParams>,
    /// Conditional variance on the last observed day, or the sample variance
    /// for fallback fits.
    pub latest_var: f64,
    pub status: GarchStatus,
    pub n_obs: usize,
    pub iterations: usize,
}

impl GarchFit {
    fn fallback(series: &[f64], status: GarchStatus, iterations: usize) -> Self {
        GarchFit {
            params: None,
            latest_var: sample_variance(series).unwrap_or(0.0),
            status,
            n_obs: series.len(),
            iterations,
        }
    }
}

/// Conditional variances `s2_0 .. s2_{n-1}` under `params`.
pub fn conditional_variances(params: &GarchParams, series: &[f64]) -> Vec<f64> {
    let presample = sample_variance(series).unwrap_or(0.0);
    let mut out = Vec::with_capacity(series.len());
    let (mut e2_prev, mut s2_prev) = (presample, presample);
    for &r in series {
        let s2 = params.omega + params.alpha * e2_prev + params.beta * s2_prev;
        out.push(s2);
        let e = r - params.mu;
        e2_prev = e * e;
        s2_prev = s2;
    }
    out
}

/// Gaussian log-likelihood of the series under `params`.
pub fn log_likelihood(params: &GarchParams, series: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    conditional_variances(params, series)
        .iter()
        .zip(series)
        .map(|(s2, r)| {
            let e = r - params.mu;
            -0.5 * (ln2pi + s2.ln() + e * e / s2)
        })
        .sum()
}

/// Draws `n` observations from a GARCH(1,1), starting at the unconditional
/// variance.
pub fn simulate<R: Rng + ?Sized>(params: &GarchParams, n: usize, rng: &mut R) -> Vec<f64> {
    let mut s2 = params.omega / (1.0 - params.persistence()).max(1e-12);
    let mut e_prev: f64 = 0.0;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            s2 = params.omega + params.alpha * e_prev * e_prev + params.beta * s2;
        }
        let z: f64 = rng.sample(StandardNormal);
        e_prev = s2.sqrt() * z;
        out.push(params.mu + e_prev);
    }
    out
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained coordinates `(mu, ln omega, a, b)`.
fn to_params(theta: &[f64]) -> GarchParams {
    let persistence = MAX_PERSISTENCE * logistic(theta[2]);
    let share = logistic(theta[3]);
    GarchParams {
        mu: theta[0],
        omega: theta[1].exp(),
        alpha: persistence * share,
        beta: persistence * (1.0 - share),
    }
}

fn to_theta(p: &GarchParams) -> [f64; 4] {
    let persistence = p.alpha + p.beta;
    [p.mu, p.omega.ln(), logit(persistence / MAX_PERSISTENCE), logit(p.alpha / persistence)]
}

/// Mean negative log-likelihood (without the `ln 2 pi` constant) and its
/// gradient with respect to `(mu, omega, alpha, beta)`.
fn nll_and_gradient(p: &GarchParams, x: &[f64], presample: f64) -> (f64, [f64; 4]) {
    let n = x.len() as f64;
    let (mut e2_prev, mut s2_prev, mut e_prev) = (presample, presample, 0.0);
    // d s2_t / d(mu, omega, alpha, beta)
    let mut ds_prev = [0.0; 4];
    let mut first = true;
    let mut f = 0.0;
    let mut g = [0.0; 4];
    for &r in x {
        let s2 = p.omega + p.alpha * e2_prev + p.beta * s2_prev;
        let ds = if first {
            [0.0, 1.0, presample, presample]
        } else {
            [
                -2.0 * p.alpha * e_prev + p.beta * ds_prev[0],
                1.0 + p.beta * ds_prev[1],
                e2_prev + p.beta * ds_prev[2],
                s2_prev + p.beta * ds_prev[3],
            ]
        };
        first = false;
        let e = r - p.mu;
        let e2 = e * e;
        f += 0.5 * (s2.ln() + e2 / s2);
        let dl_ds = 0.5 * (1.0 / s2 - e2 / (s2 * s2));
        for i in 0..4 {
            g[i] += dl_ds * ds[i];
        }
        g[0] -= e / s2;
        e_prev = e;
        e2_prev = e2;
        s2_prev = s2;
        ds_prev = ds;
    }
    (f / n, g.map(|v| v / n))
}

/// Objective and gradient in unconstrained coordinates.
fn objective(theta: &[f64], x: &[f64], presample: f64) -> (f64, Vec<f64>) {
    let p = to_params(theta);
    let (f, g) = nll_and_gradient(&p, x, presample);
    let sa = logistic(theta[2]);
    let share = logistic(theta[3]);
    let persistence = MAX_PERSISTENCE * sa;
    let out = vec![
        g[0],
        g[1] * p.omega,
        (g[2] * share + g[3] * (1.0 - share)) * persistence * (1.0 - sa),
        (g[2] - g[3]) * persistence * share * (1.0 - share),
    ];
    (f, out)
}

struct Minimum {
    x: Vec<f64>,
    f: f64,
    iterations: usize,
    converged: bool,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// BFGS with Armijo backtracking.
fn bfgs<F: Fn(&[f64]) -> (f64, Vec<f64>)>(f: F, x0: Vec<f64>, tol: f64) -> Minimum {
    let d = x0.len();
    let identity = |d: usize| {
        let mut h = vec![0.0; d * d];
        for i in 0..d {
            h[i * d + i] = 1.0;
        }
        h
    };
    let mut h = identity(d);
    let mut fresh = true;
    let mut x = x0;
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() {
        return Minimum {
            x,
            f: fx,
            iterations: 0,
            converged: false,
        };
    }
    for it in 0..MAX_ITERATIONS {
        if norm(&g) < tol {
            return Minimum {
                x,
                f: fx,
                iterations: it,
                converged: true,
            };
        }
        let mut p: Vec<f64> = (0..d).map(|i| -(0..d).map(|j| h[i * d + j] * g[j]).sum::<f64>()).collect();
        let mut slope = dot(&g, &p);
        if slope >= 0.0 {
            h = identity(d);
            fresh = true;
            p = g.iter().map(|v| -v).collect();
            slope = dot(&g, &p);
        }
        let longest = p.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut step = if longest > 5.0 { 5.0 / longest } else { 1.0 };
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + step * b).collect();
            let (fnew, gnew) = f(&xn);
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            if fresh {
                return Minimum {
                    x,
                    f: fx,
                    iterations: it,
                    converged: false,
                };
            }
            h = identity(d);
            fresh = true;
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-14 * norm(&s) * norm(&y) {
            let hy: Vec<f64> = (0..d).map(|i| (0..d).map(|j| h[i * d + j] * y[j]).sum()).collect();
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for i in 0..d {
                for j in 0..d {
                    h[i * d + j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
            fresh = false;
        }
        x = xn;
        fx = fnew;
        g = gnew;
    }
    let converged = norm(&g) < tol;
    Minimum {
        x,
        f: fx,
        iterations: MAX_ITERATIONS,
        converged,
    }
}

/// Candidate starting points (persistence, alpha share) with variance
/// targeting; the best-scoring one seeds BFGS.
const STARTS: [(f64, f64); 7] = [
    (0.02, 0.5),
    (0.5, 0.2),
    (0.9, 0.05),
    (0.9, 0.15),
    (0.97, 0.05),
    (0.97, 0.1),
    (0.99, 0.05),
];

fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

pub fn fit_garch(series: &[f64]) -> GarchFit {
    let n = series.len();
    if n < MIN_OBSERVATIONS {
        return GarchFit::fallback(series, GarchStatus::FallbackShortHistory, 0);
    }
    let var = match sample_variance(series) {
        Some(v) if v.is_finite() && v > f64::EPSILON * mean_square(series) => v,
        _ => return GarchFit::fallback(series, GarchStatus::FallbackOther, 0),
    };
    let sd = var.sqrt();
    let x: Vec<f64> = series.iter().map(|r| r / sd).collect();
    let presample = sample_variance(&x).unwrap_or(1.0);
    let xbar = mean(&x);

    let start = STARTS
        .iter()
        .map(|&(pers, share)| {
            to_theta(&GarchParams {
                mu: xbar,
                omega: presample * (1.0 - pers),
                alpha: pers * share,
                beta: pers * (1.0 - share),
            })
        })
        .map(|t| (objective(&t, &x, presample).0, t))
        .filter(|(f, _)| f.is_finite())
        .min_by(|a, b| a.0.total_cmp(&b.0));
    let Some((_, theta0)) = start else {
        return GarchFit::fallback(series, GarchStatus::FallbackOther, 0);
    };

    let min = bfgs(|t| objective(t, &x, presample), theta0.to_vec(), GRADIENT_TOL);
    if !min.converged {
        return GarchFit::fallback(series, GarchStatus::FallbackNonconvergence, min.iterations);
    }
    let scaled = to_params(&min.x);
    let mut params = GarchParams {
        mu: scaled.mu * sd,
        omega: scaled.omega * var,
        alpha: scaled.alpha,
        beta: scaled.beta,
    };
    // the constant-variance point is feasible but only reachable in the limit
    let m = mean(series);
    let naive = GarchParams {
        mu: m,
        omega: series.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / n as f64,
        alpha: 0.0,
        beta: 0.0,
    };
    if log_likelihood(&naive, series) > log_likelihood(&params, series) {
        params = naive;
    }
    if !min.f.is_finite() || !params.omega.is_finite() || params.omega <= 0.0 {
        return GarchFit::fallback(series, GarchStatus::FallbackOther, min.iterations);
    }
    let latest_var = *conditional_variances(&params, series).last().expect("n >= 100");
    if !(latest_var > 0.0 && latest_var.is_finite()) {
        return GarchFit::fallback(series, GarchStatus::FallbackOther, min.iterations);
    }
    GarchFit {
        params: Some(params),
        latest_var,
        status: GarchStatus::Converged,
        n_obs: n,
        iterations: min.iterations,
    }
}

/// Maximum-likelihood `(mu, omega)` with `alpha` and `beta` held fixed.
/// Returns `None` when the optimiser does not converge.
pub fn fit_mean_and_intercept(series: &[f64], alpha: f64, beta: f64) -> Option<GarchParams> {
    let var = sample_variance(series).filter(|v| *v > 0.0)?;
    let sd = var.sqrt();
    let x: Vec<f64> = series.iter().map(|r| r / sd).collect();
    let presample = sample_variance(&x)?;
    let eval = |t: &[f64]| {
        let p = GarchParams {
            mu: t[0],
            omega: t[1].exp(),
            alpha,
            beta,
        };
        let (f, g) = nll_and_gradient(&p, &x, presample);
        (f, vec![g[0], g[1] * p.omega])
    };
    let start = vec![mean(&x), (presample * (1.0 - alpha - beta).max(1e-3)).ln()];
    let min = bfgs(eval, start, 1e-10);
    min.converged.then(|| GarchParams {
        mu: min.x[0] * sd,
        omega: min.x[1].exp() * var,
        alpha,
        beta,
    })
}

/// GARCH standard deviations for a set of series at the start of a test
/// period. Each series is fitted on its observed values in the
/// `history_months` before `period_start` (truncated at the calendar start).
#[derive(Debug, Clone)]
pub struct GarchDiagonal {
    pub stdevs: Vec<f64>,
    pub fits: Vec<GarchFit>,
}

impl GarchDiagonal {
    pub fn statuses(&self) -> Vec<GarchStatus> {
        self.fits.iter().map(|f| f.status).collect()
    }

    /// GARCH stdevs where the fit converged, `naive[i]` elsewhere.
    pub fn with_fallback(&self, naive: &[f64]) -> Vec<f64> {
        self.fits
            .iter()
            .zip(&self.stdevs)
            .zip(naive)
            .map(|((f, g), n)| if f.status.is_fallback() { *n } else { *g })
            .collect()
    }
}

pub fn garch_stdev_diagonal(
    panel: &SeriesPanel,
    series: &[usize],
    period_start: MonthId,
    history_months: u32,
) -> GarchDiagonal {
    let range = panel.calendar().window_clamped(period_start, history_months);
    let fits = par::map_slice(series, |&i| fit_garch(&panel.observed(i, range.clone())));
    GarchDiagonal {
        stdevs: fits.iter().map(|f| f.latest_var.sqrt()).collect(),
        fits,
    }
}

/// One diagnostics row per fitted series.
#[derive(Debug, Clone)]
pub struct GarchRecord {
    pub series: String,
    pub period: NaiveDate,
    pub fit: GarchFit,
}

pub fn write_garch_fits<W: Write>(records: &[GarchRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "period", "mu", "omega", "alpha", "beta", "status"])?;
    for r in records {
        let fields: [String; 4] = match r.fit.params {
            Some(p) => [p.mu, p.omega, p.alpha, p.beta].map(|v| format!("{v:e}")),
            None => Default::default(),
        };
        w.write_record([
            r.series.as_str(),
            &r.period.to_string(),
            &fields[0],
            &fields[1],
            &fields[2],
            &fields[3],
            r.fit.status.as_str(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const TRUE: GarchParams = GarchParams {
        mu: 0.0003,
        omega: 1e-6,
        alpha: 0.08,
        beta: 0.90,
    };

    #[test]
    fn short_history_falls_back_to_sample_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = simulate(&TRUE, 50, &mut rng);
        let fit = fit_garch(&s);
        assert_eq!(fit.status, GarchStatus::FallbackShortHistory);
        assert_eq!(fit.latest_var, sample_variance(&s).unwrap());
        assert!(fit.params.is_none());
    }

    #[test]
    fn constant_series_is_degenerate() {
        let fit = fit_garch(&[0.001; 300]);
        assert_eq!(fit.status, GarchStatus::FallbackOther);
        assert!(fit.latest_var < 1e-30);
        let fit = fit_garch(&[]);
        assert_eq!(fit.latest_var, 0.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = simulate(&TRUE, 300, &mut rng);
        let sd = sample_variance(&s).unwrap().sqrt();
        let x: Vec<f64> = s.iter().map(|r| r / sd).collect();
        let pre = sample_variance(&x).unwrap();
        let theta = [0.01, (0.05f64).ln(), 1.3, -1.1];
            let (_, g) = objective(&theta, &x, pre);
        for i in 0..4 {
            let h = 1e-6;
            let mut up = theta;
            let mut dn = theta;
            up[i] += h;
            dn[i] -= h;
            let fd = (objective(&up, &x, pre).0 - objective(&dn, &x, pre).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "coordinate {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn converged_fit_satisfies_constraints_and_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = simulate(&TRUE, 750, &mut rng);
        let fit = fit_garch(&s);
        assert_eq!(fit.status, GarchStatus::Converged);
        let p = fit.params.unwrap();
        assert!(p.omega > 0.0 && p.alpha >= 0.0 && p.beta >= 0.0 && p.persistence() < 1.0);
        let recomputed = *conditional_variances(&p, &s).last().unwrap();
        assert!((recomputed - fit.latest_var).abs() < 1e-10);
        let m = mean(&s);
        let naive = GarchParams {
            mu: m,
            omega: s.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / s.len() as f64,
            alpha: 0.0,
            beta: 0.0,
        };
        assert!(log_likelihood(&p, &s) >= log_likelihood(&naive, &s));
    }

    #[test]
    fn constant_variance_mle_is_population_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = simulate(&TRUE, 500, &mut rng);
        let p = fit_mean_and_intercept(&s, 0.0, 0.0).unwrap();
        let m = mean(&s);
        let pop = s.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / s.len() as f64;
        assert!((p.omega - pop).abs() / pop < 1e-8, "{} vs {}", p.omega, pop);
        assert!((p.mu - m).abs() < 1e-6 * pop.sqrt());
    }

    #[test]
    fn iid_series_latest_variance_is_close_to_truth() {
        let sigma2: f64 = 2.5e-4;
        let mut ok = 0;
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let s: Vec<f64> = (0..750)
                .map(|_| sigma2.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let fit = fit_garch(&s);
            if (fit.latest_var / sigma2 - 1.0).abs() < 0.25 {
                ok += 1;
            }
        }
        assert!(ok >= 9, "{ok}/10 within 25%");
    }

    #[test]
    fn diagnostics_csv_has_blank_params_for_fallbacks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records = vec![
            GarchRecord {
                series: "a".into(),
                period: NaiveDate::from_ymd_opt(2013, 2, 1).unwrap(),
                fit: fit_garch(&simulate(&TRUE, 400, &mut rng)),
            },
            GarchRecord {
                series: "b".into(),
                period: NaiveDate::from_ymd_opt(2013, 2, 1).unwrap(),
                fit: fit_garch(&[0.1, 0.2]),
            },
        ];
        let mut buf = Vec::new();
        write_garch_fits(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "series,period,mu,omega,alpha,beta,status");
        assert!(lines[1].ends_with(",converged"));
        assert_eq!(lines[2], "b,2013-02-01,,,,,fallback_short_history");
    }
}

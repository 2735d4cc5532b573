use std::fs::File;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Serialize;
use volrank::backtest::{
    run_backtest, write_estimate_table, write_mean_tau, write_tau_series, BacktestInputs, BacktestOutput,
    MeanTau, PortfolioSource,
};
use volrank::calendar::MonthId;
use volrank::factor::{fit_panel, style_centering_gaps, PanelFit};
use volrank::forecast::{estimate_direct, estimate_factor, Approach, SchemeId};
use volrank::garch::write_garch_fits;
use volrank::io::{calendar_from_returns, create, load_panels};
use volrank::panel::{FactorKind, LoadingPanel, MarketCapSeries, ReturnPanel};
use volrank::portfolio::{
    build_universe_of_portfolios, check_invariants, read_portfolios, write_portfolios, Portfolio, PortfolioRules,
};
use volrank::preprocess::{apply_preprocessing, Preprocessed};
use volrank::region::RegionMap;
use volrank::synth::{generate, write_universe};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Input panels and optional fixed portfolios.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub returns: ReturnPanel,
    pub loadings: LoadingPanel,
    pub mcaps: MarketCapSeries,
    pub regions: RegionMap,
    pub fixed: Option<Vec<(NaiveDate, Portfolio)>>,
}

fn open(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn label(path: &Path) -> String {
    path.display().to_string()
}

fn read_regions(dir: &Path) -> CliResult<RegionMap> {
    let path = dir.join("regions.csv");
    if path.exists() {
        Ok(RegionMap::read_csv(open(&path)?, &label(&path))?)
    } else {
        Ok(RegionMap::iso_default())
    }
}

fn read_dir_panels(dir: &Path) -> CliResult<(ReturnPanel, LoadingPanel, MarketCapSeries, RegionMap)> {
    let returns = dir.join("returns.csv");
    let calendar = calendar_from_returns(&returns)?;
    let panels = load_panels(&returns, &dir.join("loadings.csv"), &dir.join("mcaps.csv"), &calendar)?;
    Ok((panels.returns, panels.loadings, panels.mcaps, read_regions(dir)?))
}

pub fn load_dataset(config: &RunConfig) -> CliResult<Dataset> {
    let (returns, loadings, mcaps, regions) = match (&config.data.dir, config.synth()) {
        (Some(dir), _) => read_dir_panels(dir)?,
        (None, Some(synth)) => {
            let u = generate(&synth)?;
            (u.returns, u.loadings, u.mcaps, u.regions)
        }
        (None, None) => return Err(CliError::Config("[data] needs dir or synth".into())),
    };
    let fixed = match &config.data.portfolios {
        Some(path) => Some(read_portfolios(open(path)?, &label(path), returns.ids())?),
        None => None,
    };
    Ok(Dataset {
        returns,
        loadings,
        mcaps,
        regions,
        fixed,
    })
}

fn prepare(data: &Dataset, config: &RunConfig) -> (Preprocessed, PanelFit) {
    let pre = apply_preprocessing(&data.loadings, &data.mcaps, &data.returns);
    let fit = fit_panel(&data.returns, &pre.loadings, &pre.mcaps, &pre.mask, &config.model.fit_config());
    (pre, fit)
}

/// Runs `f` on a pool of `workers` threads, or the global pool.
fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> CliResult<T> {
    #[cfg(feature = "parallel")]
    if let Some(n) = workers {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
        return Ok(pool.install(f));
    }
    #[cfg(not(feature = "parallel"))]
    let _ = workers;
    Ok(f())
}

/// Writes a synthetic universe to `config.out`.
pub fn cmd_synth(config: &RunConfig) -> CliResult<PathBuf> {
    let synth = config
        .synth()
        .ok_or_else(|| CliError::Config("synth needs a [data.synth] table".into()))?;
    let universe = generate(&synth)?;
    write_universe(&universe, &config.out)?;
    log::info!(
        "wrote {} companies x {} days to {}",
        universe.returns.n_series(),
        universe.returns.n_days(),
        config.out.display()
    );
    Ok(config.out.clone())
}

#[derive(Debug, Clone, Serialize)]
pub struct SubsetSummary {
    pub slug: String,
    /// Portfolios in the subset, summed over periods.
    pub portfolios: usize,
    pub means: Vec<MeanTau>,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, Serialize)]
pub struct BacktestSummary {
    pub periods: usize,
    pub first_period: String,
    pub last_period: String,
    pub schemes: Vec<String>,
    pub portfolios: usize,
    pub portfolios_per_period: Vec<usize>,
    pub skipped: usize,
    pub fitted_days: usize,
    pub total_days: usize,
    pub garch_fits: usize,
    pub garch_fallbacks: usize,
    pub subsets: Vec<SubsetSummary>,
}

fn summarize(output: &BacktestOutput, config: &RunConfig, fit: &PanelFit) -> CliResult<BacktestSummary> {
    let schedule = config.schedule.build()?;
    let periods = schedule.periods();
    let garch = output.periods.iter().flat_map(|p| &p.garch);
    let subsets = config
        .subsets()
        .iter()
        .map(|s| SubsetSummary {
            slug: s.slug.clone(),
            portfolios: output
                .periods
                .iter()
                .map(|p| p.portfolios.iter().filter(|x| s.contains(x)).count())
                .sum(),
            means: output.report.means.iter().filter(|m| m.subset == s.slug).cloned().collect(),
        })
        .collect();
    Ok(BacktestSummary {
        periods: periods.len(),
        first_period: periods.first().map(|p| p.start.to_string()).unwrap_or_default(),
        last_period: periods.last().map(|p| p.start.to_string()).unwrap_or_default(),
        schemes: config.schemes.schemes()?.iter().map(|s| s.to_string()).collect(),
        portfolios: output.portfolio_count(),
        portfolios_per_period: output.periods.iter().map(|p| p.portfolios.len()).collect(),
        skipped: output.periods.iter().map(|p| p.skipped.len()).sum(),
        fitted_days: fit.fitted_days(),
        total_days: fit.days.len(),
        garch_fits: garch.clone().count(),
        garch_fallbacks: garch.filter(|r| r.fit.status.is_fallback()).count(),
        subsets,
    })
}

/// Runs the backtest and writes `mean_tau_<subset>.csv`, `summary.json`,
/// `estimates.csv`, `portfolios.csv`, `garch_fits.csv` and, with
/// `plot_data`, `tau_series_<subset>.csv` into `config.out`.
pub fn cmd_backtest(config: &RunConfig) -> CliResult<BacktestSummary> {
    let data = load_dataset(config)?;
    let bt = config.backtest_config()?;
    let schedule = config.schedule.build()?;
    let (pre, fit, output) = with_workers(config.workers, || -> CliResult<_> {
        let (pre, fit) = prepare(&data, config);
        let inputs = BacktestInputs {
            returns: &data.returns,
            loadings: &pre.loadings,
            mcaps: &pre.mcaps,
            fit: &fit,
            regions: &data.regions,
        };
        let source = data.fixed.as_deref().map_or(PortfolioSource::Generate, PortfolioSource::Fixed);
        let output = run_backtest(&inputs, &bt, &schedule, source, &[])?;
        Ok((pre, fit, output))
    })??;
    drop(pre);

    let out = &config.out;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for subset in &bt.subsets {
        write_mean_tau(
            &output.report,
            &subset.slug,
            &bt.schemes,
            create(&out.join(format!("mean_tau_{}.csv", subset.slug)))?,
        )?;
        if config.plot_data {
            write_tau_series(
                &output.report,
                &subset.slug,
                create(&out.join(format!("tau_series_{}.csv", subset.slug)))?,
            )?;
        }
    }
    write_estimate_table(&output.periods, create(&out.join("estimates.csv"))?)?;
    let rows: Vec<(NaiveDate, &Portfolio)> = output
        .periods
        .iter()
        .flat_map(|p| p.portfolios.iter().map(move |x| (p.period.start_date(), x)))
        .collect();
    write_portfolios(&rows, data.returns.ids(), create(&out.join("portfolios.csv"))?)?;
    let garch: Vec<_> = output.periods.iter().flat_map(|p| p.garch.iter().cloned()).collect();
    write_garch_fits(&garch, create(&out.join("garch_fits.csv"))?)?;

    let summary = summarize(&output, config, &fit)?;
    let mut json = serde_json::to_string_pretty(&summary)?;
    json.push('\n');
    let path = out.join("summary.json");
    std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(summary)
}

/// Estimates one portfolio for the period starting in `period` with the
/// given scheme, or with every configured scheme.
pub fn cmd_estimate(
    config: &RunConfig,
    portfolio_id: &str,
    period: MonthId,
    scheme: Option<SchemeId>,
) -> CliResult<Vec<(SchemeId, f64)>> {
    let data = load_dataset(config)?;
    let schemes = match scheme {
        Some(s) => vec![s],
        None => config.schemes.schemes()?,
    };
    let needs_fit = data.fixed.is_none() || schemes.iter().any(|s| s.approach == Approach::Factor);
    let prepared = needs_fit.then(|| prepare(&data, config));
    let portfolio = match (&data.fixed, &prepared) {
        (Some(fixed), _) => fixed
            .iter()
            .find(|(d, p)| MonthId::of(*d) == period && p.id == portfolio_id)
            .map(|(_, p)| p.clone()),
        (None, Some((pre, _))) => {
            build_universe_of_portfolios(&pre.loadings, &pre.mcaps, &data.regions, period, &config.portfolios, config.seed)?
                .portfolios
                .into_iter()
                .find(|p| p.id == portfolio_id)
        }
        (None, None) => None,
    }
    .ok_or_else(|| CliError::UnknownPortfolio {
        id: portfolio_id.to_string(),
        period: period.to_string(),
    })?;

    let history = config.model.garch_history_months;
    schemes
        .into_iter()
        .map(|s| {
            let v = match (s.approach, &prepared) {
                (Approach::Direct, _) => estimate_direct(&portfolio, &data.returns, s, period, history)?,
                (Approach::Factor, Some((pre, fit))) => {
                    estimate_factor(&portfolio, fit, &pre.loadings, s, period, history)?
                }
                (Approach::Factor, None) => unreachable!("factor schemes always prepare the fit"),
            };
            Ok((s, v))
        })
        .collect()
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub problems: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Parses every input in `dir` and checks schema-level invariants: calendar
/// coverage, positive caps, country factors known to the region map and, if
/// `portfolios.csv` is present, the portfolio weight rules.
pub fn cmd_validate(dir: &Path, rules: &PortfolioRules) -> CliResult<ValidationReport> {
    let mut report = ValidationReport::default();
    let (returns, loadings, mcaps, regions) = read_dir_panels(dir)?;
    let cal = returns.calendar();
    report.notes.push(format!(
        "returns: {} companies, {} days, {} missing cells",
        returns.n_series(),
        returns.n_days(),
        returns.missing_count()
    ));
    report.notes.push(format!(
        "loadings: {} factors over {} months",
        loadings.n_factors(),
        loadings.months().len()
    ));
    for month in cal.months() {
        if loadings.month_pos(month).is_none() {
            report.problems.push(format!("loadings.csv has no rows for {month}"));
        }
        if mcaps.month_pos(month).is_none() {
            report.problems.push(format!("mcaps.csv has no rows for {month}"));
        }
    }
    for m in 0..mcaps.months().len() {
        for (k, id) in returns.ids().iter().enumerate() {
            if mcaps.get(k, m).is_some_and(|c| !(c > 0.0)) {
                report
                    .problems
                    .push(format!("mcaps.csv: non-positive market cap for {id} in {}", mcaps.months()[m]));
            }
        }
    }
    for f in loadings.factors().iter().filter(|f| f.kind == FactorKind::Country) {
        if regions.get(f.label()).is_none() {
            report.problems.push(format!("country factor {} is missing from the region map", f.name));
        }
    }
    let pre = apply_preprocessing(&loadings, &mcaps, &returns);
    for gap in style_centering_gaps(&pre.loadings, &pre.mcaps, &pre.mask, 1e-6) {
        report.warnings.push(format!(
            "style {} is not cap-centred in {} (relative gap {:.3e})",
            gap.factor, gap.month, gap.relative_gap
        ));
    }

    let path = dir.join("portfolios.csv");
    if path.exists() {
        let portfolios = read_portfolios(open(&path)?, &label(&path), returns.ids())?;
        report.notes.push(format!("portfolios: {}", portfolios.len()));
        for (period, p) in &portfolios {
            if let Err(msg) = check_invariants(p, rules) {
                report.problems.push(format!("portfolio {msg} (period {period})"));
            }
        }
    }
    Ok(report)
}

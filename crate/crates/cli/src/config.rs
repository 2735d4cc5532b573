//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! out = "report"
//!
//! [data]
//! dir = "data"            # returns.csv, loadings.csv, mcaps.csv, regions.csv
//! # or: [data.synth] with any SynthConfig key
//!
//! [schemes]
//! qs = [1, 3, 6, 12]
//!
//! [schedule]
//! first_start = "2013-02"
//! count = 97
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.
//! The top-level `seed` drives every random draw, including synthetic data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use volrank::backtest::{BacktestConfig, PeriodSchedule, SubsetDef};
use volrank::calendar::MonthId;
use volrank::factor::{FitConfig, WeightRule};
use volrank::forecast::{Approach, SchemeId, VarianceModel};
use volrank::garch::HISTORY_MONTHS;
use volrank::portfolio::PortfolioRules;
use volrank::synth::SynthConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads for the backtest; all cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Also write per-period tau series.
    #[serde(default)]
    pub plot_data: bool,
    pub data: DataConfig,
    #[serde(default)]
    pub schemes: SchemeGrid,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub portfolios: PortfolioRules,
    /// Defaults to the built-in fourteen subsets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsets: Option<Vec<SubsetDef>>,
}

fn default_seed() -> u64 {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `returns.csv`, `loadings.csv`, `mcaps.csv` and
    /// optionally `regions.csv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
    /// Fixed `portfolio_id,period,company,weight` file used instead of
    /// generating portfolios.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portfolios: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeGrid {
    pub approaches: Vec<Approach>,
    pub variance_models: Vec<VarianceModel>,
    pub qs: Vec<u32>,
}

impl Default for SchemeGrid {
    fn default() -> Self {
        SchemeGrid {
            approaches: vec![Approach::Direct, Approach::Factor],
            variance_models: vec![VarianceModel::Naive, VarianceModel::Garch],
            qs: vec![1, 3, 6, 12],
        }
    }
}

impl SchemeGrid {
    pub fn schemes(&self) -> CliResult<Vec<SchemeId>> {
        let mut out = Vec::new();
        for &a in &self.approaches {
            for &m in &self.variance_models {
                for &q in &self.qs {
                    out.push(SchemeId::new(a, m, q)?);
                }
            }
        }
        if out.is_empty() {
            return Err(CliError::Config("at least one scheme is required".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// First month of the first test period, `YYYY-MM`.
    pub first_start: String,
    pub count: usize,
    /// Period width in months.
    pub width: u32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            first_start: "2013-02".into(),
            count: 97,
            width: 3,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> CliResult<PeriodSchedule> {
        let start: MonthId = self.first_start.parse()?;
        Ok(PeriodSchedule::monthly(start, self.count, self.width)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub weighting: WeightRule,
    pub garch_history_months: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            weighting: WeightRule::MarketCap,
            garch_history_months: HISTORY_MONTHS,
        }
    }
}

impl ModelConfig {
    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            weighting: self.weighting,
            ..FitConfig::default()
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.check()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        if let Some(d) = self.data.dir.as_mut() {
            fix(d);
        }
        if let Some(p) = self.data.portfolios.as_mut() {
            fix(p);
        }
    }

    fn check(&self) -> CliResult<()> {
        match (&self.data.dir, &self.data.synth) {
            (Some(_), Some(_)) => return Err(CliError::Config("[data] takes either dir or synth, not both".into())),
            (None, None) => return Err(CliError::Config("[data] needs dir or synth".into())),
            _ => {}
        }
        if self.workers == Some(0) {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        self.schemes.schemes()?;
        self.schedule.build()?;
        Ok(())
    }

    pub fn subsets(&self) -> Vec<SubsetDef> {
        self.subsets.clone().unwrap_or_else(SubsetDef::defaults)
    }

    /// Synthetic config with the top-level seed applied.
    pub fn synth(&self) -> Option<SynthConfig> {
        self.data.synth.clone().map(|s| SynthConfig { seed: self.seed, ..s })
    }

    pub fn backtest_config(&self) -> CliResult<BacktestConfig> {
        Ok(BacktestConfig {
            schemes: self.schemes.schemes()?,
            subsets: self.subsets(),
            rules: self.portfolios.clone(),
            garch_history_months: self.model.garch_history_months,
            seed: self.seed,
        })
    }
}

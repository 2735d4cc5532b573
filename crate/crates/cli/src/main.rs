use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use volrank::calendar::MonthId;
use volrank::forecast::SchemeId;
use volrank::portfolio::PortfolioRules;
use volrank_cli::{cmd_backtest, cmd_estimate, cmd_synth, cmd_validate, CliError, CliResult, RunConfig};

#[derive(Parser)]
#[command(name = "volrank", version, about = "Portfolio volatility forecasts ranked by Kendall's tau-b")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory, overriding `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed, overriding `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, overriding `workers` in the config.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            c.out = out.clone();
        }
        if let Some(seed) = self.seed {
            c.seed = seed;
        }
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(CliError::Config("--workers must be at least 1".into()));
            }
            c.workers = Some(w);
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic universe from `[data.synth]`.
    Synth(Common),
    /// Run the rolling backtest and write report files.
    Backtest {
        #[command(flatten)]
        common: Common,
        /// Also write per-period tau series.
        #[arg(long)]
        plot_data: bool,
    },
    /// Print the volatility estimate(s) of one portfolio.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        portfolio: String,
        /// First month of the test period, YYYY-MM.
        #[arg(long)]
        period: MonthId,
        /// e.g. direct_naive_q1; all configured schemes when absent.
        #[arg(long)]
        scheme: Option<SchemeId>,
    },
    /// Check the CSV inputs in a data directory.
    Validate {
        /// Directory with returns.csv, loadings.csv, mcaps.csv and optional
        /// regions.csv and portfolios.csv.
        data_dir: PathBuf,
        /// Take portfolio rules from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Synth(common) => {
            let dir = cmd_synth(&common.load()?)?;
            println!("wrote {}", dir.display());
        }
        Command::Backtest { common, plot_data } => {
            let mut config = common.load()?;
            config.plot_data |= plot_data;
            let s = cmd_backtest(&config)?;
            println!(
                "{} periods, {} portfolios, {} skipped; reports in {}",
                s.periods,
                s.portfolios,
                s.skipped,
                config.out.display()
            );
        }
        Command::Estimate {
            common,
            portfolio,
            period,
            scheme,
        } => {
            for (s, v) in cmd_estimate(&common.load()?, &portfolio, period, scheme)? {
                println!("{s}\t{v:.10e}");
            }
        }
        Command::Validate { data_dir, config } => {
            let rules = match config {
                Some(path) => RunConfig::load(&path)?.portfolios,
                None => PortfolioRules::default(),
            };
            let report = cmd_validate(&data_dir, &rules)?;
            for n in &report.notes {
                println!("ok: {n}");
            }
            for w in &report.warnings {
                println!("warning: {w}");
            }
            for p in &report.problems {
                println!("problem: {p}");
            }
            if !report.is_ok() {
                return Err(CliError::Invalid {
                    count: report.problems.len(),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calibratemix_cli::config::ExperimentConfig;
use calibratemix_cli::runner::{run_experiment, run_suite};
use calibratemix_cli::Result;
use clap::{Args, Parser, Subcommand};

/// Environment variable overriding the configured output directory.
const OUT_ENV: &str = "CALIBRATEMIX_OUT";

#[derive(Parser)]
#[command(
    name = "calibratemix",
    version,
    about = "Run semi-supervised calibration experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of one configuration.
    Run(Common),
    /// Train several arms on identical splits and compare them.
    Suite {
        #[command(flatten)]
        common: Common,
        /// Arms to compare, e.g. fixmatch,random-mixup,calibratemix.
        #[arg(long, value_delimiter = ',', required = true)]
        arms: Vec<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory; overrides $CALIBRATEMIX_OUT and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long, value_delimiter = ',')]
    seed_override: Option<Vec<u64>>,
    /// Validate the config, print the resolved settings and exit.
    #[arg(long)]
    dry_run: bool,
}

impl Common {
    fn load(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let mut cfg = ExperimentConfig::load(&self.config)?;
        if let Some(seeds) = &self.seed_override {
            cfg.seeds = seeds.clone();
        }
        let out = self
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| cfg.output_dir.clone());
        cfg.output_dir = out.clone();
        Ok((cfg, out))
    }
}

fn print_file(path: &Path) {
    if let Ok(text) = std::fs::read_to_string(path) {
        print!("{text}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, out) = common.load()?;
            if common.dry_run {
                print!("{}", cfg.dump());
                return Ok(true);
            }
            run_experiment(&cfg, &out)?;
            print_file(&out.join("summary.csv"));
            Ok(true)
        }
        Command::Suite { common, arms } => {
            let (cfg, out) = common.load()?;
            if common.dry_run {
                print!("{}", cfg.dump());
                println!("# arms: {}", arms.join(", "));
                return Ok(true);
            }
            let outcomes = run_suite(&cfg, &arms, &out)?;
            print_file(&out.join("comparison.csv"));
            let mut ok = true;
            for o in &outcomes {
                if let Err(failures) = &o.result {
                    ok = false;
                    eprintln!("arm {} failed: {}", o.arm, failures.join("; "));
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kfqn::config::ExperimentConfig;
use kfqn::experiment::{run_experiment, run_grid};
use kfqn::verify;

#[derive(Parser)]
#[command(
    name = "kfqn",
    version,
    about = "Kronecker-factored quasi-Newton training benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write per-epoch metrics.
    Run(Overrides),
    /// Train every (learning rate, damping) pair in the config's grid.
    Grid(Overrides),
    /// Run the numerical oracle suites and write verify_summary.csv.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "verify-out")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

impl Overrides {
    fn load(&self) -> kfqn::Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_path(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> kfqn::Result<bool> {
    match cli.command {
        Command::Run(o) => {
            let out = run_experiment(&o.load()?)?;
            println!("{}", out.csv_path.display());
            if let Some(why) = &out.divergence {
                eprintln!("diverged: {why}");
                return Ok(false);
            }
            Ok(true)
        }
        Command::Grid(o) => {
            let g = run_grid(&o.load()?)?;
            println!("{}", g.summary_path.display());
            if let Some(i) = g.best {
                let c = &g.cells[i];
                match c.damping {
                    Some(d) => println!("best: alpha={} damping={d}", c.alpha),
                    None => println!("best: alpha={}", c.alpha),
                }
            }
            Ok(g.best.is_some())
        }
        Command::Verify { seed, out } => {
            let reports = verify::run_all(seed)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("verify_summary.csv");
            std::fs::write(&path, verify::summary_csv(&reports))?;
            for r in &reports {
                println!(
                    "{:<30} {} ({} trials, max error {:.3e})",
                    r.name,
                    if r.passed() { "pass" } else { "FAIL" },
                    r.trials,
                    r.max_error
                );
            }
            println!("{}", path.display());
            Ok(reports.iter().all(|r| r.passed()))
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use polyhjb::cli::{self, RunConfig};

#[derive(Parser)]
#[command(name = "polyhjb", version, about = "Polynomial feedback synthesis for quadratic control systems")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Riccati and order-3 gains for a configuration.
    Gains {
        config: PathBuf,
        /// Overrides `output_dir` of the configuration.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop runs with previously computed gains.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        gains: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verification report; exits with status 2 if a gate fails.
    Verify {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints the metadata of an output directory.
    Info { dir: PathBuf },
}

fn load(config: &PathBuf, out: &Option<PathBuf>) -> polyhjb::Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.output_dir = o.display().to_string();
    }
    Ok(cfg)
}

fn run(args: Args) -> polyhjb::Result<ExitCode> {
    match args.command {
        Command::Gains { config, out } => {
            let cfg = load(&config, &out)?;
            let dir = cli::cmd_gains(&cfg)?;
            println!("gains written to {}", dir.display());
        }
        Command::Simulate { config, gains, out } => {
            let cfg = load(&config, &out)?;
            let s = cli::cmd_simulate(&cfg, &gains)?;
            println!("degree  J_running     J_tail        J_total       |y(T)|/|y(0)|");
            for r in &s.runs {
                println!(
                    "{:>6}  {:<12.6e}  {:<12.6e}  {:<12.6e}  {:.3e}",
                    r.degree, r.cost.j_running, r.cost.j_tail, r.cost.j_total, r.decay_ratio
                );
            }
        }
        Command::Verify { config, out } => {
            let cfg = load(&config, &out)?;
            let report = cli::cmd_verify(&cfg)?;
            for c in &report.checks {
                let status = match (&c.skipped, c.passed) {
                    (Some(_), _) => "SKIP",
                    (None, true) => "PASS",
                    (None, false) => "FAIL",
                };
                let value = c.value.map_or("-".to_string(), |v| format!("{v:.4e}"));
                println!("{status} {:<34} {value} {} {:e}", c.name, c.comparison, c.threshold);
            }
            if !report.all_passed {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Info { dir } => print!("{}", cli::cmd_info(&dir)?),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    if let Ok(t) = std::env::var("POLYHJB_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring POLYHJB_THREADS={t:?} (expected a positive integer)"),
        }
    }
    match run(Args::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

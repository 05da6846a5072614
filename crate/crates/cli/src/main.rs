use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sphereflow_cli::sweep::{parse_values, run_sweep, SweepParam};
use sphereflow_cli::{load, prepare, run::run_experiment, CliError};

#[derive(Parser)]
#[command(name = "sphereflow", version, about = "Ginzburg-Landau heat flow into spheres")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Threads for diagnostic batches (time stepping is always serial).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Rerun a config over a list of values of one parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// One of lambda, h, dt.
        #[arg(long)]
        param: String,
        /// Comma-separated values; fractions like 1/32 are accepted.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn execute(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Run { config, out, threads } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let prep = prepare(cfg)?;
            let outcome = run_experiment(&prep, &out, threads)?;
            Ok(serde_json::json!({
                "out_dir": outcome.out_dir,
                "files": outcome.manifest.files.len(),
                "summary": outcome.summary,
            }))
        }
        Command::Sweep { config, param, values, out, threads } => {
            let param: SweepParam = param.parse()?;
            let values = parse_values(&values)?;
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir.join(format!("sweep_{param}")));
            let outcome = run_sweep(&cfg, param, &values, &out, threads)?;
            Ok(serde_json::json!({ "out_dir": out, "rows": outcome.rows }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

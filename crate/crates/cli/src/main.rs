use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use planar_mrf_cli::commands::{benchmark, configure_threads, filter, upsample};
use planar_mrf_cli::error::{CliError, ExitKind};
use planar_mrf_cli::THREADS_ENV;

/// Planar MRF depth upsampling.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upsample sparse depth guided by an image.
    Upsample {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the planar-versus-baseline sweep on synthetic scenes.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
    },
    /// Drop depths whose variance is not below a threshold.
    Filter {
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        var: PathBuf,
        #[arg(long)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads(THREADS_ENV)?;
    match cli.command {
        Command::Upsample { config } => {
            let s = upsample(&config)?;
            println!("{}", serde_json::to_string(&s).expect("summary serializes"));
        }
        Command::Benchmark { config } => {
            let o = benchmark(&config)?;
            println!("rows={} failed={} csv={}", o.rows, o.failed, o.csv.display());
            if o.failed > 0 {
                return Err(CliError {
                    kind: ExitKind::Numerical,
                    path: Some(o.csv),
                    message: format!("{} of {} benchmark cells failed", o.failed, o.rows),
                });
            }
        }
        Command::Filter { depth, var, threshold, out } => {
            let c = filter(&depth, &var, threshold, &out)?;
            println!("kept={} filtered={}", c.kept, c.filtered);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", CliError::config(e.kind().to_string()).to_json_line());
            return ExitCode::from(ExitKind::Config.code() as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.kind.code() as u8)
        }
    }
}

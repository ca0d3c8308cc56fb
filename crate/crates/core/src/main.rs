use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use sdm_cpe::runner::{
    figure_recipe, run_sweep, write_outputs, OutputFormat, RunError, RunOptions, SweepSpec,
};

#[derive(Parser)]
#[command(
    name = "sdm-cpe",
    about = "Carrier-phase estimation sweeps for multichannel links"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep described by a TOML or JSON file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Override the bit-error target per BER estimate.
        #[arg(long)]
        error_target: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: OutputFormat,
        /// Write zero wall times so that reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Print (or save) the sweep of a named figure or table.
    Recipe {
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        error_target: Option<u64>,
    },
    Version,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8, RunError> {
    match cli.command {
        Command::Version => {
            println!("sdm-cpe {}", env!("CARGO_PKG_VERSION"));
            Ok(0)
        }
        Command::Recipe {
            name,
            out,
            error_target,
        } => {
            let mut spec = figure_recipe(&name)?;
            if let Some(e) = error_target {
                spec.error_target = e;
            }
            let text = spec.to_toml();
            match out {
                Some(path) => std::fs::write(path, text)?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Run {
            config,
            workers,
            error_target,
            out,
            format,
            no_timing,
        } => {
            let text = std::fs::read_to_string(&config).map_err(|e| {
                RunError::Config(sdm_cpe::runner::ConfigError {
                    problems: vec![format!("cannot read {}: {e}", config.display())],
                })
            })?;
            let mut spec = SweepSpec::parse(&text)?;
            if let Some(e) = error_target {
                spec.error_target = e;
                spec.validate()?;
            }
            let opts = RunOptions {
                workers,
                record_timing: !no_timing,
            };
            let results = run_sweep(&spec, &opts)?;
            for path in write_outputs(&results, &out, format)? {
                log::info!("wrote {}", path.display());
            }
            let mut failed = false;
            for (r, why) in results.failures() {
                log::error!(
                    "{} M={} cores={} oh={}: {why}",
                    r.strategy,
                    r.m,
                    r.cores,
                    r.oh_pilot_target
                );
                failed = true;
            }
            Ok(if failed { 3 } else { 0 })
        }
    }
}

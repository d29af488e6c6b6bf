use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hdro_cli::checks::{model_latent_grad, sign_flipped_latent_grad, VerifyLevel};
use hdro_cli::commands::{cmd_generate, cmd_report, cmd_run, cmd_tune, cmd_verify};
use hdro_cli::config::{ExperimentConfig, OUTPUT_ROOT_ENV};
use hdro_cli::Result;

/// Hierarchical distributionally robust training on grouped data.
#[derive(Parser)]
#[command(name = "hdro", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a scalar field, e.g. `--set solver.eta_theta=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    /// Flip the sign of the latent gradient.
    SignFlip,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test CSVs and a manifest.
    Generate(ConfigArgs),
    /// Train every method for every seed and write results.
    Run(ConfigArgs),
    /// Choose epsilon by quantile holdout.
    Tune(ConfigArgs),
    /// Numerical checks of gradients, oracles and convergence.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: VerifyLevel,
        /// Where verify.json goes; defaults to `$HDRO_OUTPUT_ROOT/verify` or `output/verify`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<Fault>,
    },
    /// Summarize the artifacts in an output directory.
    Report { dir: PathBuf },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => {
            let config = a.load()?;
            let manifest = cmd_generate(&config)?;
            for (name, f) in &manifest.files {
                println!("{name}: {} rows, groups {:?} -> {}", f.rows, f.group_sizes, f.path);
            }
        }
        Command::Run(a) => {
            let config = a.load()?;
            let report = cmd_run(&config)?;
            print!("{}", cmd_report(&config.output_path())?);
            log::info!("{} cells written", report.cells.len());
        }
        Command::Tune(a) => {
            let config = a.load()?;
            let r = cmd_tune(&config)?;
            println!(
                "chosen epsilon {} (minority group {})",
                r.chosen_epsilon, r.minority_group
            );
        }
        Command::Verify {
            level,
            out,
            inject_fault,
        } => {
            let dir = out.unwrap_or_else(|| match std::env::var_os(OUTPUT_ROOT_ENV) {
                Some(root) => PathBuf::from(root).join("verify"),
                None => PathBuf::from("output/verify"),
            });
            let grad = match inject_fault {
                Some(Fault::SignFlip) => sign_flipped_latent_grad,
                None => model_latent_grad,
            };
            let report = cmd_verify(level, grad, &dir)?;
            for c in &report.checks {
                println!(
                    "[{}] {:<28} {:>7.2}s  {}",
                    if c.passed { "pass" } else { "FAIL" },
                    c.name,
                    c.seconds,
                    c.detail
                );
            }
            report.ensure_passed()?;
        }
        Command::Report { dir } => print!("{}", cmd_report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

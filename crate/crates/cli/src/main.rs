use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use hexagan::eval::SweepAxis;
use hexagan_cli::commands;
use hexagan_cli::config::{RunConfig, KEYS};

#[derive(Parser)]
#[command(name = "hexagan", version, about = "Imputation, oversampling and semi-supervised classification for dirty tabular data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.epochs=50`.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Inject MCAR element and label missingness into a clean dataset.
    Corrupt(Common),
    /// Train on a dirty dataset and write checkpoints and per-epoch metrics.
    Train(Common),
    /// Fill the missing cells of a CSV with a trained model.
    Impute {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        model: PathBuf,
        /// Scaler written by `train`; defaults to the one beside the model.
        #[arg(long)]
        scaler: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Repeated k-fold evaluation against zero and mean imputation.
    Evaluate(Common),
    /// Evaluate once per value of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Evaluate the model with components switched off.
    Ablation(Common),
    /// List configuration keys.
    Keys,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corrupt(c) => {
            let s = commands::corrupt(&c.load()?)?;
            println!(
                "wrote {} ({} rows, {:.3} of cells observed, {} labelled)",
                s.data.display(),
                s.rows,
                s.observed_fraction,
                s.labeled
            );
        }
        Command::Train(c) => {
            let s = commands::train(&c.load()?)?;
            println!("trained {} epochs, model at {}", s.epochs, s.model.display());
            for (name, v) in &s.final_losses {
                println!("  {name:<10} {v:.5}");
            }
            if let Some(r) = s.probe_rmse {
                println!("  probe rmse {r:.4}");
            }
        }
        Command::Impute { common, model, scaler, input, output } => {
            let n = commands::impute(&common.load()?, &model, scaler.as_deref(), &input, &output)?;
            println!("imputed {n} rows into {}", output.display());
        }
        Command::Evaluate(c) => print!("{}", commands::render(&commands::evaluate(&c.load()?)?)),
        Command::Sweep { common, axis, values } => {
            print!("{}", commands::render(&commands::sweep(&common.load()?, axis, &values)?))
        }
        Command::Ablation(c) => print!("{}", commands::render(&commands::ablation(&c.load()?)?)),
        Command::Keys => {
            for (key, help) in KEYS {
                println!("{key:<32} {help}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(hexagan_cli::exit_code(&e) as u8)
        }
    }
}

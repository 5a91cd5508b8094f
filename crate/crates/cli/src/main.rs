use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ktied_vi::commands::{self, CompressArgs, DataSource, SplitName};
use ktied_vi::{CliError, CliResult};

/// Train, inspect, compress and evaluate k-tied variational MLPs.
#[derive(Parser)]
#[command(name = "ktied-vi", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write per-layer singular spectra of kernel means and sigmas as CSV.
    Analyze {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace every kernel sigma by its rank-k approximation.
    Compress {
        checkpoint: PathBuf,
        #[arg(long)]
        rank: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Entries below this are clamped after truncation.
        #[arg(long, default_value_t = 0.0)]
        floor: f64,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Print the five evaluation metrics as JSON.
    Evaluate {
        checkpoint: PathBuf,
        #[arg(long)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
}

#[derive(Args)]
struct DataArgs {
    /// Run config whose dataset section supplies the data.
    #[arg(long, visible_alias = "eval-data", conflicts_with_all = ["images", "labels"])]
    data_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "validation", requires = "data_config")]
    split: SplitArg,
    #[arg(long, requires = "labels")]
    images: Option<PathBuf>,
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Keep raw IDX pixel values instead of mapping them to [-1, 1].
    #[arg(long, requires = "images")]
    no_normalize: bool,
}

impl DataArgs {
    fn source(&self) -> Option<DataSource> {
        if let Some(path) = &self.data_config {
            let split = match self.split {
                SplitArg::Train => SplitName::Train,
                SplitArg::Validation => SplitName::Validation,
            };
            return Some(DataSource::RunConfig {
                path: path.clone(),
                split,
            });
        }
        match (&self.images, &self.labels) {
            (Some(images), Some(labels)) => Some(DataSource::Idx {
                images: images.clone(),
                labels: labels.clone(),
                normalize: !self.no_normalize,
            }),
            _ => None,
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train { config } => {
            let s = commands::train(&config)?;
            println!(
                "trained {} steps{}; artifacts in {}",
                s.steps,
                if s.stopped_early { " (stopped early)" } else { "" },
                s.output_dir.display()
            );
        }
        Command::Analyze { checkpoint, out } => commands::analyze(&checkpoint, &out)?,
        Command::Compress {
            checkpoint,
            rank,
            out,
            report,
            floor,
            samples,
            seed,
            data,
        } => {
            let json = commands::compress(&CompressArgs {
                checkpoint: &checkpoint,
                rank,
                out: &out,
                report: report.as_deref(),
                data: data.source(),
                samples,
                seed,
                floor,
            })?;
            println!("{json}");
        }
        Command::Evaluate {
            checkpoint,
            samples,
            seed,
            data,
        } => {
            let source = data
                .source()
                .ok_or_else(|| CliError::Usage("evaluate needs --data-config or --images/--labels".into()))?;
            println!("{}", commands::evaluate(&checkpoint, &source, samples, seed)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

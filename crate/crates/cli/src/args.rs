use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "momentprop", version, about = "Moment propagation versus MC dropout: training, comparison and experiments")]
pub struct Cli {
    /// Seed of every random choice; overrides the seed of a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for reports and models (default: runs/<command>-<timestamp>).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// TOML or JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a job config and save it as `.mpmdl`.
    Train {
        /// Job config (alternative to --config).
        job: Option<PathBuf>,
    },
    /// Compare MP moments with MC-dropout estimates on a dataset.
    Compare {
        #[command(flatten)]
        input: ModelInput,
        /// MC forward passes per example.
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
    },
    /// Run one of the experiment protocols.
    Experiment {
        #[arg(value_enum)]
        name: ExperimentName,
    },
    /// Time deterministic, MP and MC(T) forwards of one batch.
    Benchmark {
        #[command(flatten)]
        input: ModelInput,
        /// Comma-separated MC sample counts.
        #[arg(long, value_delimiter = ',', default_values_t = [1, 10, 30])]
        samples: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Write predictive distributions of a model for a dataset.
    Predict {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, value_enum, default_value_t = Mode::Mp)]
        mode: Mode,
        /// MC forward passes (mode mc only).
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
}

#[derive(Debug, Args)]
pub struct ModelInput {
    /// Model file written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// A CSV file (header row, numeric columns) or one of `toy[:N]`,
    /// `friedman1:N`, `images:N_PER_CLASS`, `cifar10:DIR`.
    #[arg(long)]
    pub data: String,
    /// Target column of a CSV file: a name, a 0-based index, or `none` when
    /// the file holds only features (default: last column).
    #[arg(long)]
    pub target: Option<String>,
    /// Use only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentName {
    Toy,
    Uci,
    Ood,
    Filter,
    AucVsT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Det,
    Mp,
    Mc,
}

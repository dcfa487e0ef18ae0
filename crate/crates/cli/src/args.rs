use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug, Clone)]
#[command(name = "rasr", version, about = "Fake news video detection with retrieval-augmented reasoning")]
pub struct Cli {
    /// Print one JSON document on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Where to write the run manifest. Defaults to `<first output>.manifest.json`,
    /// or `rasr-<command>.manifest.json` for commands without outputs.
    #[arg(long, global = true, value_name = "PATH")]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full feature sizes (768/768/128).
    Paper,
    /// Small dimensions matching `rasr synth` corpora.
    Desk,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Flat `key = value` config file applied on top of the preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = Preset::Paper)]
    pub preset: Preset,

    /// Override one config key after the file, e.g. `--set epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    All,
    Train,
    Val,
    Test,
}

#[derive(Args, Debug, Clone)]
pub struct CheckpointArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,

    #[arg(long, value_name = "PATH")]
    pub corpus: PathBuf,

    /// Runtime override (backends, concurrency, audit log); shape keys are refused.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Check a feature file against the corpus contract.
    Validate {
        corpus: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0.9)]
        separability: f64,
        #[arg(long, default_value_t = 0.7)]
        leak: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.25)]
        fake_ratio: f64,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
    },
    /// Train on the stratified split and save a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Epoch history as JSON lines. Defaults to `<out>.history.jsonl`.
        #[arg(long, value_name = "PATH")]
        history: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_enum, default_value_t = SplitChoice::All)]
        split: SplitChoice,
    },
    /// Leave-one-domain-out run.
    Lodo {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long, value_name = "DOMAIN")]
        target: String,
        /// Also save the trained checkpoint.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Train and test one variant, or `all` for the full table.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        #[arg(long)]
        variant: String,
    },
    /// Metrics of a checkpoint as retrieved context is replaced by random entries.
    Robustness {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.5")]
        ratios: Vec<f64>,
        /// Noise seed. Defaults to the checkpoint's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = SplitChoice::All)]
        split: SplitChoice,
    },
    /// One training run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        corpus: PathBuf,
        /// One of k, d_s, tau, lambda.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Dump the retrieved context of one record.
    Retrieve {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        id: String,
    },
    /// Dump prompts, reports and confidences for one record.
    Report {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        #[arg(long)]
        id: String,
    },
    /// Re-run the command recorded in a manifest and compare output checksums.
    Replay {
        #[arg(value_name = "MANIFEST")]
        recorded: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Validate { .. } => "validate",
            Command::Synth { .. } => "synth",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Lodo { .. } => "lodo",
            Command::Ablate { .. } => "ablate",
            Command::Robustness { .. } => "robustness",
            Command::Sweep { .. } => "sweep",
            Command::Retrieve { .. } => "retrieve",
            Command::Report { .. } => "report",
            Command::Replay { .. } => "replay",
        }
    }
}

//! `erc`: translate, augment, train, predict, evaluate and gradcheck.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "erc", version, about = "Emotion recognition in code-mixed conversations")]
pub struct Cli {
    /// Root seed; every random component derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Training configuration file (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads for translation and prediction.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Accept unknown keys in corpus records and fall back to the empty
    /// sentence for missing precomputed embeddings.
    #[arg(long, global = true)]
    pub lenient: bool,
    /// Single-precision arithmetic (not supported).
    #[arg(long, global = true)]
    pub float32: bool,
    /// Comma-separated label set, overriding corpus headers and defaults.
    #[arg(long, global = true, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fill text_en via transliteration then translation.
    Translate(TranslateArgs),
    /// Add synthetic paraphrase records.
    Augment(AugmentArgs),
    /// Train one model and write its bundle directory.
    Train(TrainArgs),
    /// Write an ensemble manifest from four bundle directories.
    Ensemble(EnsembleArgs),
    /// Predict every utterance of a corpus.
    Predict(PredictArgs),
    /// Score predictions against gold labels.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient check of the architectures.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    /// `identity` or `lexicon:<tsv>`.
    #[arg(long, default_value = "identity")]
    pub translit: String,
    /// `identity` or `lexicon:<tsv>`.
    #[arg(long, default_value = "identity")]
    pub translate: String,
    #[arg(long)]
    pub force: bool,
    /// Persist provider results here.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    /// `rules` or `enumerate:<n>`.
    #[arg(long, default_value = "rules")]
    pub paraphraser: String,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Bundle directory to write.
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Layer widths: `full` or `desk`.
    #[arg(long, default_value = "full")]
    pub preset: String,
    /// `hashed` or `precomputed:<jsonl>`.
    #[arg(long, default_value = "hashed")]
    pub encoder: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr_main: Option<f64>,
    #[arg(long)]
    pub lr_encoder: Option<f64>,
    #[arg(long)]
    pub target_train_accuracy: Option<f64>,
    /// Retrain on train and validation data for the best epoch count.
    #[arg(long)]
    pub train_on_all: bool,
    /// Sentence-only model: previous sentence and emotion are withheld.
    #[arg(long)]
    pub no_context: bool,
    /// Leave the next sentence out of the GRU input sequence.
    #[arg(long)]
    pub gru_exclude_next: bool,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    /// Exactly four bundle directories.
    #[arg(long = "member", required = true)]
    pub members: Vec<PathBuf>,
    /// Tie-break order of model kinds, comma-separated.
    #[arg(long, value_delimiter = ',')]
    pub priority: Option<Vec<String>>,
    #[arg(long = "out")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, conflicts_with = "ensemble", required_unless_present = "ensemble")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub ensemble: Option<PathBuf>,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long = "out")]
    pub output: PathBuf,
    /// Withhold previous sentence and emotion (simple history models).
    #[arg(long)]
    pub no_context: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// Row name in the table.
    #[arg(long, default_value = "model")]
    pub name: String,
    /// Also write the full report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// A model kind or `all`.
    #[arg(long, default_value = "all")]
    pub kind: String,
    #[arg(long, default_value = "desk")]
    pub preset: String,
    /// Entries sampled per parameter tensor.
    #[arg(long, default_value_t = 16)]
    pub entries: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("erc: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

pub(crate) type Result<T> = std::result::Result<T, CliError>;

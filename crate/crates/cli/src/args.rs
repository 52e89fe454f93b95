use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "desklm", version, about = "Desk-scale language model lab")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Seed for model initialization, adapters, dropout and shuffling.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for grid cells and downloads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Device power used to turn run time into energy.
    #[arg(long, global = true, value_name = "WATTS")]
    pub power_watts: Option<f64>,

    /// Floating-point width of all model arithmetic.
    #[arg(long, global = true, value_enum, default_value = "32")]
    pub precision: Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Every base weight is trained.
    Full,
    /// Base weights are frozen and low-rank adapters are trained.
    Lora,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download papers, extract TEI text and split the corpus.
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Build the word vocabulary.
    #[command(subcommand)]
    Tokenizer(TokenizerCmd),
    /// Train every optimizer and learning-rate combination and pick one.
    Gridsearch(GridArgs),
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Complete a prompt with beam search.
    Generate(GenerateArgs),
    /// Score models on a prompt set and write the comparison reports.
    Eval(EvalArgs),
    /// Rank tests between two models on the per-prompt report.
    Compare(CompareArgs),
    /// Rank-sum test between two reproducibility score files.
    CompareRepro(CompareReproArgs),
    /// Cosine similarity between outputs for base and reworded prompts.
    Repro(ReproArgs),
}

#[derive(Debug, Subcommand)]
pub enum IngestCmd {
    /// Fetch the PDF of every manifest record.
    Fetch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue partial files and skip records finished in a previous run.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Extract body text from a directory of TEI files into one corpus.
    Extract {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a corpus into train and test parts by whole documents.
    Split {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 0.9)]
        train_frac: f64,
        #[arg(long)]
        out_train: PathBuf,
        #[arg(long)]
        out_test: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum TokenizerCmd {
    /// Collect the most frequent words of a corpus plus the special tokens
    Build {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Vocabulary size cap, special tokens included.
        #[arg(long, default_value_t = 512)]
        max_size: usize,
    },
}

/// Inputs and overrides shared by `train` and `gridsearch`.
#[derive(Debug, Clone, Args)]
pub struct TrainingInputs {
    /// TOML file with `[model]`, `[train]`, `[lora]` and `[grid]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub eval_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub inputs: TrainingInputs,
    /// Comma-separated optimizer names.
    #[arg(long, value_delimiter = ',')]
    pub optimizers: Option<Vec<String>>,
    /// Comma-separated learning rates.
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Validation-error tolerance of the selection rule.
    #[arg(long)]
    pub delta: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub inputs: TrainingInputs,
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight-decay coefficient; 0 disables it.
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub save_steps: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerationArgs {
    /// Token cap, prompt included.
    #[arg(long, default_value_t = 200)]
    pub max_length: usize,
    #[arg(long, default_value_t = 2)]
    pub num_beams: usize,
    #[arg(long, default_value_t = 2)]
    pub no_repeat_ngram: usize,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to `vocab.json` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub prompt: String,
    #[command(flatten)]
    pub generation: GenerationArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    /// One label per model; defaults to each checkpoint's directory name.
    #[arg(long, value_delimiter = ',')]
    pub labels: Option<Vec<String>>,
    /// Shared vocabulary; defaults to `vocab.json` beside each checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Also generate from the reworded prompts.
    #[arg(long)]
    pub variants: bool,
    #[command(flatten)]
    pub generation: GenerationArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TestArg {
    Ranksum,
    Signedrank,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub individual: PathBuf,
    #[arg(long, value_enum)]
    pub test: Option<TestArg>,
    /// Shorthand for `--test signedrank`.
    #[arg(long, conflicts_with = "test")]
    pub paired: bool,
    #[arg(long, default_value = "perplexity=less,default=greater")]
    pub alternatives: String,
    /// Comma-separated metric columns.
    #[arg(long, value_delimiter = ',')]
    pub metrics: Option<Vec<String>>,
    /// Model tested as the first sample; defaults to the last model in the file.
    #[arg(long, requires = "y")]
    pub x: Option<String>,
    #[arg(long, requires = "x")]
    pub y: Option<String>,
    /// Machine-readable results; defaults to `rank_tests.csv` beside the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub exact_threshold: usize,
}

#[derive(Debug, Args)]
pub struct CompareReproArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "greater")]
    pub alternative: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub exact_threshold: usize,
}

#[derive(Debug, Args)]
pub struct ReproArgs {
    /// Generated texts for the base prompts, one per line.
    #[arg(long)]
    pub base: PathBuf,
    /// Generated texts for the reworded prompts, one per line.
    #[arg(long)]
    pub variant: PathBuf,
    #[arg(long)]
    pub embed_model: PathBuf,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Defaults to `<label>_reproducibility_scores.csv` beside the base file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Label used in the default file name.
    #[arg(long)]
    pub label: Option<String>,
}

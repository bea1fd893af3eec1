//! `car-lab`: build models, sample corpora, solve and train class-wise
//! rationalization games, and score the results. Every command writes its
//! artifacts plus a run manifest.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use car_core::{CarError, HKind, Variant};
use clap::{ArgGroup, Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "car-lab", version, about = "Class-wise adversarial rationalization lab")]
pub struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true, env = "CAR_LAB_SEED", default_value_t = 0)]
    pub seed: u64,

    /// Validate the configuration and print the manifest without writing files.
    #[arg(long, global = true)]
    pub dry_run: bool,

    /// Print a human-readable table instead of the manifest JSON.
    #[arg(long, global = true)]
    pub pretty: bool,

    /// Worker threads (seed sweeps and brute-force search).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a bag-of-words model with planted class words.
    MakeModel(MakeModelArgs),
    /// Sample a bag or planted-phrase corpus (JSON lines) from a model.
    SampleCorpus(SampleCorpusArgs),
    /// Solve the class-t game in closed form and export per-word curves.
    Solve(SolveArgs),
    /// Train generators and discriminator on a model or corpus.
    Train(TrainArgs),
    /// Score inferred rationales against a corpus.
    Eval(EvalArgs),
    /// Check trained or solved policies against the closed-form equilibrium.
    Verify(VerifyArgs),
    /// Check the admissibility conditions of an (h0, h1) pair.
    CheckH(CheckHArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MakeModelArgs {
    #[arg(long)]
    pub vocab: usize,
    /// Number of planted words per class, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub class_words: Vec<usize>,
    /// Occurrence of planted words in their own class, cycled over each class's words.
    #[arg(long, value_delimiter = ',', default_value = "0.8")]
    pub high: Vec<f64>,
    /// Occurrence of planted words in other classes.
    #[arg(long, default_value_t = 0.1)]
    pub low: f64,
    /// Occurrence of neutral words in every class.
    #[arg(long, default_value_t = 0.5)]
    pub neutral: f64,
    /// Class prior, comma separated; uniform by default.
    #[arg(long, value_delimiter = ',')]
    pub prior: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Bow,
    Sequence,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SampleCorpusArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub docs_per_class: usize,
    #[arg(long, value_enum, default_value_t = CorpusKind::Bow)]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 30)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 6)]
    pub phrase_len: usize,
    /// Let other classes' words appear in the background of sequences.
    #[arg(long)]
    pub mixed_background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Class whose factual rationale is solved for.
    #[arg(long = "class", default_value_t = 0)]
    pub class_t: usize,
    /// Budget on the expected rationale length.
    #[arg(long)]
    pub alpha: f64,
    #[arg(long, value_parser = parse_h, default_value = "linear")]
    pub h: HKind,
    /// Solution JSON.
    #[arg(long)]
    pub out: PathBuf,
    /// Curve CSV; defaults to the solution path with a `.curves.csv` suffix.
    #[arg(long)]
    pub curves: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
#[command(group(ArgGroup::new("data").required(true).args(["model", "corpus"])))]
pub struct TrainArgs {
    /// Model to sample fresh bag-of-words batches from.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Fixed corpus (JSON lines) to resample batches from.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Number of classes in the corpus; defaults to the largest label plus one.
    #[arg(long, requires = "corpus")]
    pub classes: Option<usize>,
    #[arg(long, value_parser = parse_variant, default_value = "bow")]
    pub variant: Variant,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Learning rate for both players.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_generator: Option<f64>,
    #[arg(long)]
    pub lr_discriminator: Option<f64>,
    /// Documents per role in every class step.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    /// Target fraction of selected positions.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Per-class targets, comma separated; overrides --alpha.
    #[arg(long, value_delimiter = ',')]
    pub class_alpha: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_h)]
    pub h: Option<HKind>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// Seed sweep, comma separated; each seed gets its own `seed-<s>` directory.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Feed each document's label to the generator of class --class.
    #[arg(long)]
    pub with_label: bool,
    /// Generator to evaluate in --with-label mode; defaults to each document's label.
    #[arg(long = "class", requires = "with_label")]
    pub class_t: Option<usize>,
    /// Model for degeneration scoring and class-word truth masks.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Exit with status 1 when F1 falls below this value.
    #[arg(long)]
    pub min_f1: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Trained parameters or a solution file.
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
    /// Class to check; trained parameters default to every class.
    #[arg(long = "class")]
    pub class_t: Option<usize>,
    /// Budget for the slack check; defaults to the solution's budget or the
    /// expected length of the eligible words.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CheckHArgs {
    #[arg(long, value_parser = parse_h, default_value = "log")]
    pub h: HKind,
    #[arg(long, default_value_t = 0.01)]
    pub grid_step: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_h(s: &str) -> Result<HKind, String> {
    s.parse().map_err(|e: CarError| e.to_string())
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: CarError| e.to_string())
}

/// A completed run whose checks did not pass.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return 1;
    }
    let io = err.chain().any(|cause| {
        cause.is::<std::io::Error>()
            || cause.is::<tempfile::PersistError>()
            || matches!(cause.downcast_ref::<CarError>(), Some(CarError::Io(_)))
    });
    if io {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

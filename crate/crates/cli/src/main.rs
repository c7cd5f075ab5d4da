use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod config;
mod evaluate;
mod plot;
mod run;

/// Polyphonic pitch tracking and note transcription.
#[derive(Parser)]
#[command(name = "pitchtrack", version)]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transcribe a WAV file with a trained model bundle.
    Transcribe(TranscribeArgs),
    /// Train the model bundle on a corpus directory.
    Train(TrainArgs),
    /// Score estimated notes against references.
    Evaluate(evaluate::EvaluateArgs),
    /// Render a synthetic training corpus.
    SynthDataset(SynthArgs),
    /// Render intermediate dumps as PNG images or CSV.
    Plot(plot::PlotArgs),
}

#[derive(Args)]
struct TranscribeArgs {
    /// Input WAV file (any sample rate; channels are averaged).
    audio: PathBuf,
    /// Model bundle directory.
    #[arg(short, long)]
    models: PathBuf,
    /// Output directory; files are named after the input.
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
    /// Also write a MIDI file.
    #[arg(long)]
    midi: bool,
    /// Write intermediate representations for `plot` into this directory.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `synth-dataset` (or laid out the same way).
    #[arg(short, long)]
    corpus: PathBuf,
    /// Output bundle directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Key/value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override `key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Worker threads for corpus processing.
    #[arg(long)]
    jobs: Option<usize>,
    /// Comma-separated stages to train, a prefix of N1..N6.
    #[arg(long)]
    stages: Option<String>,
    /// Training log (line-delimited JSON); defaults to `<out>/train_log.jsonl`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// Output corpus directory.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Number of base compositions.
    #[arg(long)]
    scores: Option<usize>,
    /// Augmented versions per composition.
    #[arg(long)]
    versions: Option<usize>,
}

/// Exit status classes: 1 runtime failure, 2 bad input, 3 bad model bundle.
#[derive(Debug)]
pub enum Failure {
    Runtime(String),
    Input(String),
    Bundle(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Runtime(_) => 1,
            Failure::Input(_) => 2,
            Failure::Bundle(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Runtime(m) | Failure::Input(m) | Failure::Bundle(m) => m,
        }
    }
}

impl From<pitchtrack::Error> for Failure {
    fn from(e: pitchtrack::Error) -> Self {
        use pitchtrack::Error as E;
        match e {
            E::MissingModel(_) | E::LayoutMismatch { .. } => Failure::Bundle(e.to_string()),
            E::InvalidArgument(_) | E::UnknownInstrument(_) | E::CorpusTooSmall(_) => Failure::Input(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Transcribe(a) => run::transcribe(&a),
        Command::Train(a) => run::train(&a),
        Command::Evaluate(a) => evaluate::run(&a),
        Command::SynthDataset(a) => run::synth_dataset(&a),
        Command::Plot(a) => plot::run(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::commands::Failure;
use crate::config::Config;

#[derive(Debug, Parser)]
#[command(name = "riskloom", version, about = "Early depression-risk detection toolkit")]
struct Cli {
    /// TOML (or .json) file with defaults for any subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Both)]
    format: Format,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Turn thread dumps into a labeled, anonymized training corpus.
    Ingest(IngestArgs),
    /// Per-label thread statistics of thread dumps.
    Stats(StatsArgs),
    /// Replay a corpus round by round against a scorer and record decisions.
    StreamRun(StreamRunArgs),
    /// Serve a corpus over stdin/stdout using the line protocol.
    StreamServe(StreamServeArgs),
    /// Decision and ranking metrics for a decision log.
    Eval(EvalArgs),
    /// Interview scripted personas and record estimated symptom scores.
    DialogueRun(DialogueRunArgs),
    /// Compare estimated symptom scores with ground truth.
    Assess(AssessArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Thread dump of positive threads (repeatable).
    #[arg(long)]
    pub positive: Vec<PathBuf>,
    /// Thread dump of negative threads (repeatable).
    #[arg(long)]
    pub negative: Vec<PathBuf>,
    /// Corpus JSONL of negative subjects to sample from.
    #[arg(long)]
    pub provided: Option<PathBuf>,
    /// Provided subjects to sample; defaults to the number of scraped threads.
    #[arg(long)]
    pub sample_n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated community names to scrub.
    #[arg(long, value_delimiter = ',')]
    pub communities: Option<Vec<String>>,
    /// Output corpus JSONL.
    #[arg(long)]
    pub out: PathBuf,
    /// Output manifest JSON; defaults to OUT with a .manifest.json suffix.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub positive: Vec<PathBuf>,
    #[arg(long)]
    pub negative: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerKind {
    Lexicon,
    Remote,
}

#[derive(Debug, Args)]
pub struct StreamRunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = ScorerKind::Lexicon)]
    pub scorer: ScorerKind,
    /// TSV term table; required for the lexicon scorer, used as fallback otherwise.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// Scoring service URL; defaults to RISKLOOM_SCORER_URL.
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub min_rounds: Option<u32>,
    #[arg(long)]
    pub consecutive_hits: Option<u32>,
    /// Output decision log JSONL.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StreamServeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Where to write the decision log once the run ends.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub log: PathBuf,
    /// JSONL with subject_id and label per line (a corpus file works).
    #[arg(long)]
    pub truth: PathBuf,
    /// Comma-separated writing counts for the ranking metrics.
    #[arg(long, value_delimiter = ',')]
    pub checkpoints: Option<Vec<u32>>,
    /// Row label in the table.
    #[arg(long, default_value = "run")]
    pub name: String,
}

#[derive(Debug, Args)]
pub struct DialogueRunArgs {
    #[arg(long)]
    pub strategy: riskloom_core::dialogue::StrategyKind,
    /// Persona JSON file or a directory of them (repeatable).
    #[arg(long, required = true)]
    pub persona_file: Vec<PathBuf>,
    /// Chat-completions URL, or "mock" for the offline agents; defaults to RISKLOOM_LLM_URL.
    #[arg(long)]
    pub gateway: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AssessArgs {
    /// Directory of prediction JSON files written by dialogue-run.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth persona file (one object, an array, or JSON lines).
    #[arg(long)]
    pub truth: PathBuf,
    /// Lower bounds of the mild, moderate and severe bands.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub cutoffs: Option<Vec<u32>>,
    #[arg(long, default_value = "run")]
    pub name: String,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let config = match &cli.config {
        Some(p) => Config::load(p).map_err(Failure::Invalid)?,
        None => Config::default(),
    };
    let out = commands::Output::new(cli.format);
    match cli.command {
        Command::Ingest(a) => commands::ingest(a, &config, &out),
        Command::Stats(a) => commands::stats(a, &out),
        Command::StreamRun(a) => commands::stream_run(a, &config, &out),
        Command::StreamServe(a) => commands::stream_serve(a),
        Command::Eval(a) => commands::eval(a, &config, &out),
        Command::DialogueRun(a) => commands::dialogue_run(a, &config, &out),
        Command::Assess(a) => commands::assess(a, &config, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

mod commands;
mod error;
mod gateway;
mod settings;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::CliError;
use crate::settings::Settings;

/// Example-guided knowledge generation and multiple-choice answering.
#[derive(Parser, Debug)]
#[command(name = "zebra", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Seed for every randomized step (hash encoder, training, mock fallback).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON file whose keys mirror the long flag names; flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Response cache directory (default: $ZEBRA_CACHE_DIR).
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Use the scripted mock gateway instead of a remote endpoint.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Rules for the mock gateway.
    #[arg(long, global = true)]
    pub mock_script: Option<PathBuf>,
    /// Maximum concurrent model requests.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Base URL of an OpenAI-compatible API (default: $ZEBRA_ENDPOINT).
    #[arg(long, global = true)]
    pub endpoint: Option<String>,
    /// Model name sent to the endpoint (default: $ZEBRA_MODEL).
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Environment variable holding the API key.
    #[arg(long, global = true)]
    pub api_key_env: Option<String>,
    /// Continue the trailing assistant cue instead of opening a new turn.
    #[arg(long, global = true)]
    pub assistant_prefill: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Knowledge-base files.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Embed knowledge-base passages.
    Embed(commands::EmbedArgs),
    /// Nearest knowledge-base entries for each query.
    Retrieve(commands::RetrieveArgs),
    /// Train a linear retrieval adapter.
    TrainRetriever(commands::TrainArgs),
    /// Answer every question of a dataset (gold labels optional).
    Answer(commands::AnswerArgs),
    /// Answer a labeled dataset and report accuracy.
    Evaluate(commands::EvaluateArgs),
    /// Zebra-mode accuracy for several k.
    SweepK(commands::SweepArgs),
}

#[derive(Subcommand, Debug)]
enum KbCommand {
    /// Check a JSONL knowledge-base or dataset file.
    Validate { path: PathBuf },
    /// Generate explanations for a labeled dataset.
    Build(commands::KbBuildArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.global.config.as_deref())?;
    let g = &cli.global;
    match cli.command {
        Command::Kb(KbCommand::Validate { path }) => commands::kb_validate(&path),
        Command::Kb(KbCommand::Build(a)) => commands::kb_build(g, &settings, a),
        Command::Embed(a) => commands::embed(g, &settings, a),
        Command::Retrieve(a) => commands::retrieve(g, &settings, a),
        Command::TrainRetriever(a) => commands::train_retriever(g, &settings, a),
        Command::Answer(a) => commands::answer(g, &settings, a),
        Command::Evaluate(a) => commands::evaluate(g, &settings, a),
        Command::SweepK(a) => commands::sweep_k(g, &settings, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

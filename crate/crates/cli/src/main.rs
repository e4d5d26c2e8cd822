//! `treecoder`: train tokenizers and tree models, evaluate, inspect tree
//! arithmetic and sample text.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use treecoder::RoutingMode;

#[derive(Parser)]
#[command(name = "treecoder", version, about = "Tree-structured decoder-only language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary.
    TokenizerTrain {
        /// Training text; several files are concatenated.
        #[arg(long, required = true, num_args = 1..)]
        corpus: Vec<PathBuf>,
        #[arg(long, default_value_t = 8000)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Never merge digits with anything.
        #[arg(long)]
        split_digits: bool,
    },
    /// Train a model from a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's routing mode.
        #[arg(long)]
        routing: Option<RoutingMode>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Perplexity and leaf histogram of a checkpoint on a text file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// Vocabulary file, when the checkpoint does not embed one.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Node counts, active fractions, path lengths and parameter counts.
    Inspect(commands::InspectArgs),
    /// Sample a continuation of a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
        /// 0 is greedy.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TREECODER_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TokenizerTrain { corpus, vocab_size, out, split_digits } => {
            commands::tokenizer_train(&corpus, vocab_size, &out, split_digits)
        }
        Command::Train { config, routing, seed } => commands::train(&config, routing, seed),
        Command::Eval { checkpoint, data, vocab, batch_size } => {
            commands::eval(&checkpoint, &data, vocab.as_deref(), batch_size)
        }
        Command::Inspect(args) => commands::inspect(&args),
        Command::Generate { checkpoint, prompt, max_tokens, temperature, seed } => {
            commands::generate(&checkpoint, &prompt, max_tokens, temperature, seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

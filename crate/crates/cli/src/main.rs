//! `nmt-simplify`: the distillation pipeline and its analysis tools as
//! subcommands. Every run writes one `key=value` manifest.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nmt-simplify", version, about = "Sequence-level distillation for translation simplification")]
pub struct Cli {
    /// Seed for every random choice of the run (overrides config files).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for decoding and alignment.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,

    /// Where to write the run manifest (default: next to the primary output).
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize raw text, one sentence per line.
    Tokenize(commands::TokenizeArgs),
    /// Drop empty, overlong and unbalanced sentence pairs.
    Filter(commands::FilterArgs),
    /// Build a frequency-truncated vocabulary from tokenized text.
    Vocab(commands::VocabArgs),
    /// Train a translation model on tokenized bitext.
    Train(commands::TrainArgs),
    /// Beam-decode tokenized source text with a trained model.
    Translate(commands::TranslateArgs),
    /// Word-align tokenized bitext, printing `i-j` links.
    Align(commands::AlignArgs),
    /// Length and crossing statistics of hypotheses against references.
    Analyze(commands::AnalyzeArgs),
    /// Corpus BLEU of tokenized hypotheses against one reference.
    Bleu(commands::BleuArgs),
    /// Teacher, re-translation and student training over all plan seeds.
    Distill(commands::DistillArgs),
    /// Generate a synthetic translation task.
    Synth(commands::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads as usize;
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

//! `keytag`: pretrain / finetune / extract / eval / stats / attn-dump over
//! JSON-lines corpora.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 compatibility
//! error.

mod commands;
mod config;

use clap::{ArgAction, Args, Parser, Subcommand};
use config::Settings;
use keytag_core::training::Objective;
use keytag_core::{Error, Result};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "keytag", version, about = "Transformer keyword tagger pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a language model on an unlabeled corpus
    Pretrain(CommonArgs),
    /// Train the keyword tagger on a labeled corpus (80/20 split)
    Finetune(CommonArgs),
    /// Emit ranked keyphrases for each document
    Extract(CommonArgs),
    /// Score extractions against gold keyphrases (P/R/F1 at 5 and 10)
    Eval(CommonArgs),
    /// Dataset statistics (documents, lengths, present keywords)
    Stats(CommonArgs),
    /// Per-head mean attention diagonals, tab-separated
    AttnDump(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Plain key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON-lines corpus
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Checkpoint file (vocabulary files are read from its directory)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// RNG seed for init, shuffling, masking and the 80/20 split
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only the top-k keyphrases (extract)
    #[arg(long)]
    k: Option<usize>,

    /// Pretraining objective: autoregressive | masked
    #[arg(long)]
    objective: Option<String>,
    /// Byte-pair encoding tokenization instead of word-level
    #[arg(long, action = ArgAction::SetTrue)]
    bpe: bool,
    /// Add the POS-tag embedding input (corpus must carry pos_tags)
    #[arg(long, action = ArgAction::SetTrue)]
    pos: bool,
    /// Add the two-layer BiLSTM residual encoder at fine-tuning
    #[arg(long, action = ArgAction::SetTrue)]
    bilstm: bool,
    /// Replace the classification head with BiLSTM-CRF
    #[arg(long, action = ArgAction::SetTrue)]
    crf: bool,

    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    embedding_dim: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    sequence_length: Option<usize>,
    #[arg(long)]
    rel_pos_window: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    max_vocab: Option<usize>,
    #[arg(long)]
    bpe_vocab: Option<usize>,
}

impl CommonArgs {
    /// defaults <- config file <- command line
    fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.load_file(path)?;
        }
        if let Some(v) = &self.corpus {
            s.corpus = Some(v.clone());
        }
        if let Some(v) = &self.checkpoint {
            s.checkpoint = Some(v.clone());
        }
        if let Some(v) = &self.out {
            s.out = Some(v.clone());
        }
        if let Some(v) = self.seed {
            s.seed = v;
        }
        if let Some(v) = self.k {
            s.k = Some(v);
        }
        if let Some(v) = &self.objective {
            s.objective = Objective::parse(v)?;
        }
        s.bpe |= self.bpe;
        s.pos |= self.pos;
        s.bilstm |= self.bilstm;
        s.crf |= self.crf;
        if let Some(v) = self.epochs {
            s.epochs = v;
        }
        if let Some(v) = self.lr {
            s.lr = v;
        }
        if let Some(v) = self.batch_size {
            s.batch_size = v;
        }
        if let Some(v) = self.embedding_dim {
            s.embedding_dim = v;
        }
        if let Some(v) = self.num_heads {
            s.num_heads = v;
        }
        if let Some(v) = self.num_layers {
            s.num_layers = v;
        }
        if let Some(v) = self.sequence_length {
            s.sequence_length = v;
        }
        if let Some(v) = self.rel_pos_window {
            s.rel_pos_window = Some(v);
        }
        if let Some(v) = self.dropout {
            s.dropout = v;
        }
        if let Some(v) = self.max_vocab {
            s.max_vocab = v;
        }
        if let Some(v) = self.bpe_vocab {
            s.bpe_vocab = v;
        }
        Ok(s)
    }
}

fn run() -> Result<()> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            eprint!("{e}");
            std::process::exit(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            std::process::exit(0);
        }
    };
    match &cli.command {
        Command::Pretrain(a) => commands::cmd_pretrain(&a.settings()?),
        Command::Finetune(a) => commands::cmd_finetune(&a.settings()?),
        Command::Extract(a) => commands::cmd_extract(&a.settings()?),
        Command::Eval(a) => commands::cmd_eval(&a.settings()?),
        Command::Stats(a) => commands::cmd_stats(&a.settings()?),
        Command::AttnDump(a) => commands::cmd_attn_dump(&a.settings()?),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parameter(_) | Error::Contract(_) | Error::Dimension { .. } => 1,
        Error::Data(_) | Error::Io(_) => 2,
        Error::Compatibility(_) => 3,
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

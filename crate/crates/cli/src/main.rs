mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Phrase-based image captioning toolkit.
#[derive(Parser, Debug)]
#[command(name = "phrasecap", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output file (stdout when absent, loss trace for `train`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[arg(long, global = true)]
    pub captions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    #[arg(long, global = true)]
    pub lm: Option<PathBuf>,
    #[arg(long, global = true)]
    pub vocab: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Phrase-count histograms and ranked sentence structures.
    Stats,
    /// Build the thresholded phrase vocabulary.
    BuildVocab {
        #[arg(long)]
        threshold: Option<u64>,
    },
    /// Train the bilinear model and estimate the trigram model.
    Train,
    /// Top-scored phrases per type for each image.
    PredictPhrases {
        /// Image ids; all images of the feature file when empty.
        images: Vec<String>,
    },
    /// Generate one caption per image.
    Generate { images: Vec<String> },
    /// Recall, BLEU, human agreement and novelty metrics.
    Evaluate {
        /// Generation output (JSON Lines with image_id and text).
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Caption file holding the reference descriptions.
        #[arg(long)]
        references: Option<PathBuf>,
        /// predict-phrases output, for phrase recall.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code.into(),
        Err(err) => {
            eprintln!("error: {err:#}");
            commands::Status::InputError.into()
        }
    }
}

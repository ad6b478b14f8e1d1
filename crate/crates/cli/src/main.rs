//! `sgsynth` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

#[derive(Parser, Debug)]
#[command(
    name = "sgsynth",
    version,
    about = "Scene-graph pseudo-label synthesis and evaluation"
)]
struct Cli {
    /// Log filter for the JSON logs on stderr (e.g. `info`, `sgsynth=debug`).
    #[arg(long, global = true, default_value = "info")]
    log: String,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert COCO detection annotations into image records.
    Ingest {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the selected overlapping object pairs per image.
    SelectRois {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = sgsynth::roi::DEFAULT_MAX_ROIS)]
        n_max: usize,
    },
    /// Caption whole images and selected regions.
    Narrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use the deterministic offline captioner.
        #[arg(long)]
        mock_captioner: bool,
    },
    /// Render chat prompts for captioned records.
    Prompt {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = sgsynth::prompt::DEFAULT_BATCH_CAP)]
        batch_size: usize,
        #[command(flatten)]
        template: TemplateArgs,
    },
    /// Run the full pipeline and write the pseudo-label corpus.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Offline LLM: a file whose text is returned for every prompt, or
        /// `auto` for a responder that links every captioned object pair.
        #[arg(long, value_name = "FILE|auto")]
        mock_llm: Option<String>,
        #[arg(long)]
        mock_captioner: bool,
    },
    /// Parse and validate a raw model response against image records.
    Validate {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        response: PathBuf,
        /// Config supplying exclusivity rules; defaults apply otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the full validation report (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicate frequency statistics of a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
        /// Also print a human-readable table to stderr.
        #[arg(long)]
        table: bool,
    },
    /// Convert a corpus into instruction-tuning pairs.
    ExportInstructions {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        template: TemplateArgs,
    },
    /// Recall@K and mean Recall@K of predicted against ground-truth triplets.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = sgsynth::eval::DEFAULT_KS)]
        k: Vec<usize>,
        #[arg(long, default_value_t = sgsynth::eval::DEFAULT_IOU_THRESHOLD)]
        iou: f64,
        #[arg(long, default_value = "union")]
        match_mode: String,
        /// Write the full report (per-predicate recalls) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TemplateArgs {
    #[arg(long, default_value = sgsynth::prompt::DEFAULT_TEMPLATE_ID)]
    template_id: String,
    /// Directory with `<id>.system.txt` and `<id>.user.txt`; built-in otherwise.
    #[arg(long)]
    template_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_new(&cli.log).unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    match commands::run(cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.failures {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            tracing::error!(error = %format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clisa::eval::Method;

use config::{parse_method, parse_protocol, Precision};

#[derive(Parser, Debug)]
#[command(
    name = "clisa",
    version,
    about = "Contrastive subject-invariant EEG representations"
)]
struct Cli {
    /// Output directory; every artifact and `run.json` go here.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed of every random choice.
    #[arg(long, global = true, env = "CLISA_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    /// JSON run config (the `run.json` of an earlier run works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Folds evaluated concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic multi-subject corpus.
    Synth {
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long, allow_negative_numbers = true)]
        snr: Option<f64>,
        #[arg(long)]
        trial_len_s: Option<f64>,
        #[arg(long)]
        fs: Option<f64>,
    },
    /// Re-reference, repair, band-pass and truncate a dataset.
    Preprocess {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        band_low: Option<f64>,
        #[arg(long)]
        band_high: Option<f64>,
        /// `average` or two mastoid channel names `A,B`.
        #[arg(long)]
        reref: Option<String>,
        /// Electrode coordinates, one `name x y z` line each.
        #[arg(long)]
        coords: Option<PathBuf>,
        #[arg(long)]
        keep_last_seconds: Option<f64>,
    },
    /// Contrastive training of the encoder on all (or the listed) subjects.
    Train {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Per-subject feature CSVs from a checkpoint (or raw DE).
    Features {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, required_unless_present = "raw_de")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        raw_de: bool,
        /// Also write all features with subject ids to `embeddings.csv`.
        #[arg(long)]
        dump_embeddings: bool,
    },
    /// Train the MLP on feature CSVs and predict the test subjects.
    Classify {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        test_subjects: Vec<String>,
    },
    /// Full cross-subject protocol for each method.
    Evaluate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<clisa::eval::Protocol>,
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<Method>,
    },
    /// Accuracy against the number of contrastive-phase subjects.
    Ablate {
        #[command(flatten)]
        data: DataArg,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<clisa::eval::Protocol>,
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// Integrated-gradients attribution of a trained classifier.
    Explain {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long = "class")]
        class: usize,
        #[arg(long, default_value_t = 256)]
        steps: usize,
        /// Subjects whose rows are explained (default: the classifier's test subjects).
        #[arg(long, value_delimiter = ',')]
        subjects: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "difftts", version, about = "Waveform diffusion text-to-speech")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML); explicit flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for all randomness; drawn and printed when absent.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct Sampling {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Reverse-process steps.
    #[arg(long)]
    pub n_steps: Option<usize>,
    /// Speaker id as listed in the training manifest.
    #[arg(long)]
    pub speaker: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train (or resume training) from a JSON-lines manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Total number of optimisation steps.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the newest checkpoint in the checkpoint directory.
        #[arg(long)]
        resume: bool,
    },
    /// Generate speech for a transcript.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        #[arg(long)]
        text: String,
        #[arg(long)]
        output: PathBuf,
    },
    /// Regenerate a time span of a recording.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Transcript of the edited recording.
        #[arg(long)]
        text: String,
        #[arg(long)]
        input: PathBuf,
        /// Span start in seconds.
        #[arg(long)]
        start: f64,
        /// Span end in seconds.
        #[arg(long)]
        end: f64,
        /// Length multipliers for the regenerated span; one output each.
        #[arg(long, value_delimiter = ',', default_value = "1.0")]
        scales: Vec<f64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Pick the candidate recording that best matches a probe's speaker.
    Classify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        probe: PathBuf,
        /// Candidate recordings, one flag per candidate.
        #[arg(long = "candidate", required = true)]
        candidates: Vec<PathBuf>,
        /// Transcript covering probe and candidate.
        #[arg(long)]
        text: String,
        /// Noise levels drawn per candidate.
        #[arg(long)]
        n_timesteps: Option<usize>,
        /// Also write the report here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fréchet Speaker Distance between two manifests.
    Fsd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest_a: PathBuf,
        #[arg(long)]
        manifest_b: PathBuf,
        /// Precomputed embeddings for set A (and B, unless given separately).
        #[arg(long)]
        embeddings_a: Option<PathBuf>,
        #[arg(long)]
        embeddings_b: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            manifest,
            checkpoint_dir,
            steps,
            resume,
        } => commands::train(&common, &manifest, checkpoint_dir, steps, resume),
        Command::Synthesize {
            common,
            sampling,
            text,
            output,
        } => commands::synthesize(&common, &sampling, &text, &output),
        Command::Edit {
            common,
            sampling,
            text,
            input,
            start,
            end,
            scales,
            output,
        } => commands::edit(
            &common,
            &sampling,
            &text,
            &input,
            (start, end),
            &scales,
            &output,
        ),
        Command::Classify {
            common,
            checkpoint,
            probe,
            candidates,
            text,
            n_timesteps,
            output,
        } => commands::classify(
            &common,
            checkpoint,
            &probe,
            &candidates,
            &text,
            n_timesteps,
            output,
        ),
        Command::Fsd {
            common,
            manifest_a,
            manifest_b,
            embeddings_a,
            embeddings_b,
            output,
        } => commands::fsd(
            &common,
            &manifest_a,
            &manifest_b,
            embeddings_a,
            embeddings_b,
            output,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}

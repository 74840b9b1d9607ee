//! `kinefit`: synthesize sessions, fit them, and score the fits.

mod commands;
mod manifest;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "kinefit",
    version,
    about = "Implicit-trajectory inverse kinematics from multi-camera keypoints"
)]
struct Cli {
    /// Only warnings and errors on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic session with known ground truth.
    Synth(SynthArgs),
    /// Fit one subject's trials.
    Fit(FitArgs),
    /// Fit several subjects jointly with shared base marker positions.
    Metafit(MetafitArgs),
    /// Geometric consistency and step-parameter metrics of fitted trials.
    Metrics(MetricsArgs),
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print a summary of a model, rig, trial or result file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Synthetic session settings (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model file, or `builtin:biped` / `builtin:biped_spine`.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct FitOptions {
    /// Optimization settings (JSON), applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: commands::Preset,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop after this many iterations of the schedule.
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Model file, or `builtin:biped` / `builtin:biped_spine`.
    #[arg(long)]
    pub model: String,
    #[arg(long)]
    pub rig: PathBuf,
    /// Trial stems or `.meta.json` paths.
    #[arg(long, num_args = 1.., required = true)]
    pub trials: Vec<PathBuf>,
    #[command(flatten)]
    pub options: FitOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetafitArgs {
    /// JSON list of subjects: `{"subjects": [{"name", "rig", "trials": [...]}]}`,
    /// paths relative to the manifest.
    #[arg(long)]
    pub subjects: PathBuf,
    /// Prior model, or `builtin:biped` / `builtin:biped_spine`.
    #[arg(long)]
    pub model: String,
    /// Sites whose base positions stay fixed.
    #[arg(long, value_delimiter = ',', default_value = "r_heel,l_heel")]
    pub frozen: Vec<String>,
    #[command(flatten)]
    pub options: FitOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Output directory of `kinefit fit`.
    #[arg(long)]
    pub fits: PathBuf,
    /// Directory holding the observed trials.
    #[arg(long)]
    pub obs: PathBuf,
    /// Walkway events (JSON array of `{time_s, x_m, y_m, side}`) used for every
    /// trial; otherwise `<obs>/<trial>.walkway.json` when present.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Defaults to the fits directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Gradient-check settings (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub configs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Writes `gradcheck.json` and a manifest here when given.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub path: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Fit(a) => commands::fit(a),
        Command::Metafit(a) => commands::metafit(a),
        Command::Metrics(a) => report::metrics(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}

mod commands;
mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::parse_assignment;

/// Exit status 1: the computation itself failed.
const EXIT_NUMERIC: u8 = 1;
/// Exit status 2: bad usage or unreadable input.
const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERIC,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self::usage(format!("{}: {err}", path.display()))
    }
}

#[derive(Parser)]
#[command(
    name = "texturizer",
    version,
    about = "Audio texture synthesis with random convolutional features"
)]
struct Cli {
    /// More log output (repeatable). RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a texture from a target WAV.
    Synth(SynthArgs),
    /// Score a synthesized WAV against its target.
    Eval(EvalArgs),
    /// Run a grid of syntheses and collect scores in a CSV table.
    #[command(after_help = commands::SWEEP_HELP)]
    Sweep(SweepArgs),
    /// Check the analytic loss gradient against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render log-spectrograms of WAV files as a grayscale PNG.
    Plot(PlotArgs),
}

/// Config file and generic overrides.
#[derive(Args, Clone, Default)]
pub struct BaseArgs {
    /// Flat `key = value` file; flags override it.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Set any configuration key (repeatable), e.g. `--set widths=2,4,8`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    set: Vec<(String, String)>,
}

impl BaseArgs {
    /// File, then `TEXTURIZER_SEED`, then `overrides`, then `--set`.
    fn resolve(&self, overrides: &[(String, String)]) -> Result<config::RunConfig, CliError> {
        let env_seed = std::env::var(config::SEED_ENV).ok();
        let mut all = overrides.to_vec();
        all.extend(self.set.iter().cloned());
        config::RunConfig::resolve(self.config.as_deref(), env_seed.as_deref(), &all)
    }
}

/// Configuration options of commands that synthesize.
#[derive(Args, Clone, Default)]
pub struct ConfigArgs {
    #[command(flatten)]
    base: BaseArgs,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    diversity_iterations: Option<usize>,
    #[arg(long)]
    n_filters: Option<usize>,
    /// Comma-separated kernel widths.
    #[arg(long)]
    widths: Option<String>,
    #[arg(long)]
    griffin_lim_iterations: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(String, String)]) -> Result<config::RunConfig, CliError> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key.to_string(), v));
            }
        };
        push("input", self.input.as_ref().map(|p| p.display().to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("beta", self.beta.map(|v| v.to_string()));
        push("iterations", self.iterations.map(|v| v.to_string()));
        push("diversity_iterations", self.diversity_iterations.map(|v| v.to_string()));
        push("n_filters", self.n_filters.map(|v| v.to_string()));
        push("widths", self.widths.clone());
        push(
            "griffin_lim_iterations",
            self.griffin_lim_iterations.map(|v| v.to_string()),
        );
        out.extend(extra.iter().cloned());
        self.base.resolve(&out)
    }
}

#[derive(Args)]
pub struct SynthArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Synthesized WAV (PCM-16).
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// PNG with the target and synthesized spectrograms side by side.
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Print the effective configuration as JSON and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Synthesized WAV.
    synth: PathBuf,
    /// Target WAV.
    target: PathBuf,
    #[command(flatten)]
    config: BaseArgs,
    /// JSON output path; the scores are printed either way.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated grid over alpha.
    #[arg(long = "grid-alpha")]
    grid_alpha: Option<String>,
    /// Comma-separated grid over beta.
    #[arg(long = "grid-beta")]
    grid_beta: Option<String>,
    /// Comma-separated grid over the largest kernel width; widths become the
    /// powers of two from 2 up to it.
    #[arg(long = "grid-max-width")]
    grid_max_width: Option<String>,
    /// Comma-separated grid over the number of filters per net.
    #[arg(long = "grid-n-filters")]
    grid_n_filters: Option<String>,
    /// Runs per grid point, each with its own seed.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Syntheses run at the same time.
    #[arg(long, short, default_value_t = 1)]
    jobs: usize,
    /// CSV table path.
    #[arg(long, short)]
    output: PathBuf,
    /// Directory for per-run WAVs and reports.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 50)]
    directions: usize,
    #[arg(long, default_value_t = 64)]
    frames: usize,
    #[arg(long, default_value_t = 9)]
    bins: usize,
    #[arg(long, default_value = "2,4")]
    widths: String,
    #[arg(long, default_value_t = 8)]
    n_filters: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 3)]
    min_lag: usize,
    #[arg(long, default_value_t = 30)]
    max_lag: usize,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Multiplies the analytic gradient; for testing the checker.
    #[arg(long, hide = true, default_value_t = 1.0)]
    corrupt_gradient: f64,
}

#[derive(Args)]
pub struct PlotArgs {
    /// WAV files, drawn left to right.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, short)]
    output: PathBuf,
    #[command(flatten)]
    config: BaseArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(args) => commands::synth(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Sweep(args) => commands::sweep(&args),
        Command::Gradcheck(args) => commands::gradcheck(&args),
        Command::Plot(args) => commands::plot(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

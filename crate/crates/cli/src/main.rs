//! `unguide`: train, erase, probe, sample, evaluate and plot.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Debug, Parser)]
#[command(name = "unguide", version, about = "Concept erasure with LoRA adapters and divergence-routed guidance")]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Shared {
    /// Run configuration (JSON). Defaults to the snapshot stored in --base.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base model checkpoint.
    #[arg(long, global = true)]
    base: Option<PathBuf>,
    /// Adapter checkpoint; give twice for `mix`.
    #[arg(long, global = true)]
    lora: Vec<PathBuf>,
    /// Output file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Master seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TargetModeArg {
    Cond,
    Noncond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SampleMode {
    /// Base model with classifier-free guidance.
    Base,
    /// Adapted model with classifier-free guidance.
    Lora,
    /// Fixed blend weight given by --w.
    Unguide,
    /// Blend weight chosen by the probe.
    Auto,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the base denoiser.
    TrainBase,
    /// Train an erasure adapter on top of --base.
    TrainLora(TrainLoraArgs),
    /// Route a prompt to erase or retain.
    Probe(ProbeArgs),
    /// Draw samples and write them as CSV.
    Sample(SampleArgs),
    /// Efficacy, specificity and generality of an adapter.
    Eval(EvalArgs),
    /// Weighted sum of two adapters.
    Mix(MixArgs),
    /// Divergence norms over a grid of probe settings.
    NormTable(NormTableArgs),
    /// Render a samples or norms CSV as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct TrainLoraArgs {
    /// Concept to erase (name or id).
    #[arg(long)]
    concept: Option<String>,
    /// Concept that replaces it (name or id).
    #[arg(long)]
    mapping: Option<String>,
    /// Guidance scale for the training latents.
    #[arg(long)]
    alpha: Option<f32>,
    /// Negative guidance strength.
    #[arg(long)]
    gamma: Option<f32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    /// `noncond` starts from the explicit-content preset for any value not
    /// given on the command line.
    #[arg(long, value_enum)]
    target_mode: Option<TargetModeArg>,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    concept: String,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    probe_steps: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    w_erase: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    w_retain: Option<f32>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    concept: String,
    #[arg(long, value_enum, default_value = "base")]
    mode: SampleMode,
    /// Blend weight for `--mode unguide`.
    #[arg(long, allow_hyphen_values = true)]
    w: Option<f32>,
    #[arg(long)]
    n: Option<usize>,
    /// Guidance scale; defaults to the configured evaluation scale.
    #[arg(long)]
    cfg_scale: Option<f32>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Erased concepts; defaults to those recorded in the adapter file.
    #[arg(long)]
    concept: Vec<String>,
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Debug, Args)]
struct MixArgs {
    /// Weight of the first adapter, in [0, 1].
    #[arg(long)]
    alpha: f32,
}

#[derive(Debug, Args)]
struct NormTableArgs {
    #[arg(long, value_delimiter = ',', default_value = "5,10,25")]
    steps_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "5,10,30")]
    repeats_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Erased concept; defaults to the first one recorded in the adapter file.
    #[arg(long)]
    concept: Option<String>,
    /// Retained concept; defaults to the first primary that is not erased.
    #[arg(long)]
    retained: Option<String>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// Samples or norms CSV.
    input: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UNGUIDE_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specprefetch::engine::PoolLimit;
use specprefetch::model::CALIBRATED_OUTLIER_SCALE;
use specprefetch::report::Metric;
use specprefetch::{EvictionPolicy, ExecutionStyle, Scheme};

mod commands;

#[derive(Parser)]
#[command(
    name = "specprefetch",
    version,
    about = "Speculative KV-cache prefetching experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic model.
    GenModel(GenModelArgs),
    /// Calibrate and fold the per-head skewing matrices into a model.
    Skew(SkewArgs),
    /// Prefill and decode one scheme, writing a trace.
    Run(RunArgs),
    /// Run several schemes on the same inputs and compare them.
    Bench(BenchArgs),
    /// Build a CSV/JSON report from saved traces.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenModelArgs {
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    model_dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Defaults to 4 × model-dim.
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    outlier_channels: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = CALIBRATED_OUTLIER_SCALE)]
    outlier_scale: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; the payload goes next to it with a .bin extension.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct SkewArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    calib_seed: u64,
    /// Seed of the verification prompt.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 256)]
    prompt_len: usize,
    #[arg(long, default_value_t = 32)]
    gen_len: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, allow_negative_numbers = true, default_value_t = 4.0)]
    alpha: f32,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.3)]
    partial_ratio: f32,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.2)]
    cap_ratio: f32,
    #[arg(long, default_value_t = 1)]
    min_select: usize,
    /// Row count, or a fraction of prompt-len + gen-len when it has a decimal point.
    #[arg(long)]
    pool_limit: Option<PoolLimit>,
    #[arg(long, default_value_t = EvictionPolicy::Counter)]
    policy: EvictionPolicy,
    #[arg(long, allow_negative_numbers = true, default_value_t = 0.2)]
    h2o_budget: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// `autoregressive` or `shifting`.
    #[arg(long, default_value = "autoregressive")]
    workload: String,
    /// Iteration at which the shifting workload changes focus.
    #[arg(long, default_value_t = 8)]
    switch_at: usize,
    /// Record per-head scores and weights (needed for cosine and recall).
    #[arg(long)]
    capture: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value_t = Scheme::Infinigen)]
    scheme: Scheme,
    #[command(flatten)]
    decode: DecodeArgs,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = Scheme::ALL)]
    schemes: Vec<Scheme>,
    #[command(flatten)]
    decode: DecodeArgs,
    /// JSON or TOML file with cost-model parameters.
    #[arg(long)]
    cost_config: Option<PathBuf>,
    /// Summary JSON path.
    #[arg(short, long)]
    output: PathBuf,
    /// Optional per-layer CSV rows.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    traces: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = Metric::ALL)]
    metrics: Vec<Metric>,
    #[arg(long, default_value_t = ExecutionStyle::SelectivePrefetch)]
    style: ExecutionStyle,
    #[arg(long)]
    cost_config: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            commands::print_error("usage", &e.to_string());
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(a),
        Command::Skew(a) => commands::skew(a),
        Command::Run(a) => commands::run(a),
        Command::Bench(a) => commands::bench(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e
                .downcast_ref::<specprefetch::Error>()
                .map_or("error", specprefetch::Error::kind);
            commands::print_error(kind, &format!("{e:#}"));
            ExitCode::FAILURE
        }
    }
}

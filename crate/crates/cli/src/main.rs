mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lambdakit::complexity::OpKind;
use lambdakit::layer::{Implementation, Interactions, IntraNorm, KeyNorm};
use lambdakit::relpos::{Boundary, Geometry};
use lambdakit::rng::DEFAULT_SEED;
use lambdakit::Dtype;
use serde::Serialize;

/// Verification suites, gradient checks, cost models, benchmarks and a toy
/// training run for lambda layers.
#[derive(Parser, Debug)]
#[command(name = "lambdakit", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Run property suites; exits 1 naming any failing property.
    Verify(VerifyArgs),
    /// Time forward passes and report multiply counts.
    Bench(BenchArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Memory model over backbone stages.
    Memmodel(MemmodelArgs),
    /// Train a single lambda layer on the quadrant toy task.
    TrainToy(TrainToyArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Root seed for every random stream.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// f64 (reference) or f32 (fast).
    #[arg(long)]
    pub precision: Option<Dtype>,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantKind {
    Standard,
    Masked,
    Multihead,
    IntraDepth,
    ContentOnly,
    PositionOnly,
}

/// Layer shape flags; unset values fall back to per-command defaults.
#[derive(Args, Debug, Clone, Serialize)]
pub struct LayerArgs {
    /// seq:N or grid:HxW.
    #[arg(long)]
    pub geom: Option<Geometry>,
    /// Local scope: one odd extent, or one per axis (e.g. 3x5).
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long, default_value = "clamped")]
    pub boundary: Boundary,
    #[arg(long, value_enum, default_value_t = VariantKind::Standard)]
    pub variant: VariantKind,
    #[arg(long = "impl", default_value = "einsum")]
    pub implementation: Implementation,
    /// `causal` or a tensor file holding a binary [n, n] mask.
    #[arg(long)]
    pub mask: Option<String>,
    /// Query/key depth.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of heads (query slices).
    #[arg(long)]
    pub h: Option<usize>,
    /// Intra-depth.
    #[arg(long)]
    pub u: Option<usize>,
    /// Batch size.
    #[arg(long)]
    pub b: Option<usize>,
    /// Value depth per head.
    #[arg(long)]
    pub v: Option<usize>,
    /// Input channels.
    #[arg(long)]
    pub d_in: Option<usize>,
    #[arg(long, default_value = "softmax")]
    pub key_norm: KeyNorm,
    #[arg(long, default_value = "joint")]
    pub intra_norm: IntraNorm,
    /// Learned per-channel scale and shift on queries and values.
    #[arg(long)]
    pub hook: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct VerifyArgs {
    /// Suites to run (comma separated) or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    pub suite: Vec<String>,
    /// Restrict the equivalence suite to one implementation.
    #[arg(long = "impl")]
    pub implementation: Option<Implementation>,
    /// Seeded cases per randomized property.
    #[arg(long, default_value_t = 120)]
    pub cases: usize,
    /// Mutation-test mode: negate the content lambda; suites should fail.
    #[arg(long)]
    pub mutate: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub layer: LayerArgs,
    /// Run the n-sweeps and check linear (conv) and quadratic (global) scaling.
    #[arg(long)]
    pub sweep: bool,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    #[arg(long, default_value_t = 30)]
    pub iters: usize,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalKind {
    Sum,
    Random,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub layer: LayerArgs,
    /// Scalar loss: sum of outputs or a seeded random linear functional.
    #[arg(long, value_enum, default_value_t = FunctionalKind::Random)]
    pub functional: FunctionalKind,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct MemmodelArgs {
    /// Lambda-bearing stages as LAYERSxEXTENT pairs.
    #[arg(long, default_value = "3x56,4x28,6x14,3x7")]
    pub stages: String,
    #[arg(long, default_value_t = 128)]
    pub b: usize,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 8)]
    pub h: usize,
    /// Extra rows to model at depth k (op kinds, comma separated).
    #[arg(long, value_delimiter = ',')]
    pub op: Vec<OpKind>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainToyArgs {
    /// Which interactions the layer may use: full, content-only or position-only.
    #[arg(long, default_value = "full")]
    pub mode: Interactions,
    /// Grid for the task, grid:HxW.
    #[arg(long)]
    pub geom: Option<Geometry>,
    /// Query/key depth.
    #[arg(long)]
    pub k: Option<usize>,
    /// Number of heads.
    #[arg(long)]
    pub h: Option<usize>,
    /// Maximum SGD steps.
    #[arg(long)]
    pub steps: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Stop once test accuracy reaches this value.
    #[arg(long)]
    pub stop_at: Option<f64>,
    /// Steps between test-accuracy evaluations.
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli.command) {
        Ok(status) => ExitCode::from(status),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::error_status(&e))
        }
    }
}

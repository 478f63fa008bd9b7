use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geomlens_core::{DType, Error};

mod commands;
mod output;

/// Exit codes.
const EXIT_INPUT: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "geomlens", version, about = "Geometry diagnostics for transformer hidden states")]
struct Cli {
    /// Worker threads for layer-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every sampled quantity.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Scalar type of written containers.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

impl From<Precision> for DType {
    fn from(p: Precision) -> Self {
        match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split one embeddings container into mean, pos, ctx and resid.
    Decompose(DecomposeArgs),
    /// Per-layer table of rank, norm, incoherence and cluster statistics.
    Report(ReportArgs),
    /// Rank estimate and r_10 per layer.
    OodReport(ReportArgs),
    /// Low-frequency energy ratios of the positional Gram matrix.
    Fourier(FourierArgs),
    /// QK constituents and attention matrix for one sequence.
    Qk(QkArgs),
    /// Diagonal plus rotated low-rank dissection of every head in a directory.
    Weights(WeightsArgs),
    /// Top-2 principal projection of pos and sampled cvec.
    Pca(PcaArgs),
    /// Write planted synthetic embeddings with ground truth.
    Synth(SynthArgs),
    /// Numerical certificates for the two smoothness/kernel theorems.
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Cosine similarity and mean norm across layers.
    CrossLayer(CrossLayerArgs),
}

#[derive(Args, Debug)]
struct TrimArgs {
    /// Keep position 0 instead of dropping it as a null token.
    #[arg(long)]
    keep_first_token: bool,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    trim: TrimArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One embeddings container per layer.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON mirror of the report.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Per-layer singular values of P.
    #[arg(long)]
    spectral: Option<PathBuf>,
    #[arg(long = "K", value_delimiter = ',', default_values_t = geomlens_core::report::DEFAULT_KS)]
    ks: Vec<usize>,
    #[command(flatten)]
    trim: TrimArgs,
    /// Analyze the layer with the largest index too.
    #[arg(long)]
    keep_final_layer: bool,
    #[arg(long)]
    exclude_layer0: bool,
    /// Analyze a seeded random subset of this many sequences per layer.
    #[arg(long)]
    sample: Option<usize>,
}

#[derive(Args, Debug)]
struct FourierArgs {
    /// Positional basis (2-D) or embeddings (decomposed first).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "K", value_delimiter = ',', default_values_t = geomlens_core::report::DEFAULT_KS)]
    ks: Vec<usize>,
    /// Also report the max-norm of the order-m finite difference.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    trim: TrimArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum MuModeArg {
    Exclude,
    Fold,
}

#[derive(Args, Debug)]
struct QkArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    wq: PathBuf,
    #[arg(long)]
    wk: PathBuf,
    #[arg(long, default_value_t = 0)]
    seq: usize,
    #[arg(long)]
    causal: bool,
    #[arg(long, value_enum, default_value_t = MuModeArg::Exclude)]
    mu_mode: MuModeArg,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    trim: TrimArgs,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    /// Directory of weight_q / weight_k containers, paired by layer and head.
    #[arg(long)]
    w_dir: PathBuf,
    /// Positional basis (2-D) or embeddings (decomposed first).
    #[arg(long)]
    p: PathBuf,
    #[arg(long = "K", default_value_t = geomlens_core::attention::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = geomlens_core::attention::DEFAULT_QUANTILE)]
    quantile: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    trim: TrimArgs,
}

#[derive(Args, Debug)]
struct PcaArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Number of sampled cvec points.
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    trim: TrimArgs,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long = "C")]
    c: usize,
    #[arg(long = "T")]
    t: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long, default_value_t = 1)]
    clusters: usize,
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.0)]
    spread: f64,
    #[arg(long, default_value_t = 1.0)]
    mu_scale: f64,
    /// Leave cluster means unprojected (nonzero incoherence).
    #[arg(long)]
    no_orthogonalize: bool,
    /// Number of layers; with more than one, `--out` is a directory.
    #[arg(long, default_value_t = 1)]
    layers: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum VerifyCommand {
    Thm1(Thm1Args),
    Thm2(Thm2Args),
}

#[derive(Args, Debug)]
struct Thm1Args {
    /// Positional basis (2-D) or embeddings (decomposed first).
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long)]
    json: Option<PathBuf>,
    #[command(flatten)]
    trim: TrimArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Args, Debug)]
struct Thm2Args {
    #[arg(long, default_value_t = 256)]
    d: usize,
    #[arg(long, default_value_t = 3)]
    s: usize,
    /// Absolute incoherence target.
    #[arg(long, conflicts_with = "gamma")]
    incoh: Option<f64>,
    /// Incoherence as d^(-gamma).
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, value_enum, default_value_t = OnOff::Off)]
    noise: OnOff,
    #[arg(long, default_value_t = geomlens_core::kernel::DEFAULT_C_Z)]
    c_z: f64,
    /// Dictionary sizes (default min(16, d/4)).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossLayerArgs {
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    trim: TrimArgs,
}

/// Finished with usable output, but some inputs failed.
#[derive(Debug)]
struct Partial(String);

impl std::fmt::Display for Partial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Partial {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Partial>().is_some() {
        return EXIT_PARTIAL;
    }
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::NumericalFailure(_)) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(EXIT_INPUT);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

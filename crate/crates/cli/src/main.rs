//! `localsdf` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Failure;

pub const THREADS_ENV: &str = "LOCALSDF_THREADS";

#[derive(Parser)]
#[command(
    name = "localsdf",
    version,
    about = "Fit, compact, refine, mesh and evaluate local-basis signed distance fields",
    after_help = "Machine-readable JSON goes to stdout, progress to stderr (RUST_LOG controls verbosity).\n\
                  LOCALSDF_THREADS sets the worker thread count.\n\
                  Exit codes: 0 success, 1 configuration or I/O error, 2 numerical failure, 3 verification failure."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a labelled training sample set from a scene.
    Sample(SampleArgs),
    /// Fit a field to a scene as described by a run configuration.
    Fit(FitArgs),
    /// Keep the N bases with the least-covered centers.
    Downsample(DownsampleArgs),
    /// Post-optimize centers and latents against a scene's surface.
    Refine(RefineArgs),
    /// Extract the zero level set of a checkpoint or scene.
    Mesh(MeshArgs),
    /// Compare a field (or scene) against a reference scene.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
pub struct SampleArgs {
    /// Scene JSON file.
    #[arg(long)]
    pub scene: PathBuf,
    /// Near-surface sample count.
    #[arg(long, default_value_t = 18_000)]
    pub near: usize,
    /// Uniform sample count.
    #[arg(long, default_value_t = 2_000)]
    pub uniform: usize,
    /// Gaussian noise standard deviations for the two near-surface halves.
    #[arg(long, num_args = 2, value_delimiter = ',', default_values_t = [0.01, 0.003])]
    pub noise_stds: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output sample-set JSON.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct FitArgs {
    /// Fit run configuration JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Override the checkpoint output path.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Override the report output path.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct DownsampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of bases to keep.
    #[arg(long)]
    pub keep: usize,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional kept-index list output.
    #[arg(long)]
    pub kept_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scene providing surface and free-space points.
    #[arg(long)]
    pub scene: PathBuf,
    /// Refinement configuration JSON; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional refinement report output.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct MeshArgs {
    /// Field checkpoint to extract.
    #[arg(long, conflicts_with = "scene", required_unless_present = "scene")]
    pub checkpoint: Option<PathBuf>,
    /// Scene to extract instead of a checkpoint.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Cells per axis.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    /// Output mesh; `.ply` writes ASCII PLY, anything else OBJ.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Field checkpoint to evaluate.
    #[arg(long, conflicts_with = "candidate_scene", required_unless_present = "candidate_scene")]
    pub checkpoint: Option<PathBuf>,
    /// Scene to evaluate instead of a checkpoint.
    #[arg(long)]
    pub candidate_scene: Option<PathBuf>,
    /// Reference scene.
    #[arg(long)]
    pub scene: PathBuf,
    /// Evaluation protocol JSON; defaults apply when omitted.
    #[arg(long)]
    pub protocol: Option<PathBuf>,
    /// Optional metric report output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of random fixtures.
    #[arg(long, default_value_t = 100)]
    pub fixtures: usize,
    /// Samples per fixture.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Corrupt the analytic gradient of this loss (self-test of the checker).
    #[arg(long)]
    pub corrupt: Option<String>,
    /// Optional report output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::config(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::config(format!("cannot configure thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Sample(a) => commands::sample(a),
        Command::Fit(a) => commands::fit(a),
        Command::Downsample(a) => commands::downsample(a),
        Command::Refine(a) => commands::refine(a),
        Command::Mesh(a) => commands::mesh(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    });
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(failure) => {
            if let Some(summary) = failure.summary() {
                println!("{}", serde_json::to_string_pretty(summary).expect("summary serializes"));
            }
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Branching random walks: extinction brackets, spectral estimates,
/// simulation and theorem checks.
#[derive(Parser, Debug)]
#[command(name = "brwlab", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Brackets for the extinction probabilities q-bar, q(., A) and q_0(., A).
    Solve(SolveCmd),
    /// Growth sequences, Perron roots and critical parameters.
    Spectral(SpectralCmd),
    /// Monte Carlo survival estimates.
    Simulate(SimulateCmd),
    /// Builds a named example and runs the full pipeline on it.
    Gallery(GalleryCmd),
    /// Runs the theorem checks on a model.
    Check(CheckCmd),
    /// Runs the acceptance scenarios and writes a summary table.
    ReproduceAll(ReproduceCmd),
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Model file (JSON).
    #[arg(long, conflicts_with = "gallery", required_unless_present = "gallery")]
    model: Option<PathBuf>,
    /// Built-in model name.
    #[arg(long)]
    gallery: Option<String>,
    /// Gallery parameter, repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE", requires = "gallery")]
    params: Vec<String>,
    /// Window root (site key); defaults to the model root.
    #[arg(long)]
    root: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct OutArgs {
    /// Output file; standard output when absent.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Policy {
    Extinct,
    Immortal,
}

#[derive(Args, Debug, Clone)]
struct WindowArgs {
    /// Window radius; finite models use the whole site set when absent.
    #[arg(long)]
    radius: Option<usize>,
    /// Boundary policy used for evaluation and simulation.
    #[arg(long, value_enum, default_value_t = Policy::Extinct)]
    policy: Policy,
}

#[derive(Args, Debug, Clone)]
struct SolverArgs {
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    max_iter: usize,
    /// Use plain 0/1 boundary values instead of model certificates.
    #[arg(long)]
    uncertified: bool,
}

#[derive(Args, Debug)]
struct SolveCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Target site for local and never-visit probabilities, repeatable.
    #[arg(long)]
    target: Vec<String>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct SpectralCmd {
    #[command(flatten)]
    model: ModelArgs,
    /// Site whose growth is measured; defaults to the window root.
    #[arg(long)]
    site: Option<String>,
    /// Number of matrix powers.
    #[arg(long, default_value_t = 200)]
    n_max: usize,
    /// Also report the Perron root of the moment matrix on this window.
    #[arg(long)]
    radius: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct SimulateCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[arg(long, default_value_t = 10_000)]
    trials: u64,
    #[arg(long, default_value_t = 200)]
    horizon: usize,
    /// Population at which a trial stops and counts as surviving.
    #[arg(long, default_value_t = brwlab::montecarlo::DEFAULT_CAP)]
    cap: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Target site for local events, repeatable.
    #[arg(long)]
    target: Vec<String>,
    /// First generation counted by local and avoiding events.
    #[arg(long)]
    settle: Option<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct GalleryCmd {
    /// One of the built-in names.
    name: String,
    #[arg(long)]
    radius: Option<usize>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[command(flatten)]
    out: OutArgs,
    /// Constructor parameters as `--key value` pairs.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    params: Vec<String>,
}

#[derive(Args, Debug)]
struct CheckCmd {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    window: WindowArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    target: Vec<String>,
    /// Tolerance of the checks.
    #[arg(long, default_value_t = brwlab::checks::DEFAULT_CHECK_TOL)]
    check_tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug)]
struct ReproduceCmd {
    /// Directory for summary.csv.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Only criteria whose id, name or keyword matches.
    #[arg(long)]
    filter: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(n) = std::env::var("BRWLAB_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

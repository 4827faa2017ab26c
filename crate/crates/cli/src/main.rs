use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Objective Bayes variable selection for spatial regression with ICAR
/// random effects.
#[derive(Debug, Parser)]
#[command(name = "icar-select", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every candidate model and report posterior probabilities.
    Select(SelectArgs),
    /// Draw a synthetic dataset from the ICAR regression model.
    Simulate(SimulateArgs),
    /// Time the fast and KFF selection paths over a range of sizes.
    Benchmark(BenchmarkArgs),
    /// Evaluate the reference prior for tau on a log-spaced grid.
    PriorEval(PriorEvalArgs),
    /// Check that the three prior evaluators agree on random instances.
    PriorCheck(PriorCheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum GraphArg {
    Chain,
    Grid,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PathArg {
    Fast,
    Kff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Fast,
    Kff,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormArg {
    Trace,
    Eigen,
    WOracle,
}

#[derive(Debug, Args)]
struct QuadArgs {
    /// Target relative error of each quadrature.
    #[arg(long, default_value_t = 1e-8)]
    quad_tol: f64,
    /// Integrand evaluations allowed per model.
    #[arg(long, default_value_t = 20_000)]
    max_evals: usize,
    /// Training fraction: `auto` for (k + 2) / n, or a number in (0, 1).
    #[arg(long, default_value = "auto")]
    b_fraction: String,
}

#[derive(Debug, Args)]
struct SelectArgs {
    /// CSV with a header row: the response and candidate regressors.
    #[arg(long)]
    data: PathBuf,
    /// Neighborhood graph: `i j [w]` edge list, or a `.csv` matrix.
    #[arg(long)]
    adjacency: PathBuf,
    #[arg(long, default_value = "y")]
    response: String,
    /// Comma-separated regressor names, or `all`.
    #[arg(long, default_value = "all")]
    regressors: String,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Output file. Without it the JSON document goes to standard output
    /// and the summary to standard error.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    quad: QuadArgs,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Scoring path; `kff` repeats the per-model eigendecompositions.
    #[arg(long, value_enum, default_value_t = PathArg::Fast)]
    path: PathArg,
    /// Largest number of regressors to enumerate exhaustively.
    #[arg(long, default_value_t = 20)]
    max_k: usize,
    /// Reuse (or create) a cached eigendecomposition of the graph.
    #[arg(long)]
    eigen_cache: Option<PathBuf>,
    /// Number of top models in the summary.
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    n: usize,
    /// Number of candidate regressors.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = GraphArg::Chain)]
    graph: GraphArg,
    /// Graph file for `--graph file`.
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Intercept then one coefficient per regressor; default is 1 for the
    /// intercept and the first two regressors, 0 otherwise.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    beta: Option<Vec<f64>>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value = "y")]
    response: String,
    /// Data CSV; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Also write the graph as an edge list.
    #[arg(long)]
    graph_output: Option<PathBuf>,
    /// Also write the true parameters and field as JSON.
    #[arg(long)]
    truth_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// Sizes as start:stop:step.
    #[arg(long)]
    n_grid: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    method: MethodArg,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// KFF runs above this size are reported as NA.
    #[arg(long, default_value_t = 1000)]
    kff_max_n: usize,
    /// Stop timing a method once it has used this many seconds.
    #[arg(long)]
    budget_seconds: Option<f64>,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, value_enum, default_value_t = GraphArg::Chain)]
    graph: GraphArg,
    #[command(flatten)]
    quad: QuadArgs,
    /// CSV output; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PriorEvalArgs {
    /// Graph file; otherwise use `--graph` and `--n`.
    #[arg(long)]
    adjacency: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GraphArg::Chain)]
    graph: GraphArg,
    #[arg(long)]
    n: Option<usize>,
    /// Design data; without it the model is intercept-only.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    response: String,
    #[arg(long, default_value = "all")]
    regressors: String,
    /// Tau grid as min:max:points, log-spaced.
    #[arg(long, default_value = "1e-3:1e3:50")]
    tau_grid: String,
    #[arg(long, value_enum, default_value_t = FormArg::Trace)]
    form: FormArg,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PriorCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    /// Graph sizes, cycled over instances.
    #[arg(long, value_delimiter = ',', default_value = "10,30,60")]
    n_values: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    p_min: usize,
    #[arg(long, default_value_t = 5)]
    p_max: usize,
    #[arg(long, default_value_t = 25)]
    tau_points: usize,
    /// Largest acceptable relative discrepancy.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Testing hook: perturb one trace term of the fast evaluator.
    #[arg(long, num_args = 0..=1, default_missing_value = "1e-3")]
    inject_fault: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Select(a) => commands::select(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Benchmark(a) => commands::benchmark(a),
        Command::PriorEval(a) => commands::prior_eval(a),
        Command::PriorCheck(a) => commands::prior_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use icar_core::graph::{load_adjacency, AdjacencyFormat, NeighborhoodGraph};
use icar_core::prior::{equivalence_sweep, SweepConfig};
use icar_core::selection::kff_path_score_with_basis;
use icar_core::sim::{parse_n_grid, simulate_dataset};
use icar_core::spectral::decompose_cached;
use icar_core::{
    build_precision, decompose, enumerate_and_score, load_dataset, par, run_benchmark, transform,
    BenchConfig, BenchMethod, Dataset, Error, GraphKind, LogTauPrior, PriorForm, QuadConfig,
    RegressorSelection, SelectionConfig, SimConfig, TauPriorEvaluator,
};

use crate::{
    BenchmarkArgs, Format, FormArg, GraphArg, MethodArg, PathArg, PriorCheckArgs, PriorEvalArgs,
    QuadArgs, SelectArgs, SimulateArgs,
};

#[derive(Debug)]
pub enum Failure {
    /// Flags that cannot work together; nothing was computed.
    Usage(String),
    /// A verification subcommand ran and found a discrepancy.
    Check(String),
    Core(Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Core(e) if e.is_input_error() => 2,
            Failure::Core(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
            Failure::Core(e) => {
                write!(f, "{e}")?;
                let mut src = std::error::Error::source(e);
                while let Some(s) = src {
                    // Model errors already embed their source in the message.
                    if !matches!(e, Error::Model { .. }) {
                        write!(f, ": {s}")?;
                    }
                    src = s.source();
                }
                Ok(())
            }
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} file {} does not exist", path.display())))
    }
}

fn check_output(path: &Option<PathBuf>) -> CmdResult {
    if let Some(p) = path {
        let parent = p.parent().filter(|d| !d.as_os_str().is_empty());
        if let Some(dir) = parent {
            if !dir.is_dir() {
                return Err(usage(format!("output directory {} does not exist", dir.display())));
            }
        }
    }
    Ok(())
}

fn emit(path: &Option<PathBuf>, text: &str) -> CmdResult {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| {
            Failure::Core(Error::Io {
                path: p.clone(),
                source: e,
            })
        }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| usage(format!("cannot write to standard output: {e}")))
        }
    }
}

fn quad_config(q: &QuadArgs) -> Result<(QuadConfig, Option<f64>), Failure> {
    let quad = QuadConfig {
        rel_tol: q.quad_tol,
        max_evals: q.max_evals,
        ..QuadConfig::default()
    };
    quad.validate()?;
    let b = if q.b_fraction.eq_ignore_ascii_case("auto") {
        None
    } else {
        let b: f64 = q
            .b_fraction
            .parse()
            .map_err(|_| usage(format!("--b-fraction must be `auto` or a number, got `{}`", q.b_fraction)))?;
        if !(b > 0.0 && b < 1.0) {
            return Err(usage(format!("--b-fraction {b} is not in (0, 1)")));
        }
        Some(b)
    };
    Ok((quad, b))
}

pub fn select(a: SelectArgs) -> CmdResult {
    require_file(&a.data, "data")?;
    require_file(&a.adjacency, "adjacency")?;
    check_output(&a.output)?;
    if a.format == Format::Csv && a.output.is_none() {
        return Err(usage("--format csv writes two files and needs --output"));
    }
    let (quad, b_fraction) = quad_config(&a.quad)?;
    let cfg = SelectionConfig {
        quad,
        b_fraction,
        max_k: a.max_k,
    };

    let graph = load_adjacency(&a.adjacency, AdjacencyFormat::from_path(&a.adjacency))?;
    let data = load_dataset(&a.data, &a.response, &RegressorSelection::parse(&a.regressors))?;
    if graph.n() != data.n() {
        return Err(Error::Dimension(format!(
            "the graph has {} subregions but the data has {} rows",
            graph.n(),
            data.n()
        ))
        .into());
    }
    cfg.b_fraction_for(data.n(), data.k())?;

    let result = par::run_with_threads(a.threads, || {
        let h = build_precision(&graph);
        let basis = decompose_cached(&h, a.eigen_cache.as_deref())?;
        match a.path {
            PathArg::Fast => enumerate_and_score(&basis, &data, &cfg),
            PathArg::Kff => kff_path_score_with_basis(&basis, &data, &cfg),
        }
    })?;

    let summary = result.summary(a.top);
    match (&a.output, a.format) {
        (None, _) => {
            emit(&None, &result.to_json_string())?;
            eprint!("{summary}");
        }
        (Some(p), Format::Json) => {
            emit(&a.output, &result.to_json_string())?;
            print!("{summary}");
            println!("\nwrote {}", p.display());
        }
        (Some(p), Format::Csv) => {
            result.write_csv(p)?;
            print!("{summary}");
            println!("\nwrote {}", p.display());
        }
    }
    Ok(())
}

fn graph_kind(graph: GraphArg, adjacency: &Option<PathBuf>) -> Result<GraphKind, Failure> {
    match (graph, adjacency) {
        (GraphArg::File, Some(p)) => {
            require_file(p, "adjacency")?;
            Ok(GraphKind::File(p.clone()))
        }
        (GraphArg::File, None) => Err(usage("--graph file needs --adjacency")),
        (_, Some(_)) => Err(usage("--adjacency is only used with --graph file")),
        (GraphArg::Chain, None) => Ok(GraphKind::Chain),
        (GraphArg::Grid, None) => Ok(GraphKind::Grid),
    }
}

pub fn simulate(a: SimulateArgs) -> CmdResult {
    let kind = graph_kind(a.graph, &a.adjacency)?;
    for out in [&a.output, &a.graph_output, &a.truth_output] {
        check_output(out)?;
    }
    let mut cfg = SimConfig::standard(a.n, a.k, a.seed);
    cfg.graph_kind = kind;
    cfg.tau = a.tau;
    cfg.sigma2 = a.sigma2;
    if let Some(beta) = a.beta {
        cfg.beta = beta;
    }
    cfg.validate()?;
    let sim = simulate_dataset(&cfg)?;
    emit(&a.output, &sim.dataset.to_csv(&a.response)?)?;
    if a.graph_output.is_some() {
        emit(&a.graph_output, &sim.graph.to_edge_list())?;
    }
    if a.truth_output.is_some() {
        emit(&a.truth_output, &sim.truth.to_json_string())?;
    }
    Ok(())
}

pub fn benchmark(a: BenchmarkArgs) -> CmdResult {
    check_output(&a.output)?;
    let n_grid = parse_n_grid(&a.n_grid)?;
    let kind = graph_kind(a.graph, &None)?;
    let (quad, b_fraction) = quad_config(&a.quad)?;
    let method = match a.method {
        MethodArg::Fast => BenchMethod::Fast,
        MethodArg::Kff => BenchMethod::Kff,
        MethodArg::Both => BenchMethod::Both,
    };
    let mut cfg = BenchConfig::new(n_grid, a.k, method, a.seed);
    cfg.threads = a.threads;
    cfg.kff_max_n = a.kff_max_n;
    cfg.budget_seconds = a.budget_seconds;
    cfg.repeats = a.repeats;
    cfg.graph_kind = kind;
    cfg.selection.quad = quad;
    cfg.selection.b_fraction = b_fraction;
    let table = run_benchmark(&cfg)?;
    emit(&a.output, &table.to_csv())?;
    if table.is_truncated() {
        eprintln!("note: some runs were skipped and are reported as NA");
    }
    Ok(())
}

fn parse_tau_grid(spec: &str) -> Result<Vec<f64>, Failure> {
    let bad = || usage(format!("--tau-grid `{spec}` is not min:max:points"));
    let parts: Vec<&str> = spec.split(':').collect();
    let [lo, hi, m] = parts[..] else {
        return Err(bad());
    };
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    let m: usize = m.trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0 && hi >= lo && hi.is_finite()) || m == 0 {
        return Err(bad());
    }
    Ok((0..m)
        .map(|i| {
            let f = if m == 1 { 0.0 } else { i as f64 / (m - 1) as f64 };
            (lo.ln() + f * (hi.ln() - lo.ln())).exp()
        })
        .collect())
}

pub fn prior_eval(a: PriorEvalArgs) -> CmdResult {
    check_output(&a.output)?;
    let taus = parse_tau_grid(&a.tau_grid)?;
    if let Some(d) = &a.data {
        require_file(d, "data")?;
    }
    let graph = match (&a.adjacency, a.n) {
        (Some(_), Some(_)) => return Err(usage("give either --adjacency or --n, not both")),
        (Some(p), None) => {
            require_file(p, "adjacency")?;
            load_adjacency(p, AdjacencyFormat::from_path(p))?
        }
        (None, Some(n)) => match a.graph {
            GraphArg::Chain => NeighborhoodGraph::chain(n)?,
            GraphArg::Grid => NeighborhoodGraph::grid_with_size(n)?,
            GraphArg::File => return Err(usage("--graph file needs --adjacency")),
        },
        (None, None) => return Err(usage("need --adjacency or --n")),
    };
    let basis = decompose(&build_precision(&graph))?;
    let n = basis.n();
    let (sd, columns) = match &a.data {
        Some(path) => {
            let data = load_dataset(path, &a.response, &RegressorSelection::parse(&a.regressors))?;
            if data.n() != n {
                return Err(Error::Dimension(format!(
                    "the graph has {n} subregions but the data has {} rows",
                    data.n()
                ))
                .into());
            }
            let cols = (0..=data.k()).collect::<Vec<_>>();
            (transform(&basis, &data)?, cols)
        }
        None => {
            let data = Dataset::new(vec![0.0; n], Vec::new(), Vec::new())?;
            (transform(&basis, &data)?, vec![0])
        }
    };
    let form = match a.form {
        FormArg::Trace => PriorForm::Trace,
        FormArg::Eigen => PriorForm::Eigen,
        FormArg::WOracle => PriorForm::WOracle,
    };
    let ev = TauPriorEvaluator::new(form, &basis, &sd, &columns)?;
    let mut out = String::from("tau,log_prior\n");
    for tau in taus {
        out.push_str(&format!("{tau:e},{}\n", ev.log_prior(tau)?));
    }
    emit(&a.output, &out)
}

pub fn prior_check(a: PriorCheckArgs) -> CmdResult {
    if !(a.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }
    let cfg = SweepConfig {
        instances: a.instances,
        n_values: a.n_values,
        p_range: (a.p_min, a.p_max),
        tau_points: a.tau_points,
        seed: a.seed,
        fault: a.inject_fault.unwrap_or(0.0),
        ..SweepConfig::default()
    };
    let report = equivalence_sweep(&cfg)?;
    println!(
        "max relative discrepancy {:.3e} over {} evaluations (tolerance {:.1e})",
        report.max_rel, report.points, a.tol
    );
    if let Some(w) = &report.worst {
        println!(
            "worst: instance {} (n = {}, p_c = {}) at tau = {:.3e}",
            w.instance, w.n, w.p_c, w.tau
        );
    }
    if report.passes(a.tol) {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "prior forms disagree: max relative discrepancy {:.3e} exceeds {:.1e}",
            report.max_rel, a.tol
        )))
    }
}

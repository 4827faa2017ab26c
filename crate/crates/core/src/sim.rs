//! Synthetic datasets and wall-clock comparison of the two selection paths.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_precision, load_adjacency, AdjacencyFormat, Dataset, NeighborhoodGraph};
use crate::par;
use crate::selection::{enumerate_and_score, kff_path_score_with_basis, SelectionConfig};
use crate::spectral::{decompose, SpectralBasis};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Chain,
    /// Near-square rook lattice.
    Grid,
    /// Adjacency file; its size must equal `n`.
    File(PathBuf),
}

impl GraphKind {
    pub fn build(&self, n: usize) -> Result<NeighborhoodGraph> {
        match self {
            GraphKind::Chain => NeighborhoodGraph::chain(n),
            GraphKind::Grid => NeighborhoodGraph::grid_with_size(n),
            GraphKind::File(path) => {
                let g = load_adjacency(path, AdjacencyFormat::from_path(path))?;
                if g.n() != n {
                    return Err(Error::Dimension(format!(
                        "{} has {} subregions, expected {n}",
                        path.display(),
                        g.n()
                    )));
                }
                Ok(g)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub graph_kind: GraphKind,
    pub tau: f64,
    pub sigma2: f64,
    /// Intercept first, then one coefficient per candidate regressor.
    pub beta: Vec<f64>,
    pub k: usize,
    pub seed: u64,
}

impl SimConfig {
    /// The simulation design used throughout the tests: chain graph,
    /// `tau = 0.3`, `sigma2 = 1`, two active regressors out of `k`.
    pub fn standard(n: usize, k: usize, seed: u64) -> Self {
        let mut beta = vec![0.0; k + 1];
        for b in beta.iter_mut().take(3) {
            *b = 1.0;
        }
        Self {
            n,
            graph_kind: GraphKind::Chain,
            tau: 0.3,
            sigma2: 1.0,
            beta,
            k,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::InvalidConfig(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {}", self.sigma2)));
        }
        if self.beta.len() != self.k + 1 {
            return Err(Error::InvalidConfig(format!(
                "beta has {} entries, expected k + 1 = {}",
                self.beta.len(),
                self.k + 1
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidConfig("beta has non-finite entries".into()));
        }
        if self.n < self.k + 3 {
            return Err(Error::InvalidConfig(format!(
                "n = {} is too small for k = {} regressors",
                self.n, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    pub tau: f64,
    pub sigma2: f64,
    pub phi: Vec<f64>,
}

impl Truth {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub graph: NeighborhoodGraph,
    pub basis: SpectralBasis,
    pub truth: Truth,
}

/// Draws `phi = P xi` with `xi_i ~ N(0, sigma2 / (tau d_i))` and `xi_n = 0`.
pub fn draw_field<R: Rng>(basis: &SpectralBasis, tau: f64, sigma2: f64, rng: &mut R) -> Vec<f64> {
    let xi: Vec<f64> = basis
        .d_plus()
        .iter()
        .map(|&dp| {
            let z: f64 = rng.sample(StandardNormal);
            if dp == 0.0 {
                0.0
            } else {
                z * (sigma2 * dp / tau).sqrt()
            }
        })
        .collect();
    let p = basis.p();
    (0..basis.n())
        .map(|i| (0..basis.n()).map(|j| p[(i, j)] * xi[j]).sum())
        .collect()
}

/// Regressors column by column, then the field, then the noise, all from
/// one ChaCha8 stream seeded by `cfg.seed`.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<Simulation> {
    cfg.validate()?;
    let graph = cfg.graph_kind.build(cfg.n)?;
    let basis = decompose(&build_precision(&graph))?;
    simulate_on(cfg, graph, basis)
}

/// As [`simulate_dataset`] with a precomputed graph and basis.
pub fn simulate_on(cfg: &SimConfig, graph: NeighborhoodGraph, basis: SpectralBasis) -> Result<Simulation> {
    cfg.validate()?;
    let n = cfg.n;
    if graph.n() != n || basis.n() != n {
        return Err(Error::Dimension(format!(
            "graph has {} subregions, expected {n}",
            graph.n()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut regressors: Vec<Vec<f64>> = (0..cfg.k)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for col in &mut regressors {
        let mean = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= mean);
    }
    let phi = draw_field(&basis, cfg.tau, cfg.sigma2, &mut rng);
    let sd = cfg.sigma2.sqrt();
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mean = cfg.beta[0]
                + regressors
                    .iter()
                    .zip(&cfg.beta[1..])
                    .map(|(c, b)| c[i] * b)
                    .sum::<f64>();
            let e: f64 = rng.sample(StandardNormal);
            mean + phi[i] + sd * e
        })
        .collect();
    let names = (1..=cfg.k).map(|j| format!("x{j}")).collect();
    let dataset = Dataset::new(y, regressors, names)?;
    Ok(Simulation {
        dataset,
        graph,
        basis,
        truth: Truth {
            beta: cfg.beta.clone(),
            tau: cfg.tau,
            sigma2: cfg.sigma2,
            phi,
        },
    })
}

/// Connected graph on `n` nodes: a random recursive tree with weights in
/// `[0.5, 2)` plus about `n / 2` extra unit-weight edges.
pub fn random_graph<R: Rng>(n: usize, rng: &mut R) -> Result<NeighborhoodGraph> {
    let mut edges: Vec<(usize, usize, f64)> = (1..n)
        .map(|i| (rng.random_range(0..i), i, rng.random_range(0.5..2.0)))
        .collect();
    let mut seen: std::collections::HashSet<(usize, usize)> =
        edges.iter().map(|e| (e.0, e.1)).collect();
    for _ in 0..n / 2 {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i != j && seen.insert((i.min(j), i.max(j))) {
            edges.push((i.min(j), i.max(j), 1.0));
        }
    }
    NeighborhoodGraph::new(n, edges)
}

/// `n x p_c` design: intercept then standard normal columns.
pub fn random_design<R: Rng>(n: usize, p_c: usize, rng: &mut R) -> faer::Mat<f64> {
    faer::Mat::from_fn(n, p_c, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMethod {
    Fast,
    Kff,
    Both,
}

impl BenchMethod {
    fn methods(self) -> &'static [&'static str] {
        match self {
            BenchMethod::Fast => &["fast"],
            BenchMethod::Kff => &["kff"],
            BenchMethod::Both => &["fast", "kff"],
        }
    }
}

impl FromStr for BenchMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(BenchMethod::Fast),
            "kff" => Ok(BenchMethod::Kff),
            "both" => Ok(BenchMethod::Both),
            other => Err(Error::InvalidConfig(format!(
                "unknown method `{other}` (expected fast, kff or both)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub n_grid: Vec<usize>,
    pub k: usize,
    pub method: BenchMethod,
    pub seed: u64,
    pub threads: usize,
    pub graph_kind: GraphKind,
    /// KFF runs above this size are skipped and reported as `NA`.
    pub kff_max_n: usize,
    /// Once a method's accumulated time passes this many seconds its
    /// remaining sizes are reported as `NA`.
    pub budget_seconds: Option<f64>,
    pub repeats: usize,
    pub selection: SelectionConfig,
}

impl BenchConfig {
    pub fn new(n_grid: Vec<usize>, k: usize, method: BenchMethod, seed: u64) -> Self {
        Self {
            n_grid,
            k,
            method,
            seed,
            threads: 1,
            graph_kind: GraphKind::Chain,
            kff_max_n: 1000,
            budget_seconds: None,
            repeats: 3,
            selection: SelectionConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub method: &'static str,
    pub threads: usize,
    /// `None` when the run was skipped.
    pub seconds: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    pub fn is_truncated(&self) -> bool {
        self.rows.iter().any(|r| r.seconds.is_none())
    }

    pub fn seconds(&self, n: usize, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.method == method)
            .and_then(|r| r.seconds)
    }

    pub fn to_csv(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for BenchTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n,k,method,threads,seconds,seed")?;
        for r in &self.rows {
            let secs = r.seconds.map_or_else(|| "NA".to_string(), |s| format!("{s:.6}"));
            writeln!(f, "{},{},{},{},{},{}", r.n, r.k, r.method, r.threads, secs, r.seed)?;
        }
        Ok(())
    }
}

/// Parses `start:stop:step` (inclusive stop).
pub fn parse_n_grid(spec: &str) -> Result<Vec<usize>> {
    let bad = || Error::InvalidConfig(format!("n grid `{spec}` is not start:stop:step"));
    let parts: Vec<usize> = spec
        .split(':')
        .map(|s| s.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [start, stop, step] = parts[..] else {
        return Err(bad());
    };
    if step == 0 || start == 0 || stop < start {
        return Err(bad());
    }
    Ok((start..=stop).step_by(step).collect())
}

/// Times full selection (eigendecomposition included) from graph and data.
pub fn time_selection(sim: &Simulation, method: &str, cfg: &SelectionConfig) -> Result<f64> {
    let h = build_precision(&sim.graph);
    let start = Instant::now();
    let basis = decompose(&h)?;
    match method {
        "fast" => enumerate_and_score(&basis, &sim.dataset, cfg)?,
        _ => kff_path_score_with_basis(&basis, &sim.dataset, cfg)?,
    };
    Ok(start.elapsed().as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) }
}

/// For each `n`: simulate once, then per method one discarded warm-up and
/// the median of `repeats` timed runs.
pub fn run_benchmark(cfg: &BenchConfig) -> Result<BenchTable> {
    if cfg.repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be positive".into()));
    }
    if cfg.n_grid.is_empty() {
        return Err(Error::InvalidConfig("empty n grid".into()));
    }
    par::run_with_threads(cfg.threads, || {
        let threads = par::current_threads();
        let mut rows = Vec::new();
        let mut spent = [0.0f64; 2];
        for &n in &cfg.n_grid {
            let mut sim_cfg = SimConfig::standard(n, cfg.k, cfg.seed);
            sim_cfg.graph_kind = cfg.graph_kind.clone();
            let sim = simulate_dataset(&sim_cfg)?;
            for &method in cfg.method.methods() {
                let slot = usize::from(method == "kff");
                let over_budget = cfg.budget_seconds.is_some_and(|b| spent[slot] > b);
                let skip = over_budget || (method == "kff" && n > cfg.kff_max_n);
                let seconds = if skip {
                    None
                } else {
                    let warm = time_selection(&sim, method, &cfg.selection)?;
                    let times = (0..cfg.repeats)
                        .map(|_| time_selection(&sim, method, &cfg.selection))
                        .collect::<Result<Vec<_>>>()?;
                    spent[slot] += warm + times.iter().sum::<f64>();
                    Some(median(times))
                };
                rows.push(BenchRow {
                    n,
                    k: cfg.k,
                    method,
                    threads,
                    seconds,
                    seed: cfg.seed,
                });
            }
        }
        Ok(BenchTable { rows })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_sums_to_zero_and_is_reproducible() {
        let cfg = SimConfig::standard(80, 3, 11);
        let a = simulate_dataset(&cfg).unwrap();
        let norm = a.truth.phi.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(a.truth.phi.iter().sum::<f64>().abs() <= 1e-9 * norm);
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.dataset.y(), b.dataset.y());
        assert_eq!(a.dataset.to_csv("y").unwrap(), b.dataset.to_csv("y").unwrap());
        for j in 1..=3 {
            let s: f64 = (0..80).map(|i| a.dataset.x()[(i, j)]).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn field_vanishes_for_huge_tau() {
        let basis = decompose(&build_precision(&NeighborhoodGraph::chain(50).unwrap())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut norms: Vec<f64> = (0..100)
            .map(|_| {
                let phi = draw_field(&basis, 1e8, 1.0, &mut rng);
                phi.iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        norms.sort_by(f64::total_cmp);
        assert!(norms[50] < 1e-3 * (50f64).sqrt());
    }

    #[test]
    fn field_covariance_matches_pseudo_inverse() {
        let n = 10;
        let (tau, sigma2) = (0.5, 2.0);
        let basis = decompose(&build_precision(&NeighborhoodGraph::chain(n).unwrap())).unwrap();
        let h_plus = basis.h_plus();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reps = 20000;
        let mut cov = vec![0.0; n * n];
        for _ in 0..reps {
            let phi = draw_field(&basis, tau, sigma2, &mut rng);
            for i in 0..n {
                for j in 0..n {
                    cov[i * n + j] += phi[i] * phi[j];
                }
            }
        }
        // A relative bound on near-zero entries is below Monte Carlo
        // resolution, so every entry gets a 4 standard-error bound and the
        // 5% relative bound applies to the dominant entries.
        let scale = sigma2 / tau;
        let max = (0..n * n).map(|e| (scale * h_plus[(e / n, e % n)]).abs()).fold(0.0, f64::max);
        for i in 0..n {
            for j in 0..n {
                let expect = scale * h_plus[(i, j)];
                let got = cov[i * n + j] / reps as f64;
                let var = scale * scale * (h_plus[(i, i)] * h_plus[(j, j)] + h_plus[(i, j)].powi(2));
                let se = (var / reps as f64).sqrt();
                assert!((got - expect).abs() < 4.0 * se, "({i},{j}): {got} vs {expect}");
                if expect.abs() > 0.05 && expect.abs() >= 0.5 * max {
                    assert!(((got - expect) / expect).abs() < 0.05, "({i},{j}): {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn response_variance_matches_model() {
        // Var(y_i | truth mean) = sigma2 (1 + H+_ii / tau), averaged over sites.
        let n = 12;
        let (tau, sigma2) = (0.8, 1.5);
        let graph = NeighborhoodGraph::chain(n).unwrap();
        let basis = decompose(&build_precision(&graph)).unwrap();
        let h_plus = basis.h_plus();
        let expect = sigma2 * (1.0 + (0..n).map(|i| h_plus[(i, i)]).sum::<f64>() / (n as f64 * tau));
        let reps = 4000;
        let mut acc = 0.0;
        for seed in 0..reps {
            let cfg = SimConfig {
                n,
                graph_kind: GraphKind::Chain,
                tau,
                sigma2,
                beta: vec![0.0, 0.0],
                k: 1,
                seed,
            };
            let sim = simulate_on(&cfg, graph.clone(), basis.clone()).unwrap();
            acc += sim.dataset.y().iter().map(|v| v * v).sum::<f64>() / n as f64;
        }
        let got = acc / reps as f64;
        assert!(((got - expect) / expect).abs() < 0.03, "{got} vs {expect}");
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimConfig::standard(50, 5, 1);
        cfg.beta.pop();
        assert!(matches!(simulate_dataset(&cfg), Err(Error::InvalidConfig(_))));
        let mut cfg = SimConfig::standard(50, 5, 1);
        cfg.tau = 0.0;
        assert!(simulate_dataset(&cfg).is_err());
    }

    #[test]
    fn n_grid_parsing() {
        assert_eq!(parse_n_grid("100:500:100").unwrap(), vec![100, 200, 300, 400, 500]);
        assert_eq!(parse_n_grid("10:25:10").unwrap(), vec![10, 20]);
        assert!(parse_n_grid("10:5:1").is_err());
        assert!(parse_n_grid("10:20").is_err());
        assert!(parse_n_grid("a:b:c").is_err());
    }

    #[test]
    fn benchmark_table_shape_and_truncation() {
        let mut cfg = BenchConfig::new(vec![20, 30], 2, BenchMethod::Both, 4);
        cfg.kff_max_n = 20;
        cfg.repeats = 1;
        let table = run_benchmark(&cfg).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert!(table.is_truncated());
        assert!(table.seconds(30, "kff").is_none());
        assert!(table.seconds(30, "fast").is_some());
        let csv = table.to_csv();
        assert!(csv.starts_with("n,k,method,threads,seconds,seed\n"));
        assert!(csv.contains("30,2,kff,1,NA,4"));
    }
}

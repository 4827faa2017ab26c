//! Marginal reference prior for the ICAR precision ratio tau, unnormalized
//! and in log scale.
//!
//! Three evaluators compute the same function:
//!
//! * [`TracePrior`] works in the spectral domain with only `p x p` systems,
//!   `O(n p^2)` per evaluation. This is the production path.
//! * [`EigenPrior`] needs the eigenvalues `lambda` of `M*' H+ M*`, an
//!   `O(n^3)` computation per model.
//! * [`WOraclePrior`] builds the `n x n` matrices directly. Test use only.
//!
//! All three reduce to `log pi(tau) = -log tau + 1/2 log V(tau)` where `V` is
//! the sum of squared deviations of `h_j = lambda_j / (tau + lambda_j)` (or
//! equivalently of `1 - h_j`) about their mean. Whichever of the two is small
//! is used so the deviations are computed without cancellation.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::quadrature::{adaptive_quadrature, QuadConfig};
use crate::smallmat::{trace, trace_sym_product, Cholesky};
use crate::spectral::{projection_eigenvalues, SpectralBasis, SpectralData};

/// Bracket values in `(-NEGATIVE_SLACK, 0]` are treated as exact zeros.
const NEGATIVE_SLACK: f64 = 1e-12;

pub trait LogTauPrior: Sync {
    /// `log pi(tau)` up to an additive constant.
    fn log_prior(&self, tau: f64) -> Result<f64>;

    /// Density of `psi = log tau`: `psi + log pi(e^psi)`.
    fn log_prior_psi(&self, psi: f64) -> Result<f64> {
        Ok(psi + self.log_prior(psi.exp())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorForm {
    Trace,
    Eigen,
    WOracle,
}

/// `-log tau + 1/2 log v`, where `v` is a sum of squared deviations and
/// `bracket` is the same quantity on the scale of the printed formula.
fn finish(tau: f64, v: f64, bracket: f64) -> Result<f64> {
    if bracket > 0.0 && v > 0.0 {
        Ok(-tau.ln() + 0.5 * v.ln())
    } else if bracket > -NEGATIVE_SLACK {
        Ok(f64::NEG_INFINITY)
    } else {
        Err(Error::DegeneratePrior { tau, bracket })
    }
}

/// Trace-form evaluator over a model's rotated design.
#[derive(Debug, Clone)]
pub struct TracePrior<'a> {
    design: ModelDesign<'a>,
    d_plus: &'a [f64],
    fault: f64,
}

impl<'a> TracePrior<'a> {
    pub fn new(design: ModelDesign<'a>, basis: &'a SpectralBasis) -> Self {
        Self {
            design,
            d_plus: basis.d_plus(),
            fault: 0.0,
        }
    }

    /// Testing hook: scales the `tr(Q01^{-1} Q23)`-type term by `1 + eps`.
    pub fn with_fault(mut self, eps: f64) -> Self {
        self.fault = eps;
        self
    }

    pub fn design(&self) -> &ModelDesign<'a> {
        &self.design
    }

    pub fn d_plus(&self) -> &'a [f64] {
        self.d_plus
    }

    /// Evaluates with `b(tau)` and the factor of `Q01` already in hand.
    pub fn log_prior_with(&self, tau: f64, b: &[f64], q01: &Cholesky) -> Result<f64> {
        let v = self.deviation_sum(tau, b, q01);
        finish(tau, v, tau * tau * v)
    }

    /// With `F = D+ B` and `S = B^{1/2} Z`, the bracket is
    /// `||Pi (F - cI) Pi||_F^2` for `Pi = I - S (S'S)^{-1} S'` and
    /// `c = tr(Pi F Pi) / (n - p)`. Since `F = tau * diag(u)` and
    /// `u = 1 - b`, this equals `tau^2` times the same expression in `u` or `b`.
    fn deviation_sum(&self, tau: f64, b: &[f64], q01: &Cholesky) -> f64 {
        let md = &self.design;
        let m = md.rows();
        let r = (md.n() - md.p_c()) as f64;
        let u: Vec<f64> = self.d_plus[..m].iter().map(|&dp| dp / (tau + dp)).collect();
        let h = if b.iter().sum::<f64>() < u.iter().sum::<f64>() {
            b.to_vec()
        } else {
            u
        };
        let bh: Vec<f64> = b.iter().zip(&h).map(|(x, y)| x * y).collect();
        let c = (h.iter().sum::<f64>() - q01.trace_solve(&md.gram(&bh))) / r;
        let g: Vec<f64> = h.iter().map(|x| x - c).collect();
        let bg: Vec<f64> = b.iter().zip(&g).map(|(x, y)| x * y).collect();
        let bg2: Vec<f64> = bg.iter().zip(&g).map(|(x, y)| x * y).collect();
        let cross = q01.trace_solve(&md.gram(&bg2));
        let w = q01.whiten(&md.gram(&bg));
        g.iter().map(|x| x * x).sum::<f64>() - 2.0 * (1.0 + self.fault) * cross
            + w.iter().map(|x| x * x).sum::<f64>()
    }

    /// The five traces of the printed trace form, on this design.
    pub fn trace_terms(&self, tau: f64) -> Result<TraceTerms> {
        let md = &self.design;
        let b = md.b_vector(self.d_plus, tau);
        let q01 = md.q01(&b)?;
        let dp = &self.d_plus[..md.rows()];
        let f: Vec<f64> = dp.iter().zip(&b).map(|(x, y)| x * y).collect();
        let w12: Vec<f64> = f.iter().zip(&b).map(|(x, y)| x * y).collect();
        let w23: Vec<f64> = w12.iter().zip(&f).map(|(x, y)| x * y).collect();
        let q12 = q01.whiten(&md.gram(&w12));
        Ok(TraceTerms {
            tr_db: f.iter().sum(),
            tr_db2: f.iter().map(|x| x * x).sum(),
            tr_q12: trace(&q12, md.cols().len()),
            tr_q12_sq: trace_sym_product(&q12, &q12),
            tr_q23: q01.trace_solve(&md.gram(&w23)),
        })
    }

    /// Literal evaluation of the printed trace form from [`TraceTerms`]; it
    /// loses accuracy where those traces nearly cancel.
    pub fn log_prior_raw(&self, tau: f64) -> Result<f64> {
        let t = self.trace_terms(tau)?;
        let r = (self.design.n() - self.design.p_c()) as f64;
        let bracket = t.tr_db2 + t.tr_q12_sq - 2.0 * (1.0 + self.fault) * t.tr_q23
            - (t.tr_q12 - t.tr_db).powi(2) / r;
        if bracket > 0.0 {
            Ok(-2.0 * tau.ln() + 0.5 * bracket.ln())
        } else if bracket > -NEGATIVE_SLACK {
            Ok(f64::NEG_INFINITY)
        } else {
            Err(Error::DegeneratePrior { tau, bracket })
        }
    }
}

impl LogTauPrior for TracePrior<'_> {
    fn log_prior(&self, tau: f64) -> Result<f64> {
        let b = self.design.b_vector(self.d_plus, tau);
        let q01 = self.design.q01(&b)?;
        self.log_prior_with(tau, &b, &q01)
    }
}

/// `tr(D+B)`, `tr((D+B)^2)`, `tr(Q01^{-1}Q12)`, `tr((Q01^{-1}Q12)^2)` and
/// `tr(Q01^{-1}Q23)` with `Q_ij = X~'(D+)^i B^j X~`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceTerms {
    pub tr_db: f64,
    pub tr_db2: f64,
    pub tr_q12: f64,
    pub tr_q12_sq: f64,
    pub tr_q23: f64,
}

/// Eigenvalue-form evaluator.
#[derive(Debug, Clone)]
pub struct EigenPrior {
    lambda: Vec<f64>,
}

impl EigenPrior {
    /// `lambda` are the `n - p_c` eigenvalues of `M*' H+ M*`.
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        let (lo, hi) = lambda
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        if lambda.is_empty() || lo < -1e-10 * hi.abs().max(1e-300) {
            return Err(Error::Numerical("projection eigenvalues must be nonnegative".into()));
        }
        if hi - lo <= 1e-14 * hi {
            return Err(Error::Numerical(
                "all projection eigenvalues are equal, so the prior vanishes for every tau".into(),
            ));
        }
        Ok(Self {
            lambda: lambda.into_iter().map(|x| x.max(0.0)).collect(),
        })
    }

    pub fn from_design(basis: &SpectralBasis, x_c: &Mat<f64>) -> Result<Self> {
        Self::new(projection_eigenvalues(basis, x_c)?)
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    /// `sum (h_j - mean h)^2`
    pub fn deviation_sum(&self, tau: f64) -> f64 {
        let u: Vec<f64> = self.lambda.iter().map(|&l| l / (tau + l)).collect();
        let v: Vec<f64> = self.lambda.iter().map(|&l| tau / (tau + l)).collect();
        let h = if v.iter().sum::<f64>() < u.iter().sum::<f64>() { v } else { u };
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        h.iter().map(|x| (x - mean) * (x - mean)).sum()
    }
}

impl LogTauPrior for EigenPrior {
    fn log_prior(&self, tau: f64) -> Result<f64> {
        let v = self.deviation_sum(tau);
        finish(tau, v, v)
    }
}

/// Dense construction from `Sigma = I + H+/tau` and
/// `W = (dSigma/dtau) Sigma^{-1} P_Sigma`.
#[derive(Debug, Clone)]
pub struct WOraclePrior {
    p: Mat<f64>,
    d_plus: Vec<f64>,
    x: Mat<f64>,
}

impl WOraclePrior {
    pub fn new(basis: &SpectralBasis, x_c: &Mat<f64>) -> Result<Self> {
        if x_c.nrows() != basis.n() || x_c.ncols() >= basis.n() {
            return Err(Error::Dimension("design does not fit the basis".into()));
        }
        Ok(Self {
            p: basis.p().clone(),
            d_plus: basis.d_plus().to_vec(),
            x: x_c.clone(),
        })
    }

    fn n(&self) -> usize {
        self.p.nrows()
    }

    fn spectral(&self, diag: &[f64]) -> Mat<f64> {
        let n = self.n();
        let scaled = Mat::from_fn(n, n, |i, j| self.p[(i, j)] * diag[j]);
        &scaled * self.p.transpose()
    }

    /// `Sigma^{-1/2}` is `P B^{1/2} P'`; `Pi` projects off `Sigma^{-1/2} X`.
    fn projector(&self, b: &[f64]) -> Result<Mat<f64>> {
        let n = self.n();
        let sqrt_b: Vec<f64> = b.iter().map(|v| v.sqrt()).collect();
        let z = self.spectral(&sqrt_b) * &self.x;
        let q = z.qr().compute_thin_Q();
        let qqt = &q * q.transpose();
        Ok(Mat::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - qqt[(i, j)]))
    }

    /// `tr(W^2) - tr(W)^2 / (n - p)` scaled by `tau^2`, via the symmetric
    /// similar matrix `Pi Sigma^{-1/2} dSigma Sigma^{-1/2} Pi`.
    pub fn deviation_sum(&self, tau: f64) -> Result<f64> {
        let n = self.n();
        let b: Vec<f64> = self.d_plus.iter().map(|&dp| tau / (tau + dp)).collect();
        let u: Vec<f64> = self.d_plus.iter().map(|&dp| dp / (tau + dp)).collect();
        let h = if b.iter().sum::<f64>() < u.iter().sum::<f64>() { b.clone() } else { u };
        let pi = self.projector(&b)?;
        let m = &pi * self.spectral(&h) * &pi;
        let r = (n - self.x.ncols()) as f64;
        let c = (0..n).map(|i| m[(i, i)]).sum::<f64>() / r;
        let mut s = 0.0;
        for j in 0..n {
            for i in 0..n {
                let e = m[(i, j)] - c * pi[(i, j)];
                s += e * e;
            }
        }
        Ok(s)
    }

    /// `tr(W)` and `tr(W^2)` straight from the definition.
    pub fn raw_traces(&self, tau: f64) -> Result<(f64, f64)> {
        let n = self.n();
        let pc = self.x.ncols();
        let b: Vec<f64> = self.d_plus.iter().map(|&dp| tau / (tau + dp)).collect();
        let sigma_inv = self.spectral(&b);
        let h_plus = self.spectral(&self.d_plus);
        let sx = &sigma_inv * &self.x;
        let xsx = self.x.transpose() * &sx;
        let g: Vec<f64> = (0..pc * pc).map(|k| xsx[(k / pc, k % pc)]).collect();
        let inv = Cholesky::new(&g, pc)
            .ok_or_else(|| Error::Numerical("X' Sigma^{-1} X is singular".into()))?
            .inverse();
        let inv = Mat::from_fn(pc, pc, |i, j| inv[i * pc + j]);
        let hat = &self.x * inv * sx.transpose();
        let p_sigma = Mat::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - hat[(i, j)]);
        let w = (h_plus * sigma_inv * p_sigma) * (-1.0 / (tau * tau));
        let w2 = &w * &w;
        Ok((
            (0..n).map(|i| w[(i, i)]).sum(),
            (0..n).map(|i| w2[(i, i)]).sum(),
        ))
    }
}

impl LogTauPrior for WOraclePrior {
    fn log_prior(&self, tau: f64) -> Result<f64> {
        let v = self.deviation_sum(tau)?;
        finish(tau, v, v / (tau * tau))
    }
}

/// A prior evaluator of any of the three forms.
#[derive(Debug, Clone)]
pub enum TauPriorEvaluator<'a> {
    Trace(TracePrior<'a>),
    Eigen(EigenPrior),
    WOracle(WOraclePrior),
}

impl<'a> TauPriorEvaluator<'a> {
    /// Evaluator for the model using columns `columns` of the rotated design.
    pub fn new(
        form: PriorForm,
        basis: &'a SpectralBasis,
        sd: &'a SpectralData,
        columns: &[usize],
    ) -> Result<Self> {
        match form {
            PriorForm::Trace => Ok(Self::Trace(TracePrior::new(
                ModelDesign::new(sd, columns)?,
                basis,
            ))),
            PriorForm::Eigen => Ok(Self::Eigen(EigenPrior::from_design(
                basis,
                &original_design(basis, sd, columns),
            )?)),
            PriorForm::WOracle => Ok(Self::WOracle(WOraclePrior::new(
                basis,
                &original_design(basis, sd, columns),
            )?)),
        }
    }

    pub fn form(&self) -> PriorForm {
        match self {
            Self::Trace(_) => PriorForm::Trace,
            Self::Eigen(_) => PriorForm::Eigen,
            Self::WOracle(_) => PriorForm::WOracle,
        }
    }
}

impl LogTauPrior for TauPriorEvaluator<'_> {
    fn log_prior(&self, tau: f64) -> Result<f64> {
        match self {
            Self::Trace(p) => p.log_prior(tau),
            Self::Eigen(p) => p.log_prior(tau),
            Self::WOracle(p) => p.log_prior(tau),
        }
    }
}

/// `X_c = P X~_c`
pub fn original_design(basis: &SpectralBasis, sd: &SpectralData, columns: &[usize]) -> Mat<f64> {
    let n = basis.n();
    let xt = Mat::from_fn(n, columns.len(), |i, j| sd.x_col(columns[j])[i]);
    basis.p() * xt
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct T1T2 {
    pub t1_lambda: f64,
    pub t2_lambda: f64,
    pub t1_closed: f64,
    pub t2_closed: f64,
    pub pass: bool,
}

/// `T1 = sum lambda/(tau+lambda)` and `T2 = sum (lambda/(tau+lambda))^2`,
/// from the eigenvalues and from the closed forms in the spectral traces.
pub fn t1_t2_identities(basis: &SpectralBasis, x_c: &Mat<f64>, tau: f64) -> Result<T1T2> {
    let lambda = projection_eigenvalues(basis, x_c)?;
    let t1_lambda: f64 = lambda.iter().map(|&l| l / (tau + l)).sum();
    let t2_lambda: f64 = lambda.iter().map(|&l| (l / (tau + l)).powi(2)).sum();
    let y = vec![0.0; basis.n()];
    let sd = SpectralData::from_matrix(basis, &y, x_c)?;
    let columns: Vec<usize> = (0..x_c.ncols()).collect();
    let t = TracePrior::new(ModelDesign::new(&sd, &columns)?, basis).trace_terms(tau)?;
    let t1_closed = (t.tr_db - t.tr_q12) / tau;
    let t2_closed = (t.tr_db2 + t.tr_q12_sq - 2.0 * t.tr_q23) / (tau * tau);
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
    Ok(T1T2 {
        t1_lambda,
        t2_lambda,
        t1_closed,
        t2_closed,
        pass: close(t1_lambda, t1_closed) && close(t2_lambda, t2_closed),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Properness {
    /// `log` of the integral of the unnormalized prior over `(0, inf)`.
    pub log_mass: f64,
    pub mass: f64,
    pub converged: bool,
    pub evaluations: usize,
}

/// Integrates the unnormalized prior over `(0, inf)` on the `psi` scale,
/// expanding until tail increments fall below `1e-8` of the mass.
pub fn check_properness(ev: &impl LogTauPrior) -> Properness {
    let cfg = QuadConfig {
        tail_tol: 1e-8,
        ..QuadConfig::default()
    };
    match adaptive_quadrature(|psi| ev.log_prior_psi(psi), &cfg) {
        Ok((log_mass, d)) => Properness {
            log_mass,
            mass: log_mass.exp(),
            converged: log_mass.is_finite(),
            evaluations: d.evaluations,
        },
        Err(_) => Properness {
            log_mass: f64::NAN,
            mass: f64::NAN,
            converged: false,
            evaluations: 0,
        },
    }
}

/// Random instances for the three-way agreement sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub instances: usize,
    /// Instance `i` uses `n_values[i % len]` nodes.
    pub n_values: Vec<usize>,
    /// Inclusive range of `p_c`, capped at `n - 2`.
    pub p_range: (usize, usize),
    pub tau_range: (f64, f64),
    pub tau_points: usize,
    pub seed: u64,
    /// Fault injected into the trace form (0 for none).
    pub fault: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            instances: 50,
            n_values: vec![10, 30, 60],
            p_range: (1, 5),
            tau_range: (1e-4, 1e4),
            tau_points: 25,
            seed: 0,
            fault: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub instance: usize,
    pub n: usize,
    pub p_c: usize,
    pub tau: f64,
    /// Log prior from the trace, eigenvalue and `W` forms.
    pub log_prior: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    /// Largest pairwise `|pi_a / pi_b - 1|` over all points.
    pub max_rel: f64,
    pub worst: Option<SweepPoint>,
    pub points: usize,
}

impl SweepReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel <= tol
    }
}

/// Evaluates all three forms on random connected graphs and designs over a
/// log grid of `tau`.
pub fn equivalence_sweep(cfg: &SweepConfig) -> Result<SweepReport> {
    use rand::{Rng, SeedableRng};

    if cfg.n_values.is_empty() || cfg.n_values.iter().any(|&n| n < 3) {
        return Err(Error::InvalidConfig("sweep sizes must be at least 3".into()));
    }
    let (p_lo, p_hi) = cfg.p_range;
    if p_lo == 0 || p_hi < p_lo {
        return Err(Error::InvalidConfig(format!("bad p_c range {p_lo}..={p_hi}")));
    }
    let (t_lo, t_hi) = cfg.tau_range;
    if !(t_lo > 0.0 && t_hi >= t_lo) || cfg.tau_points == 0 {
        return Err(Error::InvalidConfig("bad tau grid".into()));
    }
    let taus: Vec<f64> = (0..cfg.tau_points)
        .map(|i| {
            let f = if cfg.tau_points == 1 { 0.0 } else { i as f64 / (cfg.tau_points - 1) as f64 };
            (t_lo.ln() + f * (t_hi.ln() - t_lo.ln())).exp()
        })
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = SweepReport {
        max_rel: 0.0,
        worst: None,
        points: 0,
    };
    for instance in 0..cfg.instances {
        let n = cfg.n_values[instance % cfg.n_values.len()];
        let p_c = rng.random_range(p_lo..=p_hi).min(n - 2).max(1);
        let graph = crate::sim::random_graph(n, &mut rng)?;
        let basis = crate::spectral::decompose(&crate::graph::build_precision(&graph))?;
        let x = crate::sim::random_design(n, p_c, &mut rng);
        let sd = SpectralData::from_matrix(&basis, &vec![0.0; n], &x)?;
        let cols: Vec<usize> = (0..p_c).collect();
        let trace_form = TracePrior::new(ModelDesign::new(&sd, &cols)?, &basis).with_fault(cfg.fault);
        let eigen = EigenPrior::from_design(&basis, &x)?;
        let oracle = WOraclePrior::new(&basis, &x)?;
        for &tau in &taus {
            let v = [
                trace_form.log_prior(tau)?,
                eigen.log_prior(tau)?,
                oracle.log_prior(tau)?,
            ];
            let rel = [(0, 1), (0, 2), (1, 2)]
                .iter()
                .map(|&(a, b)| (v[a] - v[b]).exp_m1().abs())
                .fold(0.0, f64::max);
            report.points += 1;
            if !(rel <= report.max_rel) {
                report.max_rel = rel;
                report.worst = Some(SweepPoint {
                    instance,
                    n,
                    p_c,
                    tau,
                    log_prior: v,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_precision, NeighborhoodGraph};
    use crate::spectral::decompose;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_basis(n: usize, seed: u64) -> SpectralBasis {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize, f64)> = (1..n)
            .map(|i| (rng.random_range(0..i), i, rng.random_range(0.5..2.0)))
            .collect();
        for _ in 0..n / 2 {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j && !edges.iter().any(|e| (e.0.min(e.1), e.0.max(e.1)) == (i.min(j), i.max(j))) {
                edges.push((i, j, 1.0));
            }
        }
        decompose(&build_precision(&NeighborhoodGraph::new(n, edges).unwrap())).unwrap()
    }

    fn design(n: usize, pc: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_fn(n, pc, |_, j| if j == 0 { 1.0 } else { rng.random_range(-1.0..1.0) })
    }

    fn three(basis: &SpectralBasis, x: &Mat<f64>, tau: f64) -> (f64, f64, f64) {
        let y = vec![0.0; basis.n()];
        let sd = SpectralData::from_matrix(basis, &y, x).unwrap();
        let cols: Vec<usize> = (0..x.ncols()).collect();
        let t = TracePrior::new(ModelDesign::new(&sd, &cols).unwrap(), basis);
        let e = EigenPrior::from_design(basis, x).unwrap();
        let w = WOraclePrior::new(basis, x).unwrap();
        (
            t.log_prior(tau).unwrap(),
            e.log_prior(tau).unwrap(),
            w.log_prior(tau).unwrap(),
        )
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    /// Relative difference of two densities given in log scale.
    fn rel_log(a: f64, b: f64) -> f64 {
        (a - b).exp_m1().abs()
    }

    #[test]
    fn b_vector_on_three_chain() {
        let basis = SpectralBasis::path(3).unwrap();
        let y = [0.0; 3];
        let x = Mat::from_fn(3, 1, |_, _| 1.0);
        let sd = SpectralData::from_matrix(&basis, &y, &x).unwrap();
        let full = ModelDesign::from_columns(sd.y_t(), vec![sd.x_col(0)]).unwrap();
        // d = (3, 1, 0); the deflated design keeps the first two rows.
        let b = full.b_vector(basis.d_plus(), 1.0);
        assert!((b[0] - 0.75).abs() < 1e-15 && (b[1] - 0.5).abs() < 1e-15);
        let all: Vec<f64> = basis.d_plus().iter().map(|&dp| 1.0 / (1.0 + dp)).collect();
        assert_eq!(all[2], 1.0);
    }

    #[test]
    fn intercept_only_trace_equals_eigen() {
        for n in [5usize, 12, 30] {
            let basis = random_basis(n, n as u64);
            let x = design(n, 1, 0);
            for tau in [1e-3, 0.2, 1.0, 7.0, 1e3] {
                let (t, e, w) = three(&basis, &x, tau);
                assert!(rel_log(t, e) < 1e-10, "n {n} tau {tau}: {t} vs {e}");
                assert!(rel_log(t, w) < 1e-10, "n {n} tau {tau}: {t} vs {w}");
            }
        }
    }

    #[test]
    fn raw_trace_form_matches_stable_form_at_moderate_tau() {
        let basis = random_basis(20, 4);
        let x = design(20, 3, 5);
        let y = vec![0.0; 20];
        let sd = SpectralData::from_matrix(&basis, &y, &x).unwrap();
        let t = TracePrior::new(ModelDesign::new(&sd, &[0, 1, 2]).unwrap(), &basis);
        for tau in [0.1, 1.0, 10.0] {
            assert!(rel_log(t.log_prior(tau).unwrap(), t.log_prior_raw(tau).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn w_oracle_trace_of_w() {
        let basis = random_basis(15, 8);
        let x = design(15, 3, 9);
        let w = WOraclePrior::new(&basis, &x).unwrap();
        let y = vec![0.0; 15];
        let sd = SpectralData::from_matrix(&basis, &y, &x).unwrap();
        let t = TracePrior::new(ModelDesign::new(&sd, &[0, 1, 2]).unwrap(), &basis);
        for tau in [0.3, 1.0, 4.0] {
            let (tr_w, tr_w2) = w.raw_traces(tau).unwrap();
            let terms = t.trace_terms(tau).unwrap();
            let expected = -(terms.tr_db - terms.tr_q12) / (tau * tau);
            assert!(rel(tr_w, expected) < 1e-10, "{tr_w} vs {expected}");
            // The symmetric rearrangement reproduces the raw bracket.
            let raw = tr_w2 - tr_w * tr_w / 12.0;
            let stable = w.deviation_sum(tau).unwrap() / (tau * tau);
            assert!(rel(raw, stable) < 1e-9);
        }
    }

    #[test]
    fn designs_without_intercept_agree() {
        let basis = random_basis(18, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = Mat::from_fn(18, 2, |_, _| rng.random_range(-1.0..1.0));
        for tau in [0.05, 1.0, 20.0] {
            let (t, e, w) = three(&basis, &x, tau);
            assert!(rel_log(t, e) < 1e-9 && rel_log(t, w) < 1e-9, "{t} {e} {w}");
        }
    }

    #[test]
    fn constant_spectrum_is_rejected() {
        assert!(EigenPrior::new(vec![2.0; 5]).is_err());
        // A single lambda is the degenerate n - p = 1 case.
        assert!(EigenPrior::new(vec![2.0]).is_err());
    }

    #[test]
    fn negative_bracket_beyond_slack_is_an_error() {
        assert!(matches!(finish(1.0, -1.0, -1.0), Err(Error::DegeneratePrior { .. })));
        assert_eq!(finish(1.0, -1e-13, -1e-13).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn eigen_form_decays_for_large_tau() {
        let e = EigenPrior::new(vec![3.0, 1.0, 0.5, 0.2]).unwrap();
        let mut last = f64::INFINITY;
        for k in 0..30 {
            let tau = 30.0 * 1.5f64.powi(k);
            let v = e.log_prior(tau).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn psi_reparameterization() {
        let e = EigenPrior::new(vec![3.0, 1.0, 0.5, 0.2]).unwrap();
        assert_eq!(e.log_prior_psi(0.0).unwrap(), e.log_prior(1.0).unwrap());
        for psi in [-5.0, 0.0, 5.0] {
            let lhs = e.log_prior_psi(psi).unwrap() - psi;
            assert!((lhs - e.log_prior(f64::exp(psi)).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn psi_mass_matches_tau_mass() {
        // Integral of pi(tau) d tau on the tau scale by a separate rule:
        // substitute tau = t/(1-t) on (0, 1) and use composite Gauss-Legendre.
        let e = EigenPrior::new(vec![3.0, 1.0, 0.5, 0.2, 0.05]).unwrap();
        let psi_mass = check_properness(&e).mass;
        let (x5, w5) = (
            [-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664],
            [0.236_926_885_056_189, 0.478_628_670_499_366, 0.568_888_888_888_889, 0.478_628_670_499_366, 0.236_926_885_056_189],
        );
        // Grade the panels geometrically toward both ends of (0, 1).
        let edges: Vec<f64> = (-400..=400)
            .map(|k| {
                let s = k as f64 / 20.0;
                1.0 / (1.0 + (-s).exp())
            })
            .collect();
        let mut tau_mass = 0.0;
        for w in edges.windows(2) {
            let (a, b) = (w[0], w[1]);
            for (x, wt) in x5.iter().zip(w5) {
                let t = 0.5 * (a + b) + 0.5 * (b - a) * x;
                let tau = t / (1.0 - t);
                let jac = 1.0 / ((1.0 - t) * (1.0 - t));
                tau_mass += 0.5 * (b - a) * wt * e.log_prior(tau).unwrap().exp() * jac;
            }
        }
        assert!(rel(psi_mass, tau_mass) < 1e-6, "{psi_mass} vs {tau_mass}");
    }

    #[test]
    fn properness_on_chain_intercept_only() {
        let basis = SpectralBasis::path(20).unwrap();
        let x = design(20, 1, 0);
        let y = vec![0.0; 20];
        let sd = SpectralData::from_matrix(&basis, &y, &x).unwrap();
        let t = TracePrior::new(ModelDesign::new(&sd, &[0]).unwrap(), &basis);
        let e = EigenPrior::from_design(&basis, &x).unwrap();
        let (pt, pe) = (check_properness(&t), check_properness(&e));
        assert!(pt.converged && pe.converged && pt.mass.is_finite());
        assert!(rel(pt.mass, pe.mass) < 1e-6);
    }

    #[test]
    fn t1_t2_on_chain() {
        let basis = SpectralBasis::path(10).unwrap();
        let x = design(10, 2, 3);
        let r = t1_t2_identities(&basis, &x, 0.7).unwrap();
        assert!(r.pass, "{r:?}");
        let r = t1_t2_identities(&basis, &x, 1e8).unwrap();
        assert!(r.pass && r.t1_lambda > 0.0 && r.t1_lambda < 1e-6 && r.t2_lambda > 0.0);
        let x = design(10, 9, 4);
        assert!(t1_t2_identities(&basis, &x, 0.7).unwrap().pass);
    }

    #[test]
    fn fault_changes_the_value() {
        let basis = random_basis(12, 2);
        let x = design(12, 2, 3);
        let y = vec![0.0; 12];
        let sd = SpectralData::from_matrix(&basis, &y, &x).unwrap();
        let t = TracePrior::new(ModelDesign::new(&sd, &[0, 1]).unwrap(), &basis);
        let f = t.clone().with_fault(1e-3);
        assert!(rel_log(t.log_prior(1.0).unwrap(), f.log_prior(1.0).unwrap()) > 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn three_forms_agree(n in 8usize..40, pc in 1usize..5, seed in any::<u64>(), lt in -4.0f64..4.0) {
            let basis = random_basis(n, seed);
            let x = design(n, pc, seed.wrapping_add(1));
            let tau = 10f64.powf(lt);
            let (t, e, w) = three(&basis, &x, tau);
            prop_assert!(t.is_finite());
            prop_assert!(rel_log(t, e) <= 1e-8, "trace {} eigen {}", t, e);
            prop_assert!(rel_log(t, w) <= 1e-8, "trace {} w {}", t, w);
        }

        #[test]
        fn column_space_invariance(n in 8usize..30, pc in 2usize..5, seed in any::<u64>(), lt in -3.0f64..3.0) {
            let basis = random_basis(n, seed);
            let x = design(n, pc, seed.wrapping_add(7));
            let a = Mat::from_fn(pc, pc, |i, j| if i == j { 1.5 } else { 0.2 * (i as f64 - j as f64) });
            let xa = &x * &a;
            let tau = 10f64.powf(lt);
            let (t1, e1, w1) = three(&basis, &x, tau);
            let (t2, e2, w2) = three(&basis, &xa, tau);
            prop_assert!(rel_log(t1, t2) <= 1e-9);
            prop_assert!(rel_log(e1, e2) <= 1e-9);
            prop_assert!(rel_log(w1, w2) <= 1e-9);
        }
    }

    #[test]
    fn sweep_passes_and_fault_is_caught() {
        let small = SweepConfig {
            instances: 6,
            n_values: vec![10, 20],
            tau_points: 9,
            seed: 3,
            ..SweepConfig::default()
        };
        let ok = equivalence_sweep(&small).unwrap();
        assert_eq!(ok.points, 54);
        assert!(ok.passes(1e-8), "{:?}", ok.worst);
        let bad = equivalence_sweep(&SweepConfig { fault: 1e-3, ..small }).unwrap();
        assert!(!bad.passes(1e-8));
    }

    #[test]
    fn sweep_minimal_case() {
        let cfg = SweepConfig {
            instances: 1,
            n_values: vec![10],
            p_range: (1, 1),
            ..SweepConfig::default()
        };
        assert!(equivalence_sweep(&cfg).unwrap().passes(1e-8));
    }
}

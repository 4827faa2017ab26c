//! Fractional integrated likelihoods `q_c(b, y)`.
//!
//! Integrating `beta` (flat) and `sigma^2` (`1/sigma^2`) out of
//! `p(y | beta, sigma^2, tau)^a` leaves, for `p = p_c`,
//!
//! ```text
//! m_a = (2 pi)^{-na/2} (2 pi / a)^{p/2} Gamma((na - p)/2) J(a)
//! J(a) = int |Omega|^{-a/2} |X'Omega^{-1}X|^{-1/2} (a S^2 / 2)^{-(na-p)/2} pi(tau) d tau
//! ```
//!
//! and `q = m_1 / m_b`. The `tau` integral runs over `psi = log tau`.
//! Any constant factor of `pi` cancels in the ratio.

use std::collections::HashMap;
use std::sync::RwLock;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::design::{clamp_s_squared, ModelDesign};
use crate::error::{Error, Result};
use crate::graph::Dataset;
use crate::prior::{EigenPrior, LogTauPrior, TracePrior};
use crate::quadrature::{integrate, QuadConfig, QuadDiagnostics};
use crate::spectral::{ProjectionEigen, SpectralBasis};

/// `ln |Omega(tau)| = sum_{i<n} ln(1 + 1/(tau d_i))`
pub fn log_det_omega(basis: &SpectralBasis, tau: f64) -> f64 {
    let d = basis.d();
    d[..d.len() - 1].iter().map(|&di| (1.0 / (tau * di)).ln_1p()).sum()
}

/// `ln |X_c' Omega^{-1} X_c|` for a model design.
pub fn log_det_xox(md: &ModelDesign<'_>, basis: &SpectralBasis, tau: f64) -> Result<f64> {
    let b = md.b_vector(basis.d_plus(), tau);
    Ok(md.log_det_xox(&md.q01(&b)?))
}

/// `S^2(tau) = y'(Omega^{-1} - Omega^{-1}X(X'Omega^{-1}X)^{-1}X'Omega^{-1})y`
pub fn s_squared(md: &ModelDesign<'_>, basis: &SpectralBasis, tau: f64) -> Result<f64> {
    let b = md.b_vector(basis.d_plus(), tau);
    let q01 = md.q01(&b)?;
    clamp_s_squared(md.s_squared_raw(&b, &q01), md.y_norm2())
}

/// `ln |Omega|` memoized on the exact `psi` node. The quadrature lattice is
/// shared across models, so most nodes repeat.
#[derive(Debug)]
pub struct OmegaCache<'a> {
    basis: &'a SpectralBasis,
    values: RwLock<HashMap<u64, f64>>,
}

impl<'a> OmegaCache<'a> {
    pub fn new(basis: &'a SpectralBasis) -> Self {
        Self {
            basis,
            values: RwLock::new(HashMap::new()),
        }
    }

    pub fn log_det(&self, psi: f64) -> f64 {
        let key = psi.to_bits();
        if let Some(&v) = self.values.read().unwrap().get(&key) {
            return v;
        }
        // The value is a pure function of psi, so a racing insert stores
        // the same number.
        let v = log_det_omega(self.basis, psi.exp());
        self.values.write().unwrap().insert(key, v);
        v
    }

    pub fn len(&self) -> usize {
        self.values.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model-dependent quantities at one tau.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauTerms {
    pub log_det_xox: f64,
    pub s2: f64,
    pub log_prior: f64,
}

/// A spatial model's per-tau ingredients.
pub trait SpatialTerms: Sync {
    fn n(&self) -> usize;
    fn p_c(&self) -> usize;
    fn terms(&self, tau: f64, log_det_omega: f64) -> Result<TauTerms>;
}

/// Spectral-domain terms with the trace-form prior; `O(n p^2)` per tau.
#[derive(Debug, Clone)]
pub struct FastTerms<'a> {
    prior: TracePrior<'a>,
    y_norm2: f64,
}

impl<'a> FastTerms<'a> {
    pub fn new(design: ModelDesign<'a>, basis: &'a SpectralBasis) -> Self {
        Self {
            y_norm2: design.y_norm2(),
            prior: TracePrior::new(design, basis),
        }
    }
}

impl SpatialTerms for FastTerms<'_> {
    fn n(&self) -> usize {
        self.prior.design().n()
    }

    fn p_c(&self) -> usize {
        self.prior.design().p_c()
    }

    fn terms(&self, tau: f64, _log_det_omega: f64) -> Result<TauTerms> {
        let md = self.prior.design();
        let b = md.b_vector(self.prior.d_plus(), tau);
        let q01 = md.q01(&b)?;
        Ok(TauTerms {
            log_det_xox: md.log_det_xox(&q01),
            s2: clamp_s_squared(md.s_squared_raw(&b, &q01), self.y_norm2)?,
            log_prior: self.prior.log_prior_with(tau, &b, &q01)?,
        })
    }
}

/// Terms from the eigenvalues `lambda` of `M*' H+ M*` with the eigenvalue-form
/// prior. With `w = U' M*' y` and `M*'Omega M* = U (I + Lambda/tau) U'`:
/// `S^2 = sum w_j^2 tau / (tau + lambda_j)` and
/// `|X'Omega^{-1}X| = |X'X| |I + Lambda/tau| / |Omega|`.
#[derive(Debug, Clone)]
pub struct KffTerms {
    n: usize,
    p_c: usize,
    w2: Vec<f64>,
    log_det_xx: f64,
    y_norm2: f64,
    prior: EigenPrior,
}

impl KffTerms {
    pub fn new(n: usize, proj: ProjectionEigen, y_norm2: f64) -> Result<Self> {
        let w2 = proj
            .w
            .ok_or_else(|| Error::InvalidConfig("projection was computed without a response".into()))?
            .iter()
            .map(|v| v * v)
            .collect();
        Ok(Self {
            n,
            p_c: n - proj.lambda.len(),
            w2,
            log_det_xx: proj.log_det_xx,
            y_norm2,
            prior: EigenPrior::new(proj.lambda)?,
        })
    }
}

impl SpatialTerms for KffTerms {
    fn n(&self) -> usize {
        self.n
    }

    fn p_c(&self) -> usize {
        self.p_c
    }

    fn terms(&self, tau: f64, log_det_omega: f64) -> Result<TauTerms> {
        let lambda = self.prior.lambda();
        let s2: f64 = self
            .w2
            .iter()
            .zip(lambda)
            .map(|(w2, &l)| w2 * tau / (tau + l))
            .sum();
        let ldx = self.log_det_xx + lambda.iter().map(|&l| (l / tau).ln_1p()).sum::<f64>()
            - log_det_omega;
        Ok(TauTerms {
            log_det_xox: ldx,
            s2: clamp_s_squared(s2, self.y_norm2)?,
            log_prior: self.prior.log_prior(tau)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionalLikelihoodResult {
    pub log_q: f64,
    pub log_j1: f64,
    pub log_jb: f64,
    pub quad: QuadDiagnostics,
}

/// `-(n(1-b)/2) ln 2pi + (p/2) ln b + lnGamma((n-p)/2) - lnGamma((nb-p)/2)`
pub fn fbf_constant(n: usize, p_c: usize, b: f64) -> Result<f64> {
    let (nf, pf) = (n as f64, p_c as f64);
    check_fraction(n, p_c, b)?;
    Ok(-0.5 * nf * (1.0 - b) * (2.0 * std::f64::consts::PI).ln() + 0.5 * pf * b.ln()
        + libm::lgamma(0.5 * (nf - pf))
        - libm::lgamma(0.5 * (nf * b - pf)))
}

fn check_fraction(n: usize, p_c: usize, b: f64) -> Result<()> {
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::InvalidConfig(format!("training fraction {b} not in (0, 1)")));
    }
    if !(n as f64 * b > p_c as f64) {
        return Err(Error::InvalidConfig(format!(
            "training fraction {b} too small: n*b = {} must exceed p = {p_c}",
            n as f64 * b
        )));
    }
    Ok(())
}

/// Spatial-branch `log q` for any source of per-tau terms.
pub fn log_fractional_marginal_terms<T: SpatialTerms>(
    terms: &T,
    b_frac: f64,
    quad: &QuadConfig,
    omega: &OmegaCache<'_>,
) -> Result<FractionalLikelihoodResult> {
    let (n, p) = (terms.n(), terms.p_c());
    let constant = fbf_constant(n, p, b_frac)?;
    let (nf, pf) = (n as f64, p as f64);
    let r = integrate(
        |psi| {
            let tau = psi.exp();
            let lo = omega.log_det(psi);
            let t = terms.terms(tau, lo)?;
            if !(t.s2 > 0.0) {
                return Err(Error::Numerical(format!(
                    "S^2 vanishes at tau = {tau:e}: the response lies in the model column space"
                )));
            }
            let base = -0.5 * t.log_det_xox + psi + t.log_prior;
            Ok([1.0, b_frac].map(|a| {
                base - 0.5 * a * lo - 0.5 * (nf * a - pf) * (0.5 * a * t.s2).ln()
            }))
        },
        quad,
    )?;
    let [log_j1, log_jb] = r.log_integral;
    Ok(FractionalLikelihoodResult {
        log_q: constant + log_j1 - log_jb,
        log_j1,
        log_jb,
        quad: r.diagnostics,
    })
}

/// Spatial-branch `log q_c(b, y)` via the spectral path and trace-form prior.
pub fn log_fractional_marginal(
    basis: &SpectralBasis,
    design: ModelDesign<'_>,
    b_frac: f64,
    quad: &QuadConfig,
) -> Result<FractionalLikelihoodResult> {
    let omega = OmegaCache::new(basis);
    log_fractional_marginal_terms(&FastTerms::new(design, basis), b_frac, quad, &omega)
}

/// Residual sum of squares of the least-squares fit of `y` on `x`.
pub fn ols_rss(x: &Mat<f64>, y: &[f64]) -> Result<f64> {
    let n = x.nrows();
    let qr = x.qr();
    let r = qr.thin_R();
    let scale = (0..r.ncols()).map(|j| r[(j, j)].abs()).fold(0.0, f64::max);
    if (0..r.ncols()).any(|j| !(r[(j, j)].abs() > 1e-12 * scale)) {
        return Err(Error::RankDeficient("model design is not of full column rank".into()));
    }
    let q = qr.compute_thin_Q();
    let yv = Mat::from_fn(n, 1, |i, _| y[i]);
    let fit = &q * (q.transpose() * &yv);
    Ok((0..n).map(|i| (y[i] - fit[(i, 0)]).powi(2)).sum())
}

/// Independence-branch `log q_c(b, y)`: `Omega = I`, no tau integral.
pub fn log_marginal_independent(data: &Dataset, columns: &[usize], b_frac: f64) -> Result<f64> {
    let x = data.design_columns(columns);
    let s2 = ols_rss(&x, data.y())?;
    log_marginal_independent_rss(data.n(), columns.len(), s2, b_frac)
}

pub fn log_marginal_independent_rss(n: usize, p_c: usize, s2: f64, b_frac: f64) -> Result<f64> {
    let constant = fbf_constant(n, p_c, b_frac)?;
    if !(s2 > 0.0) {
        return Err(Error::Numerical(
            "residual sum of squares is zero: the response lies in the model column space".into(),
        ));
    }
    let (nf, pf) = (n as f64, p_c as f64);
    Ok(constant - 0.5 * (nf - pf) * (0.5 * s2).ln()
        + 0.5 * (nf * b_frac - pf) * (0.5 * b_frac * s2).ln())
}

/// `O(n^3)` reference computations straight from the matrix definitions,
/// independent of the eigendecomposition.
pub mod dense {
    use faer::{Mat, Side};

    use crate::error::{Error, Result};
    use crate::graph::PrecisionStructure;

    /// `H+ = (H + J/n)^{-1} - J/n` for a connected graph.
    pub fn h_plus(h: &PrecisionStructure) -> Result<Mat<f64>> {
        let n = h.n();
        let jn = 1.0 / n as f64;
        let a = Mat::from_fn(n, n, |i, j| h.matrix()[(i, j)] + jn);
        let llt = a
            .llt(Side::Lower)
            .map_err(|e| Error::Numerical(format!("H + J/n is not positive definite: {e:?}")))?;
        let l = llt.L();
        let mut inv = Mat::<f64>::identity(n, n);
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, inv.as_mut(), faer::Par::Seq);
        let inv = inv.transpose() * &inv;
        Ok(Mat::from_fn(n, n, |i, j| inv[(i, j)] - jn))
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct DenseTerms {
        pub log_det_omega: f64,
        pub log_det_xox: f64,
        pub s2: f64,
    }

    /// Cholesky `Omega = L L'`, then QR of `L^{-1} X`.
    pub fn terms(h_plus: &Mat<f64>, x: &Mat<f64>, y: &[f64], tau: f64) -> Result<DenseTerms> {
        let n = h_plus.nrows();
        let omega = Mat::from_fn(n, n, |i, j| {
            f64::from(u8::from(i == j)) + h_plus[(i, j)] / tau
        });
        let llt = omega
            .llt(Side::Lower)
            .map_err(|e| Error::Numerical(format!("Omega is not positive definite: {e:?}")))?;
        let l = llt.L();
        let log_det_omega = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
        let mut xy = Mat::from_fn(n, x.ncols() + 1, |i, j| if j < x.ncols() { x[(i, j)] } else { y[i] });
        faer::linalg::triangular_solve::solve_lower_triangular_in_place(l, xy.as_mut(), faer::Par::Seq);
        let p = x.ncols();
        let xw = Mat::from_fn(n, p, |i, j| xy[(i, j)]);
        let qr = xw.qr();
        let r = qr.thin_R();
        let log_det_xox = 2.0 * (0..p).map(|j| r[(j, j)].abs().ln()).sum::<f64>();
        let q = qr.compute_thin_Q();
        let yw = Mat::from_fn(n, 1, |i, _| xy[(i, p)]);
        let fit = &q * (q.transpose() * &yw);
        let s2 = (0..n).map(|i| (yw[(i, 0)] - fit[(i, 0)]).powi(2)).sum();
        Ok(DenseTerms {
            log_det_omega,
            log_det_xox,
            s2,
        })
    }
}

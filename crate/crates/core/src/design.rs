//! One model's rotated design, reduced for the per-tau spectral formulas.
//!
//! The last spectral coordinate belongs to the null eigenvector of `H`, where
//! `b_n(tau) = 1` for every tau while all other `b_i(tau)` shrink like `tau d_i`.
//! When the model's column space contains the constant vector (every model
//! with an intercept), that coordinate splits off exactly: `X~'B X~`
//! becomes block diagonal, its null-coordinate block is tau-free, and it adds
//! nothing to `S^2` or to any trace involving `D+`. Dropping it keeps the
//! remaining small systems well conditioned at small tau.

use crate::error::{Error, Result};
use crate::smallmat::{dot, weighted_gram, Cholesky};
use crate::spectral::SpectralData;

/// Squared residual of `e_n` after projecting onto the model column space,
/// below which the constant vector counts as contained in it.
const NULL_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone)]
pub struct ModelDesign<'a> {
    /// Leading rows in use (`n` or `n - 1`).
    rows: usize,
    cols: Vec<&'a [f64]>,
    y: &'a [f64],
    n: usize,
    p_c: usize,
    log_det_offset: f64,
}

impl<'a> ModelDesign<'a> {
    /// Model built from columns `columns` of the rotated full design.
    pub fn new(sd: &'a SpectralData, columns: &[usize]) -> Result<Self> {
        let cols: Vec<&[f64]> = columns.iter().map(|&j| sd.x_col(j)).collect();
        Self::from_columns(sd.y_t(), cols)
    }

    pub fn from_columns(y_t: &'a [f64], cols: Vec<&'a [f64]>) -> Result<Self> {
        let n = y_t.len();
        let p_c = cols.len();
        if p_c == 0 {
            return Err(Error::Dimension("model has no columns".into()));
        }
        if p_c >= n {
            return Err(Error::InvalidData(format!(
                "model needs more observations than columns (n = {n}, p = {p_c})"
            )));
        }
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::Dimension("design column length differs from n".into()));
        }
        let gram = weighted_gram(&cols, &vec![1.0; n], n);
        let chol = Cholesky::new_with_tol(&gram, p_c, 1e-12)
            .ok_or_else(|| Error::RankDeficient("model design is not of full column rank".into()))?;
        let r: Vec<f64> = cols.iter().map(|c| c[n - 1]).collect();
        let mut a = r.clone();
        chol.solve(&mut a);
        let resid2 = 1.0 - r.iter().zip(&a).map(|(x, y)| x * y).sum::<f64>();
        if resid2 > NULL_RESIDUAL_TOL {
            return Ok(Self {
                rows: n,
                cols,
                y: y_t,
                n,
                p_c,
                log_det_offset: 0.0,
            });
        }
        // Replace column m by X~a (numerically alpha e_n) and keep the others'
        // leading rows; the basis change has determinant a_m.
        let m = (0..p_c)
            .max_by(|&i, &j| a[i].abs().total_cmp(&a[j].abs()))
            .unwrap();
        let alpha: f64 = (0..p_c).map(|j| cols[j][n - 1] * a[j]).sum();
        let log_det_offset = (alpha * alpha).ln() - 2.0 * a[m].abs().ln();
        let rows = n - 1;
        let reduced = cols
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != m)
            .map(|(_, c)| &c[..rows])
            .collect();
        Ok(Self {
            rows,
            cols: reduced,
            y: &y_t[..rows],
            n,
            p_c,
            log_det_offset,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of model columns, intercept included.
    pub fn p_c(&self) -> usize {
        self.p_c
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> &[&'a [f64]] {
        &self.cols
    }

    pub fn y(&self) -> &'a [f64] {
        self.y
    }

    /// True when the null coordinate was split off.
    pub fn is_deflated(&self) -> bool {
        self.rows < self.n
    }

    /// `ln |X~'B X~| - ln |Z'B Z|` for the retained block `Z`.
    pub fn log_det_offset(&self) -> f64 {
        self.log_det_offset
    }

    /// `Z' diag(w) Z` over the retained rows.
    pub fn gram(&self, w: &[f64]) -> Vec<f64> {
        weighted_gram(&self.cols, w, self.rows)
    }

    /// `Z' diag(w) v`
    pub fn cross(&self, w: &[f64], v: &[f64]) -> Vec<f64> {
        let wv: Vec<f64> = w[..self.rows].iter().zip(v).map(|(a, b)| a * b).collect();
        self.cols.iter().map(|c| dot(&wv, &c[..self.rows])).collect()
    }

    /// Cholesky of `Q01 = Z'B Z`. An empty retained design gives a 0x0 factor.
    pub fn q01(&self, b: &[f64]) -> Result<Cholesky> {
        let q = self.cols.len();
        Cholesky::new(&self.gram(b), q)
            .ok_or_else(|| Error::Numerical("X'B X is numerically singular".into()))
    }

    /// `b_i(tau) = tau / (tau + d+_i)` on the retained rows (1 where `d+ = 0`).
    pub fn b_vector(&self, d_plus: &[f64], tau: f64) -> Vec<f64> {
        d_plus[..self.rows].iter().map(|&dp| tau / (tau + dp)).collect()
    }

    /// `ln |X_c' Omega^{-1} X_c|` given the factor of `Q01`.
    pub fn log_det_xox(&self, q01: &Cholesky) -> f64 {
        self.log_det_offset + q01.log_det()
    }

    /// Generalized residual sum of squares
    /// `y~'B y~ - y~'B Z (Z'B Z)^{-1} Z'B y~`, before any clamping.
    pub fn s_squared_raw(&self, b: &[f64], q01: &Cholesky) -> f64 {
        let by: Vec<f64> = b[..self.rows].iter().zip(self.y).map(|(a, c)| a * c).collect();
        let byy = dot(&by, &self.y[..self.rows]);
        let mut t: Vec<f64> = self.cols.iter().map(|c| dot(&by, &c[..self.rows])).collect();
        q01.forward(&mut t);
        byy - t.iter().map(|v| v * v).sum::<f64>()
    }

    /// `||y||^2`, the scale for roundoff clamping of `S^2`.
    pub fn y_norm2(&self) -> f64 {
        self.y.iter().map(|v| v * v).sum()
    }
}

/// Clamps roundoff-negative `S^2` to zero; larger negatives are errors.
pub fn clamp_s_squared(s2: f64, y_norm2: f64) -> Result<f64> {
    if s2 >= 0.0 {
        Ok(s2)
    } else if s2 >= -1e-10 * y_norm2 {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("S^2 = {s2:e} is negative")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_precision, Dataset, NeighborhoodGraph};
    use crate::spectral::{decompose, transform};

    fn setup() -> (crate::spectral::SpectralBasis, SpectralData) {
        let g = NeighborhoodGraph::grid(3, 4).unwrap();
        let basis = decompose(&build_precision(&g)).unwrap();
        let n = 12;
        let x1: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64 - 1.3).collect();
        let x2: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..n).map(|i| 0.5 * i as f64 + (i as f64 * 1.7).cos()).collect();
        let ds = Dataset::new(y, vec![x1, x2], vec!["a".into(), "b".into()]).unwrap();
        let sd = transform(&basis, &ds).unwrap();
        (basis, sd)
    }

    #[test]
    fn intercept_offset_is_log_n() {
        let (_, sd) = setup();
        let md = ModelDesign::new(&sd, &[0]).unwrap();
        assert!(md.is_deflated());
        assert!((md.log_det_offset() - (12f64).ln()).abs() < 1e-12);
        assert_eq!(md.cols().len(), 0);
    }

    #[test]
    fn deflated_and_full_forms_agree() {
        let (basis, sd) = setup();
        for cols in [vec![0, 1], vec![1, 0, 2], vec![2, 0]] {
            let md = ModelDesign::new(&sd, &cols).unwrap();
            assert!(md.is_deflated());
            let full = ModelDesign {
                rows: sd.n(),
                cols: cols.iter().map(|&j| sd.x_col(j)).collect(),
                y: sd.y_t(),
                n: sd.n(),
                p_c: cols.len(),
                log_det_offset: 0.0,
            };
            for tau in [0.05, 1.0, 30.0] {
                let b = md.b_vector(basis.d_plus(), tau);
                let bf = full.b_vector(basis.d_plus(), tau);
                let (c, cf) = (md.q01(&b).unwrap(), full.q01(&bf).unwrap());
                assert!((md.log_det_xox(&c) - full.log_det_xox(&cf)).abs() < 1e-10);
                let (s, sf) = (md.s_squared_raw(&b, &c), full.s_squared_raw(&bf, &cf));
                assert!((s - sf).abs() < 1e-10 * sf);
            }
        }
    }

    #[test]
    fn no_intercept_keeps_all_rows() {
        let (_, sd) = setup();
        let md = ModelDesign::new(&sd, &[1, 2]).unwrap();
        assert!(!md.is_deflated());
        assert_eq!(md.rows(), 12);
    }

    #[test]
    fn s_squared_clamp() {
        assert_eq!(clamp_s_squared(-1e-12, 1.0).unwrap(), 0.0);
        assert!(clamp_s_squared(-1e-6, 1.0).is_err());
        assert_eq!(clamp_s_squared(2.0, 1.0).unwrap(), 2.0);
    }
}

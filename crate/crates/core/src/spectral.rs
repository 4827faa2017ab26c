//! The one shared eigendecomposition `H = P D P'` and data rotated into it.

use std::fs;
use std::path::Path;

use faer::{Mat, Side};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{Dataset, PrecisionStructure};
use crate::smallmat::Cholesky;

/// Eigenvalues of `H` in descending order with `d[n-1] == 0` exactly, and the
/// matching orthonormal eigenvectors as the columns of `P`.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    d: Vec<f64>,
    d_plus: Vec<f64>,
    p: Mat<f64>,
}

impl SpectralBasis {
    /// Assembles a basis from precomputed parts, enforcing the null-vector
    /// and sign conventions.
    pub fn from_parts(mut d: Vec<f64>, mut p: Mat<f64>) -> Result<Self> {
        let n = d.len();
        if n < 2 {
            return Err(Error::InvalidGraph("at least two subregions are required".into()));
        }
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::Dimension(format!(
                "{n} eigenvalues but a {}x{} eigenvector matrix",
                p.nrows(),
                p.ncols()
            )));
        }
        if d.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::Eigen("eigenvalues are not in descending order".into()));
        }
        let d1 = d[0];
        if !(d1 > 0.0) {
            return Err(Error::InvalidGraph("structure matrix has no positive eigenvalue".into()));
        }
        let tol = 1e-9 * d1;
        let zeros = d.iter().filter(|&&v| v <= tol).count();
        if zeros > 1 {
            return Err(Error::Disconnected { components: zeros });
        }
        d[n - 1] = 0.0;
        // The null vector is known in closed form; use it rather than the
        // solver's approximation.
        let c = 1.0 / (n as f64).sqrt();
        for i in 0..n {
            p[(i, n - 1)] = c;
        }
        for j in 0..n - 1 {
            let first = (0..n).map(|i| p[(i, j)]).find(|v| v.abs() > 1e-10);
            if matches!(first, Some(v) if v < 0.0) {
                for i in 0..n {
                    p[(i, j)] = -p[(i, j)];
                }
            }
        }
        let d_plus = d
            .iter()
            .map(|&v| if v == 0.0 { 0.0 } else { 1.0 / v })
            .collect();
        Ok(Self { d, d_plus, p })
    }

    /// Closed-form basis of the unit-weight path graph on `n` vertices.
    pub fn path(n: usize) -> Result<Self> {
        let nf = n as f64;
        let ks: Vec<usize> = (0..n).rev().collect();
        let d = ks
            .iter()
            .map(|&k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / nf).cos())
            .collect();
        let p = Mat::from_fn(n, n, |i, j| {
            let k = ks[j];
            if k == 0 {
                1.0 / nf.sqrt()
            } else {
                (2.0 / nf).sqrt()
                    * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / nf).cos()
            }
        });
        Self::from_parts(d, p)
    }

    pub fn n(&self) -> usize {
        self.d.len()
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// `(1/d_1, ..., 1/d_{n-1}, 0)`
    pub fn d_plus(&self) -> &[f64] {
        &self.d_plus
    }

    pub fn p(&self) -> &Mat<f64> {
        &self.p
    }

    /// Dense `H+ = P D+ P'`.
    pub fn h_plus(&self) -> Mat<f64> {
        let scaled = Mat::from_fn(self.n(), self.n(), |i, j| self.p[(i, j)] * self.d_plus[j]);
        &scaled * self.p.transpose()
    }

    /// Writes the cache file for `h`.
    pub fn save_cache(&self, path: &Path, h: &PrecisionStructure) -> Result<()> {
        let n = self.n();
        let mut out = Vec::with_capacity(8 + 32 + 8 * n * (n + 1));
        out.extend_from_slice(&(n as u64).to_le_bytes());
        out.extend_from_slice(&content_hash(h));
        for v in &self.d {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for j in 0..n {
            for i in 0..n {
                out.extend_from_slice(&self.p[(i, j)].to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a cache file; `Ok(None)` when it was written for another `H`.
    pub fn load_cache(path: &Path, h: &PrecisionStructure) -> Result<Option<Self>> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 40 {
            return Err(Error::Cache(format!("{} is truncated", path.display())));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        if n != h.n() || bytes[8..40] != content_hash(h) {
            return Ok(None);
        }
        let expected = n
            .checked_mul(n + 1)
            .and_then(|m| m.checked_mul(8))
            .and_then(|m| m.checked_add(40));
        if expected != Some(bytes.len()) {
            return Err(Error::Cache(format!(
                "{} has {} bytes, expected {}",
                path.display(),
                bytes.len(),
                expected.unwrap_or(0)
            )));
        }
        let mut vals = bytes[40..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let d: Vec<f64> = vals.by_ref().take(n).collect();
        let mut p = Mat::<f64>::zeros(n, n);
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] = vals.next().unwrap();
            }
        }
        Self::from_parts(d, p).map(Some)
    }
}

fn content_hash(h: &PrecisionStructure) -> [u8; 32] {
    let digest = Sha256::digest(h.to_le_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    out
}

pub fn decompose(h: &PrecisionStructure) -> Result<SpectralBasis> {
    let n = h.n();
    if n < 2 {
        return Err(Error::InvalidGraph("at least two subregions are required".into()));
    }
    let evd = h
        .matrix()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Eigen(format!("{e:?}")))?;
    // faer returns ascending order.
    let s = evd.S();
    let u = evd.U();
    let d: Vec<f64> = (0..n).rev().map(|i| s[i]).collect();
    let p = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    SpectralBasis::from_parts(d, p)
}

/// Loads the basis from `cache` when it matches `h`, otherwise decomposes and
/// (re)writes the cache.
pub fn decompose_cached(h: &PrecisionStructure, cache: Option<&Path>) -> Result<SpectralBasis> {
    let Some(path) = cache else {
        return decompose(h);
    };
    if path.exists() {
        if let Some(b) = SpectralBasis::load_cache(path, h)? {
            return Ok(b);
        }
    }
    let b = decompose(h)?;
    b.save_cache(path, h)?;
    Ok(b)
}

/// `y~ = P'y` and the columns of `X~ = P'X` for the full design.
#[derive(Debug, Clone)]
pub struct SpectralData {
    y_t: Vec<f64>,
    x_t: Vec<Vec<f64>>,
}

impl SpectralData {
    pub fn y_t(&self) -> &[f64] {
        &self.y_t
    }

    /// Column `j` of `X~` (column 0 is the rotated intercept).
    pub fn x_col(&self, j: usize) -> &[f64] {
        &self.x_t[j]
    }

    pub fn n(&self) -> usize {
        self.y_t.len()
    }

    pub fn p(&self) -> usize {
        self.x_t.len()
    }
}

pub fn transform(basis: &SpectralBasis, ds: &Dataset) -> Result<SpectralData> {
    if ds.n() != basis.n() {
        return Err(Error::Dimension(format!(
            "graph has {} subregions but the data has {} rows",
            basis.n(),
            ds.n()
        )));
    }
    SpectralData::from_matrix(basis, ds.y(), ds.x())
}

impl SpectralData {
    /// Rotates an arbitrary response and design.
    pub fn from_matrix(basis: &SpectralBasis, y: &[f64], x: &Mat<f64>) -> Result<Self> {
        let n = basis.n();
        if y.len() != n || x.nrows() != n {
            return Err(Error::Dimension(format!(
                "basis has order {n}, response {} and design {} rows",
                y.len(),
                x.nrows()
            )));
        }
        let y = Mat::from_fn(n, 1, |i, _| y[i]);
        let pt = basis.p().transpose();
        let yt = pt * &y;
        let xt = pt * x;
        Ok(SpectralData {
        y_t: (0..n).map(|i| yt[(i, 0)]).collect(),
        x_t: (0..xt.ncols())
            .map(|j| (0..n).map(|i| xt[(i, j)]).collect())
            .collect(),
        })
    }
}

/// Per-model pieces of the eigenvalue-form path.
#[derive(Debug, Clone)]
pub struct ProjectionEigen {
    /// Descending eigenvalues of `M*' H+ M*`.
    pub lambda: Vec<f64>,
    /// `U' M*' y` where `U` holds the matching eigenvectors, when a response
    /// was supplied.
    pub w: Option<Vec<f64>>,
    /// `ln |X_c' X_c|`
    pub log_det_xx: f64,
}

/// Holds `H+` so the per-model eigenvalue computations do not rebuild it.
#[derive(Debug, Clone)]
pub struct KffContext {
    h_plus: Mat<f64>,
}

impl KffContext {
    pub fn new(basis: &SpectralBasis) -> Self {
        Self {
            h_plus: basis.h_plus(),
        }
    }

    pub fn h_plus(&self) -> &Mat<f64> {
        &self.h_plus
    }

    /// Builds `G = I - X_c (X_c'X_c)^{-1} X_c'`, eigendecomposes it, keeps the
    /// unit-eigenvalue columns `M*` and eigendecomposes `M*' H+ M*`.
    pub fn projection_eigen(&self, x_c: &Mat<f64>, y: Option<&[f64]>) -> Result<ProjectionEigen> {
        let n = self.h_plus.nrows();
        let pc = x_c.ncols();
        if x_c.nrows() != n {
            return Err(Error::Dimension(format!(
                "design has {} rows, graph has {n}",
                x_c.nrows()
            )));
        }
        if pc >= n {
            return Err(Error::RankDeficient(format!("{pc} columns for {n} rows")));
        }
        let xtx = x_c.transpose() * x_c;
        let gram: Vec<f64> = (0..pc * pc).map(|k| xtx[(k / pc, k % pc)]).collect();
        let chol = Cholesky::new_with_tol(&gram, pc, 1e-12)
            .ok_or_else(|| Error::RankDeficient("model design is not of full column rank".into()))?;
        let inv = chol.inverse();
        let inv = Mat::from_fn(pc, pc, |i, j| inv[i * pc + j]);
        let hat = x_c * &inv * x_c.transpose();
        let g = Mat::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - hat[(i, j)]);
        let evd = g
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let (s, u) = (evd.S(), evd.U());
        let keep: Vec<usize> = (0..n).filter(|&i| s[i] > 0.5).collect();
        if keep.len() != n - pc {
            return Err(Error::Numerical(format!(
                "projection has {} unit eigenvalues, expected {}",
                keep.len(),
                n - pc
            )));
        }
        let m = Mat::from_fn(n, keep.len(), |i, j| u[(i, keep[j])]);
        let a = m.transpose() * &self.h_plus * &m;
        let a = Mat::from_fn(a.nrows(), a.ncols(), |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
        let evd = a
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Eigen(format!("{e:?}")))?;
        let r = keep.len();
        let (s, ua) = (evd.S(), evd.U());
        let lambda: Vec<f64> = (0..r).rev().map(|i| s[i]).collect();
        let w = y.map(|y| {
            let yv = Mat::from_fn(n, 1, |i, _| y[i]);
            let my = m.transpose() * &yv;
            let wv = ua.transpose() * &my;
            (0..r).rev().map(|i| wv[(i, 0)]).collect()
        });
        Ok(ProjectionEigen {
            lambda,
            w,
            log_det_xx: chol.log_det(),
        })
    }
}

/// Descending eigenvalues `lambda_1 >= ... >= lambda_{n-p_c}` of `M*' H+ M*`.
pub fn projection_eigenvalues(basis: &SpectralBasis, x_c: &Mat<f64>) -> Result<Vec<f64>> {
    Ok(KffContext::new(basis).projection_eigen(x_c, None)?.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_precision, NeighborhoodGraph};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(n: usize, extra: usize, seed: u64) -> NeighborhoodGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges: Vec<(usize, usize, f64)> = (1..n)
            .map(|i| (rng.random_range(0..i), i, rng.random_range(0.2..2.0)))
            .collect();
        for _ in 0..extra {
            let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
            if i != j && !edges.iter().any(|e| (e.0, e.1) == (i.min(j), i.max(j)) || (e.0, e.1) == (i.max(j), i.min(j))) {
                edges.push((i, j, rng.random_range(0.2..2.0)));
            }
        }
        NeighborhoodGraph::new(n, edges).unwrap()
    }

    fn check_basis(h: &PrecisionStructure, b: &SpectralBasis) {
        let n = h.n();
        let p = b.p();
        let ptp = p.transpose() * p;
        let pdp = Mat::from_fn(n, n, |i, j| p[(i, j)] * b.d()[j]) * p.transpose();
        let scale = b.d()[0].max(1.0);
        for i in 0..n {
            for j in 0..n {
                let e = f64::from(u8::from(i == j));
                assert!((ptp[(i, j)] - e).abs() <= 1e-10);
                assert!((pdp[(i, j)] - h.matrix()[(i, j)]).abs() <= 1e-8 * scale);
            }
            assert!((p[(i, n - 1)] - 1.0 / (n as f64).sqrt()).abs() <= 1e-8);
        }
        assert!(b.d().windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(b.d()[n - 1], 0.0);
        assert!(b.d()[n - 2] > 0.0);
    }

    #[test]
    fn small_spectra() {
        let b = decompose(&build_precision(&NeighborhoodGraph::chain(2).unwrap())).unwrap();
        assert!((b.d()[0] - 2.0).abs() < 1e-14);

        // Path Laplacian eigenvalues 2 - 2cos(k pi / 3) = 3, 1, 0.
        let b = decompose(&build_precision(&NeighborhoodGraph::chain(3).unwrap())).unwrap();
        assert!((b.d()[0] - 3.0).abs() < 1e-13 && (b.d()[1] - 1.0).abs() < 1e-13);

        // Complete graph K3: n, n, 0.
        let tri = NeighborhoodGraph::new(3, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        let b = decompose(&build_precision(&tri)).unwrap();
        assert!((b.d()[0] - 3.0).abs() < 1e-13 && (b.d()[1] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn analytic_path_basis_matches_solver() {
        for n in [2usize, 5, 17, 40] {
            let h = build_precision(&NeighborhoodGraph::chain(n).unwrap());
            let analytic = SpectralBasis::path(n).unwrap();
            check_basis(&h, &analytic);
            let solved = decompose(&h).unwrap();
            for (a, s) in analytic.d().iter().zip(solved.d()) {
                assert!((a - s).abs() < 1e-12);
            }
            // Path spectra are simple, so eigenvectors agree up to the sign
            // convention, which both bases share.
            for j in 0..n {
                for i in 0..n {
                    assert!((analytic.p()[(i, j)] - solved.p()[(i, j)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn rank_and_null_space_for_small_connected_graphs() {
        for n in 2..=20 {
            let h = build_precision(&random_graph(n, n / 2, n as u64));
            let b = decompose(&h).unwrap();
            let tol = 1e-9 * b.d()[0];
            assert_eq!(b.d().iter().filter(|&&v| v > tol).count(), n - 1);
        }
    }

    #[test]
    fn transform_of_constant_is_concentrated() {
        let b = decompose(&build_precision(&NeighborhoodGraph::chain(3).unwrap())).unwrap();
        let ds = Dataset::new(vec![1.0, 1.0, 1.0], vec![], vec![]).unwrap();
        let sd = transform(&b, &ds).unwrap();
        assert!(sd.y_t()[0].abs() < 1e-14 && sd.y_t()[1].abs() < 1e-14);
        assert!((sd.y_t()[2] - 3f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn transform_rejects_mismatch() {
        let b = SpectralBasis::path(4).unwrap();
        let ds = Dataset::new(vec![1.0, 2.0, 3.0], vec![], vec![]).unwrap();
        assert!(matches!(transform(&b, &ds), Err(Error::Dimension(_))));
    }

    #[test]
    fn projection_eigenvalues_first_unit_vector() {
        // Brute force: the two nonzero eigenvalues of G H+ G.
        let n = 3;
        let h = build_precision(&NeighborhoodGraph::chain(n).unwrap());
        let b = decompose(&h).unwrap();
        let x = Mat::from_fn(n, 1, |i, _| f64::from(u8::from(i == 0)));
        let lam = projection_eigenvalues(&b, &x).unwrap();
        assert_eq!(lam.len(), 2);
        let g = Mat::from_fn(n, n, |i, j| f64::from(u8::from(i == j)) - x[(i, 0)] * x[(j, 0)]);
        let ghg = &g * b.h_plus() * &g;
        let mut all = ghg.self_adjoint_eigenvalues(Side::Lower).unwrap();
        all.sort_by(|a, c| c.partial_cmp(a).unwrap());
        assert!((lam[0] - all[0]).abs() < 1e-12 && (lam[1] - all[1]).abs() < 1e-12);
        assert!(all[2].abs() < 1e-12);
    }

    #[test]
    fn projection_eigenvalues_single_lambda() {
        let n = 5;
        let b = SpectralBasis::path(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_fn(n, n - 1, |_, _| rng.random_range(-1.0..1.0));
        assert_eq!(projection_eigenvalues(&b, &x).unwrap().len(), 1);
        let dup = Mat::from_fn(n, 2, |i, _| i as f64);
        assert!(matches!(projection_eigenvalues(&b, &dup), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn cache_round_trip_and_key_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eig.bin");
        let h = build_precision(&random_graph(12, 4, 9));
        let b = decompose_cached(&h, Some(&path)).unwrap();
        let again = SpectralBasis::load_cache(&path, &h).unwrap().unwrap();
        assert_eq!(b.d(), again.d());
        assert_eq!(b.p(), again.p());
        let other = build_precision(&random_graph(12, 5, 10));
        assert!(SpectralBasis::load_cache(&path, &other).unwrap().is_none());
        fs::write(&path, [0u8; 10]).unwrap();
        assert!(matches!(SpectralBasis::load_cache(&path, &h), Err(Error::Cache(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_graph_bases_are_valid(n in 2usize..40, extra in 0usize..30, seed in any::<u64>()) {
            let h = build_precision(&random_graph(n, extra, seed));
            let b = decompose(&h).unwrap();
            check_basis(&h, &b);
        }

        #[test]
        fn projection_spectrum_properties(n in 6usize..25, pc in 1usize..4, seed in any::<u64>()) {
            let g = random_graph(n, n / 3, seed);
            let b = decompose(&build_precision(&g)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x55);
            let x = Mat::from_fn(n, pc, |_, _| rng.random_range(-1.0..1.0));
            let lam = projection_eigenvalues(&b, &x).unwrap();
            prop_assert_eq!(lam.len(), n - pc);
            prop_assert!(lam.iter().all(|&l| l >= -1e-10));

            // Column-space invariance.
            let a = Mat::from_fn(pc, pc, |i, j| if i == j { 2.0 } else { 0.3 * (i + 2 * j) as f64 });
            let lam2 = projection_eigenvalues(&b, &(&x * &a)).unwrap();
            for (u, v) in lam.iter().zip(&lam2) {
                prop_assert!((u - v).abs() <= 1e-9 * lam[0]);
            }

            // Nonzero spectrum of G H+ G equals that of E G~ E, E = (D+)^{1/2}.
            let xtx = x.transpose() * &x;
            let gram: Vec<f64> = (0..pc * pc).map(|k| xtx[(k / pc, k % pc)]).collect();
            let inv = Cholesky::new(&gram, pc).unwrap().inverse();
            let inv = Mat::from_fn(pc, pc, |i, j| inv[i * pc + j]);
            let gm = Mat::from_fn(n, n, |i, j| f64::from(u8::from(i == j))) - &x * &inv * x.transpose();
            let gt = b.p().transpose() * &gm * b.p();
            let e: Vec<f64> = b.d_plus().iter().map(|v| v.sqrt()).collect();
            let ege = Mat::from_fn(n, n, |i, j| e[i] * gt[(i, j)] * e[j]);
            let mut s = ege.self_adjoint_eigenvalues(Side::Lower).unwrap();
            s.sort_by(|a, c| c.partial_cmp(a).unwrap());
            let ghg = &gm * b.h_plus() * &gm;
            let mut t = ghg.self_adjoint_eigenvalues(Side::Lower).unwrap();
            t.sort_by(|a, c| c.partial_cmp(a).unwrap());
            for k in 0..n {
                prop_assert!((s[k] - t[k]).abs() <= 1e-8 * t[0]);
            }
        }
    }
}

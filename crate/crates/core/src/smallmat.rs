//! Tiny dense symmetric systems (p x p, p rarely above 20), row-major.

/// Lower Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Fails when a pivot is not strictly positive.
    pub fn new(a: &[f64], n: usize) -> Option<Self> {
        Self::new_with_tol(a, n, 0.0)
    }

    /// Fails when a pivot drops to `tol` times its diagonal entry or below.
    pub fn new_with_tol(a: &[f64], n: usize, tol: f64) -> Option<Self> {
        assert_eq!(a.len(), n * n);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > tol * a[j * n + j].abs()) || !(d > 0.0) {
                return None;
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut s = a[i * n + j];
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Some(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|i| self.l[i * self.n + i].ln()).sum::<f64>() * 2.0
    }

    /// `b <- L^{-1} b`
    pub fn forward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.l[i * n + k] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// `b <- L^{-T} b`
    pub fn backward(&self, b: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n {
                s -= self.l[k * n + i] * b[k];
            }
            b[i] = s / self.l[i * n + i];
        }
    }

    /// `b <- A^{-1} b`
    pub fn solve(&self, b: &mut [f64]) {
        self.forward(b);
        self.backward(b);
    }

    /// `L^{-1} M L^{-T}` for symmetric `M`; its trace is `tr(A^{-1} M)` and
    /// its squared Frobenius norm is `tr((A^{-1} M)^2)`.
    pub fn whiten(&self, m: &[f64]) -> Vec<f64> {
        let n = self.n;
        // Columns of L^{-1} M, then rows of (L^{-1} M) L^{-T}.
        let mut t = vec![0.0; n * n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            for i in 0..n {
                col[i] = m[i * n + j];
            }
            self.forward(&mut col);
            for i in 0..n {
                t[i * n + j] = col[i];
            }
        }
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            col.copy_from_slice(&t[i * n..(i + 1) * n]);
            self.forward(&mut col);
            out[i * n..(i + 1) * n].copy_from_slice(&col);
        }
        out
    }

    /// `tr(A^{-1} M)`
    pub fn trace_solve(&self, m: &[f64]) -> f64 {
        let w = self.whiten(m);
        (0..self.n).map(|i| w[i * self.n + i]).sum()
    }

    /// Dense `A^{-1}`.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.n;
        let mut inv = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.solve(&mut e);
            for i in 0..n {
                inv[i * n + j] = e[i];
            }
        }
        inv
    }
}

pub fn trace(a: &[f64], n: usize) -> f64 {
    (0..n).map(|i| a[i * n + i]).sum()
}

/// `tr(A B)` for symmetric `B`, which is the elementwise dot product.
pub fn trace_sym_product(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Symmetric Gram matrix `sum_r w_r x_r x_r'` over rows `x_r` of `cols`
/// (column-major storage), restricted to the first `rows` rows.
pub fn weighted_gram(cols: &[&[f64]], weights: &[f64], rows: usize) -> Vec<f64> {
    let q = cols.len();
    let mut g = vec![0.0; q * q];
    let mut scaled = vec![0.0; rows];
    for a in 0..q {
        for ((s, w), x) in scaled.iter_mut().zip(&weights[..rows]).zip(&cols[a][..rows]) {
            *s = w * x;
        }
        for b in 0..=a {
            let s = dot(&scaled, &cols[b][..rows]);
            g[a * q + b] = s;
            g[b * q + a] = s;
        }
    }
    g
}

/// Dot product with independent partial sums so the loop vectorizes.
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let mut acc = [0.0f64; 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let tail: f64 = xc.remainder().iter().zip(yc.remainder()).map(|(a, b)| a * b).sum();
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: [f64; 9] = [4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0];

    #[test]
    fn cholesky_matches_hand_values() {
        let c = Cholesky::new(&A, 3).unwrap();
        // det computed by cofactor expansion
        let det = 4.0 * (15.0 - 1.0) - 2.0 * (6.0 - 0.6) + 0.6 * (2.0 - 3.0);
        assert!((c.log_det() - f64::ln(det)).abs() < 1e-14);
        let mut b = [1.0, 2.0, 3.0];
        c.solve(&mut b);
        for i in 0..3 {
            let r: f64 = (0..3).map(|j| A[i * 3 + j] * b[j]).sum();
            assert!((r - (i + 1) as f64).abs() < 1e-13);
        }
    }

    #[test]
    fn whiten_gives_trace_of_solve() {
        let c = Cholesky::new(&A, 3).unwrap();
        let m = [1.0, 0.5, -0.2, 0.5, 2.0, 0.3, -0.2, 0.3, 0.7];
        let inv = c.inverse();
        let mut prod = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                prod[i * 3 + j] = (0..3).map(|k| inv[i * 3 + k] * m[k * 3 + j]).sum();
            }
        }
        let tr = trace(&prod, 3);
        let tr2: f64 = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .map(|(i, j)| prod[i * 3 + j] * prod[j * 3 + i])
            .sum();
        let w = c.whiten(&m);
        assert!((c.trace_solve(&m) - tr).abs() < 1e-13);
        assert!((w.iter().map(|v| v * v).sum::<f64>() - tr2).abs() < 1e-13);
    }

    #[test]
    fn singular_is_rejected() {
        assert!(Cholesky::new(&[1.0, 1.0, 1.0, 1.0], 2).is_none());
        assert!(Cholesky::new_with_tol(&[1.0, 0.999_999, 0.999_999, 1.0], 2, 1e-3).is_none());
    }
}

//! Deterministic adaptive quadrature of `exp(f(psi))` over the real line,
//! with `f` given in log scale.
//!
//! Several integrands can be integrated together on shared nodes (`N`
//! components); each gets its own mode shift so none underflows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadConfig {
    /// Target for the estimated relative error of every component.
    pub rel_tol: f64,
    pub max_evals: usize,
    /// Range of the coarse mode scan in psi.
    pub scan_range: (f64, f64),
    /// Tail expansion stops once a panel adds less than this fraction.
    pub tail_tol: f64,
}

impl Default for QuadConfig {
    fn default() -> Self {
        Self {
            rel_tol: 1e-8,
            max_evals: 20_000,
            scan_range: (-30.0, 30.0),
            tail_tol: 1e-10,
        }
    }
}

impl QuadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol < 1.0) {
            return Err(Error::InvalidConfig(format!("rel_tol {} not in (0, 1)", self.rel_tol)));
        }
        if !(self.tail_tol > 0.0 && self.tail_tol < 1.0) {
            return Err(Error::InvalidConfig(format!("tail_tol {} not in (0, 1)", self.tail_tol)));
        }
        let (lo, hi) = self.scan_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidConfig(format!("bad scan range [{lo}, {hi}]")));
        }
        if self.max_evals < 500 {
            return Err(Error::InvalidConfig("max_evals must be at least 500".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadDiagnostics {
    pub evaluations: usize,
    pub est_rel_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult<const N: usize> {
    pub log_integral: [f64; N],
    pub diagnostics: QuadDiagnostics,
}

const SCAN_POINTS: usize = 81;
const PANEL_WIDTH: f64 = 1.0;
/// Tail panels grow fourfold in width up to this size.
const MAX_TAIL_WIDTH: f64 = 16.0;
/// Panels beyond this |psi| mean the tails never settled.
const PSI_LIMIT: f64 = 400.0;

// 15-point Kronrod nodes on [-1, 1] (non-negative half) with the embedded
// 7-point Gauss rule on the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy)]
struct Panel<const N: usize> {
    a: f64,
    b: f64,
    est: [f64; N],
    err: [f64; N],
}

struct Counted<F> {
    f: F,
    evals: usize,
}

impl<F, const N: usize> Counted<F>
where
    F: FnMut(f64) -> Result<[f64; N]>,
{
    fn eval(&mut self, psi: f64) -> Result<[f64; N]> {
        self.evals += 1;
        let v = (self.f)(psi)?;
        if v.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(Error::Quadrature(format!(
                "integrand is not finite at psi = {psi} (tau = {:e})",
                psi.exp()
            )));
        }
        Ok(v)
    }
}

/// Integrates `exp(f_k(psi))` over the real line for each component `k`.
///
/// The mode of each component is located by a coarse scan over
/// `cfg.scan_range` and golden-section refinement; the integral is then
/// accumulated on unit panels around the modes and geometrically widening
/// panels outward until the tails are negligible, and refined by bisecting the panel with the largest error
/// estimate until the estimated relative error meets `cfg.rel_tol`.
pub fn integrate<const N: usize, F>(f: F, cfg: &QuadConfig) -> Result<QuadResult<N>>
where
    F: FnMut(f64) -> Result<[f64; N]>,
{
    cfg.validate()?;
    let mut g = Counted { f, evals: 0 };
    let modes = locate_modes(&mut g, cfg.scan_range)?;
    let shift: [f64; N] = std::array::from_fn(|k| modes[k].1);

    let lo_mode = modes.iter().map(|m| m.0).fold(f64::INFINITY, f64::min);
    let hi_mode = modes.iter().map(|m| m.0).fold(f64::NEG_INFINITY, f64::max);
    let mut left = (lo_mode / PANEL_WIDTH).floor() * PANEL_WIDTH - PANEL_WIDTH;
    let mut right = (hi_mode / PANEL_WIDTH).ceil() * PANEL_WIDTH + PANEL_WIDTH;

    let mut panels = Vec::new();
    let mut total = [0.0; N];
    let mut a = left;
    while a < right {
        let p = gk15(&mut g, a, a + PANEL_WIDTH, &shift)?;
        add(&mut total, &p.est);
        panels.push(p);
        a += PANEL_WIDTH;
    }
    // Tails: stop after two consecutive negligible panels on each side.
    for dir in [-1.0, 1.0] {
        let mut quiet = 0;
        let mut width = PANEL_WIDTH;
        while quiet < 2 {
            if g.evals > cfg.max_evals {
                return Err(budget_error(cfg, f64::NAN));
            }
            let (pa, pb) = if dir < 0.0 {
                left -= width;
                (left, left + width)
            } else {
                right += width;
                (right - width, right)
            };
            width = (4.0 * width).min(MAX_TAIL_WIDTH);
            if pa.abs().max(pb.abs()) > PSI_LIMIT {
                return Err(Error::Quadrature(format!(
                    "tail mass has not vanished by |psi| = {PSI_LIMIT}"
                )));
            }
            let p = gk15(&mut g, pa, pb, &shift)?;
            add(&mut total, &p.est);
            let negligible = (0..N).all(|k| p.est[k] <= cfg.tail_tol * total[k]);
            quiet = if negligible { quiet + 1 } else { 0 };
            panels.push(p);
        }
    }
    if let Some(k) = (0..N).find(|&k| !(total[k] > 0.0)) {
        return Err(Error::Quadrature(format!("component {k} has no mass")));
    }

    loop {
        panels.sort_by(|p, q| p.a.total_cmp(&q.a));
        let total = sum_est(&panels);
        let err = sum_err(&panels);
        let rel = (0..N).map(|k| err[k] / total[k]).fold(0.0, f64::max);
        if rel <= cfg.rel_tol {
            return Ok(QuadResult {
                log_integral: std::array::from_fn(|k| shift[k] + total[k].ln()),
                diagnostics: QuadDiagnostics {
                    evaluations: g.evals,
                    est_rel_error: rel,
                },
            });
        }
        if g.evals + 30 > cfg.max_evals {
            return Err(budget_error(cfg, rel));
        }
        let worst = (0..panels.len())
            .max_by(|&i, &j| {
                let si = (0..N).map(|k| panels[i].err[k] / total[k]).fold(0.0, f64::max);
                let sj = (0..N).map(|k| panels[j].err[k] / total[k]).fold(0.0, f64::max);
                si.total_cmp(&sj)
            })
            .unwrap();
        let p = panels.swap_remove(worst);
        let mid = 0.5 * (p.a + p.b);
        panels.push(gk15(&mut g, p.a, mid, &shift)?);
        panels.push(gk15(&mut g, mid, p.b, &shift)?);
    }
}

/// Scalar convenience wrapper around [`integrate`].
pub fn adaptive_quadrature<F>(mut f: F, cfg: &QuadConfig) -> Result<(f64, QuadDiagnostics)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let r = integrate(|x| Ok([f(x)?]), cfg)?;
    Ok((r.log_integral[0], r.diagnostics))
}

fn budget_error(cfg: &QuadConfig, rel: f64) -> Error {
    Error::Quadrature(format!(
        "evaluation budget of {} exhausted (estimated relative error {rel:e})",
        cfg.max_evals
    ))
}

fn add<const N: usize>(acc: &mut [f64; N], v: &[f64; N]) {
    for k in 0..N {
        acc[k] += v[k];
    }
}

fn sum_est<const N: usize>(panels: &[Panel<N>]) -> [f64; N] {
    let mut t = [0.0; N];
    panels.iter().for_each(|p| add(&mut t, &p.est));
    t
}

fn sum_err<const N: usize>(panels: &[Panel<N>]) -> [f64; N] {
    let mut t = [0.0; N];
    panels.iter().for_each(|p| add(&mut t, &p.err));
    t
}

fn gk15<const N: usize, F>(
    g: &mut Counted<F>,
    a: f64,
    b: f64,
    shift: &[f64; N],
) -> Result<Panel<N>>
where
    F: FnMut(f64) -> Result<[f64; N]>,
{
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut fv = [[0.0; N]; 15];
    let fc = g.eval(c)?;
    fv[14] = std::array::from_fn(|k| (fc[k] - shift[k]).exp());
    for j in 0..7 {
        let f1 = g.eval(c - h * XGK[j])?;
        let f2 = g.eval(c + h * XGK[j])?;
        fv[2 * j] = std::array::from_fn(|k| (f1[k] - shift[k]).exp());
        fv[2 * j + 1] = std::array::from_fn(|k| (f2[k] - shift[k]).exp());
    }
    let mut est = [0.0; N];
    let mut err = [0.0; N];
    for k in 0..N {
        let mut kron = WGK[7] * fv[14][k];
        let mut gauss = WG[3] * fv[14][k];
        for j in 0..7 {
            let s = fv[2 * j][k] + fv[2 * j + 1][k];
            kron += WGK[j] * s;
            if j % 2 == 1 {
                gauss += WG[j / 2] * s;
            }
        }
        // QUADPACK's scaled estimate: |K - G| relative to the variation of
        // the integrand about its mean, raised to 3/2.
        let mean = 0.5 * kron;
        let mut resasc = WGK[7] * (fv[14][k] - mean).abs();
        for j in 0..7 {
            resasc += WGK[j] * ((fv[2 * j][k] - mean).abs() + (fv[2 * j + 1][k] - mean).abs());
        }
        let resasc = resasc * h;
        let diff = ((kron - gauss) * h).abs();
        let mut e = diff;
        if resasc > 0.0 && diff > 0.0 {
            e = resasc * (200.0 * diff / resasc).powf(1.5).min(1.0);
        }
        est[k] = kron * h;
        err[k] = e.max(50.0 * f64::EPSILON * est[k].abs());
    }
    Ok(Panel { a, b, est, err })
}

/// Per component: (location of the maximum, log value there).
fn locate_modes<const N: usize, F>(g: &mut Counted<F>, range: (f64, f64)) -> Result<[(f64, f64); N]>
where
    F: FnMut(f64) -> Result<[f64; N]>,
{
    let (mut lo, mut hi) = range;
    let mut widened = false;
    loop {
        let step = (hi - lo) / (SCAN_POINTS - 1) as f64;
        let xs: Vec<f64> = (0..SCAN_POINTS).map(|i| lo + step * i as f64).collect();
        let vals = xs.iter().map(|&x| g.eval(x)).collect::<Result<Vec<_>>>()?;
        let mut best = [0usize; N];
        for (k, bk) in best.iter_mut().enumerate() {
            let i = (0..SCAN_POINTS)
                .max_by(|&i, &j| vals[i][k].total_cmp(&vals[j][k]))
                .unwrap();
            if vals[i][k] == f64::NEG_INFINITY {
                return Err(Error::Quadrature(format!(
                    "component {k} vanishes over psi in [{lo}, {hi}]"
                )));
            }
            *bk = i;
        }
        if best.iter().any(|&i| i == 0 || i == SCAN_POINTS - 1) {
            if widened {
                return Err(Error::Quadrature(format!(
                    "mode lies on the boundary of the widened scan range [{lo}, {hi}]"
                )));
            }
            widened = true;
            let half = 0.5 * (hi - lo);
            lo -= half;
            hi += half;
            continue;
        }
        let mut out = [(0.0, 0.0); N];
        for k in 0..N {
            let i = best[k];
            out[k] = golden_max(g, k, xs[i - 1], xs[i + 1], (xs[i], vals[i][k]))?;
        }
        return Ok(out);
    }
}

fn golden_max<const N: usize, F>(
    g: &mut Counted<F>,
    k: usize,
    mut a: f64,
    mut b: f64,
    mut best: (f64, f64),
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<[f64; N]>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = g.eval(x1)?[k];
    let mut f2 = g.eval(x2)?[k];
    while b - a > 1e-2 {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = g.eval(x1)?[k];
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = g.eval(x2)?[k];
        }
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f > best.1 {
                best = (x, f);
            }
        }
    }
    Ok(best)
}

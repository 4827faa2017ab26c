//! Exhaustive model space, model priors and posterior summaries.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::design::ModelDesign;
use crate::error::{Error, Result};
use crate::graph::{build_precision, Dataset, NeighborhoodGraph};
use crate::likelihood::{
    log_fractional_marginal_terms, log_marginal_independent, FastTerms, KffTerms, OmegaCache,
};
use crate::par;
use crate::quadrature::{QuadConfig, QuadDiagnostics};
use crate::spectral::{decompose, transform, KffContext, SpectralBasis};

/// Regressor subset (bit `j` is regressor `j`; the intercept is implicit)
/// under spatial dependence or independence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mask: u32,
    pub spatial: bool,
}

impl ModelSpec {
    pub fn k_c(&self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn p_c(&self) -> usize {
        1 + self.k_c()
    }

    /// Design columns: 0 for the intercept, `j + 1` for regressor `j`.
    pub fn columns(&self) -> Vec<usize> {
        std::iter::once(0)
            .chain((0..32).filter(|j| self.mask >> j & 1 == 1).map(|j| j as usize + 1))
            .collect()
    }

    pub fn regressors<'n>(&self, names: &'n [String]) -> Vec<&'n str> {
        self.columns()[1..].iter().map(|&c| names[c - 1].as_str()).collect()
    }

    pub fn label(&self, names: &[String]) -> String {
        let regs = self.regressors(names);
        format!(
            "{{{}}} {}",
            if regs.is_empty() { "intercept only".to_string() } else { regs.join(", ") },
            if self.spatial { "spatial" } else { "independent" }
        )
    }
}

/// All `2^(k+1)` models in index order: for each mask, spatial then independent.
pub fn enumerate_models(k: usize) -> Vec<ModelSpec> {
    (0..1u32 << k)
        .flat_map(|mask| [true, false].map(|spatial| ModelSpec { mask, spatial }))
        .collect()
}

fn binomial(k: usize, r: usize) -> f64 {
    let r = r.min(k - r);
    let mut c: u128 = 1;
    for i in 0..r {
        c = c * (k - i) as u128 / (i + 1) as u128;
    }
    c as f64
}

/// `P(M_c) = 1 / (2 (k+1) C(k, k_c))`
pub fn model_prior(k: usize, k_c: usize) -> f64 {
    assert!(k_c <= k, "k_c = {k_c} exceeds k = {k}");
    1.0 / (2.0 * (k as f64 + 1.0) * binomial(k, k_c))
}

/// Log Bayes factor of model `c` against model `a`.
pub fn bayes_factor(log_q_c: f64, log_q_a: f64) -> f64 {
    log_q_c - log_q_a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub quad: QuadConfig,
    /// Training fraction; `None` means `(k + 2) / n`, one more than the
    /// full-model dimension, shared by all models.
    pub b_fraction: Option<f64>,
    /// Largest number of candidate regressors enumerated exhaustively.
    pub max_k: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            quad: QuadConfig::default(),
            b_fraction: None,
            max_k: 20,
        }
    }
}

impl SelectionConfig {
    pub fn b_fraction_for(&self, n: usize, k: usize) -> Result<f64> {
        let b = self.b_fraction.unwrap_or((k as f64 + 2.0) / n as f64);
        if !(b > 0.0 && b < 1.0) || !(n as f64 * b > (k + 1) as f64) {
            return Err(Error::InvalidConfig(format!(
                "training fraction {b} must lie in (0, 1) with n*b > {} (the full-model dimension)",
                k + 1
            )));
        }
        Ok(b)
    }

    fn check(&self, data: &Dataset) -> Result<f64> {
        self.quad.validate()?;
        if data.k() > self.max_k.min(30) {
            return Err(Error::InvalidConfig(format!(
                "{} candidate regressors exceed the exhaustive-enumeration limit of {}",
                data.k(),
                self.max_k.min(30)
            )));
        }
        self.b_fraction_for(data.n(), data.k())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringPath {
    Fast,
    Kff,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelRecord {
    pub spec: ModelSpec,
    pub log_prior: f64,
    pub log_q: f64,
    pub log_post_prob: f64,
    pub post_prob: f64,
    pub quad: Option<QuadDiagnostics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionResult {
    pub path: ScoringPath,
    pub n: usize,
    pub names: Vec<String>,
    pub b_fraction: f64,
    pub config: SelectionConfig,
    pub models: Vec<ModelRecord>,
    pub pip: Vec<f64>,
    pub p_spatial: f64,
    pub map_model: ModelSpec,
    pub median_model: ModelSpec,
}

impl SelectionResult {
    fn aggregate(
        path: ScoringPath,
        data: &Dataset,
        b_fraction: f64,
        config: &SelectionConfig,
        scored: Vec<(ModelSpec, f64, Option<QuadDiagnostics>)>,
    ) -> Self {
        let k = data.k();
        let weights: Vec<f64> = scored
            .iter()
            .map(|(s, lq, _)| model_prior(k, s.k_c()).ln() + lq)
            .collect();
        let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = max + weights.iter().map(|w| (w - max).exp()).sum::<f64>().ln();
        let models: Vec<ModelRecord> = scored
            .iter()
            .zip(&weights)
            .map(|(&(spec, log_q, quad), w)| ModelRecord {
                spec,
                log_prior: model_prior(k, spec.k_c()).ln(),
                log_q,
                log_post_prob: w - log_norm,
                post_prob: (w - log_norm).exp(),
                quad,
            })
            .collect();
        let pip: Vec<f64> = (0..k)
            .map(|j| {
                models
                    .iter()
                    .filter(|m| m.spec.mask >> j & 1 == 1)
                    .map(|m| m.post_prob)
                    .sum::<f64>()
                    .min(1.0)
            })
            .collect();
        let p_spatial = models
            .iter()
            .filter(|m| m.spec.spatial)
            .map(|m| m.post_prob)
            .sum::<f64>()
            .min(1.0);
        let map_model = models
            .iter()
            .fold(None::<&ModelRecord>, |best, m| match best {
                Some(b) if b.log_post_prob >= m.log_post_prob => Some(b),
                _ => Some(m),
            })
            .expect("model space is never empty")
            .spec;
        let median_model = ModelSpec {
            mask: (0..k).filter(|&j| pip[j] > 0.5).fold(0, |m, j| m | 1 << j),
            spatial: p_spatial > 0.5,
        };
        Self {
            path,
            n: data.n(),
            names: data.names().to_vec(),
            b_fraction,
            config: config.clone(),
            models,
            pip,
            p_spatial,
            map_model,
            median_model,
        }
    }

    fn spec_json(&self, spec: &ModelSpec) -> Value {
        json!({
            "mask": spec.mask,
            "regressors": spec.regressors(&self.names),
            "spatial": spec.spatial,
        })
    }

    pub fn to_json(&self) -> Value {
        let mut pip = Map::new();
        for (name, v) in self.names.iter().zip(&self.pip) {
            pip.insert(name.clone(), json!(v));
        }
        let models: Vec<Value> = self
            .models
            .iter()
            .map(|m| {
                json!({
                    "mask": m.spec.mask,
                    "regressors": m.spec.regressors(&self.names),
                    "spatial": m.spec.spatial,
                    "log_prior": m.log_prior,
                    "log_q": m.log_q,
                    "log_post_prob": m.log_post_prob,
                    "post_prob": m.post_prob,
                    "quad": m.quad,
                })
            })
            .collect();
        json!({
            "config": {
                "path": self.path,
                "n": self.n,
                "k": self.names.len(),
                "regressors": self.names,
                "b_fraction": self.b_fraction,
                "quad": self.config.quad,
            },
            "models": models,
            "pip": pip,
            "p_spatial": self.p_spatial,
            "map_model": self.spec_json(&self.map_model),
            "median_model": self.spec_json(&self.median_model),
        })
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_json()).expect("serializable");
        s.push('\n');
        s
    }

    /// One row per model.
    pub fn models_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "mask", "regressors", "spatial", "log_prior", "log_q", "log_post_prob", "post_prob",
        ])
        .expect("in-memory write");
        for m in &self.models {
            w.write_record([
                m.spec.mask.to_string(),
                m.spec.regressors(&self.names).join(";"),
                m.spec.spatial.to_string(),
                m.log_prior.to_string(),
                m.log_q.to_string(),
                m.log_post_prob.to_string(),
                m.post_prob.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
    }

    pub fn pip_csv(&self) -> String {
        let mut out = String::from("regressor,pip\n");
        for (name, v) in self.names.iter().zip(&self.pip) {
            out.push_str(&format!("{name},{v}\n"));
        }
        out.push_str(&format!("spatial,{}\n", self.p_spatial));
        out
    }

    /// Writes `path` with the model table and `<stem>_pip.csv` beside it.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.models_csv()).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("selection");
        let pip_path = path.with_file_name(format!("{stem}_pip.csv"));
        fs::write(&pip_path, self.pip_csv()).map_err(|e| Error::io(&pip_path, e))
    }

    /// Models sorted by decreasing posterior probability (stable on ties).
    pub fn ranked(&self) -> Vec<&ModelRecord> {
        let mut v: Vec<&ModelRecord> = self.models.iter().collect();
        v.sort_by(|a, b| b.log_post_prob.total_cmp(&a.log_post_prob));
        v
    }

    /// Human-readable top models and PIP table.
    pub fn summary(&self, top: usize) -> String {
        let mut out = format!("Top {} of {} models\n", top.min(self.models.len()), self.models.len());
        out.push_str(&format!("{:>4}  {:>12}  {:>12}  model\n", "rank", "post_prob", "log_q"));
        for (i, m) in self.ranked().into_iter().take(top).enumerate() {
            out.push_str(&format!(
                "{:>4}  {:>12.6e}  {:>12.4}  {}\n",
                i + 1,
                m.post_prob,
                m.log_q,
                m.spec.label(&self.names)
            ));
        }
        out.push_str("\nPosterior inclusion probabilities\n");
        let width = self.names.iter().map(|s| s.len()).max().unwrap_or(0).max(9);
        for (name, v) in self.names.iter().zip(&self.pip) {
            out.push_str(&format!("{name:<width$}  {v:.6}\n"));
        }
        out.push_str(&format!("{:<width$}  {:.6}\n", "(spatial)", self.p_spatial));
        out
    }

    pub fn max_quad_error(&self) -> f64 {
        self.models
            .iter()
            .filter_map(|m| m.quad.map(|q| q.est_rel_error))
            .fold(0.0, f64::max)
    }
}

fn collect_scores(
    specs: &[ModelSpec],
    names: &[String],
    results: Vec<Result<(f64, Option<QuadDiagnostics>)>>,
) -> Result<Vec<(ModelSpec, f64, Option<QuadDiagnostics>)>> {
    specs
        .iter()
        .zip(results)
        .map(|(spec, r)| match r {
            Ok((lq, quad)) => Ok((*spec, lq, quad)),
            Err(e) => Err(Error::Model {
                model: spec.label(names),
                source: Box::new(e),
            }),
        })
        .collect()
}

/// Scores every model with the spectral path and the trace-form prior.
pub fn enumerate_and_score(
    basis: &SpectralBasis,
    data: &Dataset,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let b = cfg.check(data)?;
    let sd = transform(basis, data)?;
    let omega = OmegaCache::new(basis);
    let specs = enumerate_models(data.k());
    let results = par::map_collect(&specs, |spec| {
        let cols = spec.columns();
        if spec.spatial {
            let terms = FastTerms::new(ModelDesign::new(&sd, &cols)?, basis);
            let r = log_fractional_marginal_terms(&terms, b, &cfg.quad, &omega)?;
            Ok((r.log_q, Some(r.quad)))
        } else {
            Ok((log_marginal_independent(data, &cols, b)?, None))
        }
    });
    let scored = collect_scores(&specs, data.names(), results)?;
    Ok(SelectionResult::aggregate(ScoringPath::Fast, data, b, cfg, scored))
}

/// The same selection with per-model projection eigenvalues and the
/// eigenvalue-form prior: two `O(n^3)` eigendecompositions per spatial model.
pub fn kff_path_score(
    data: &Dataset,
    graph: &NeighborhoodGraph,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let basis = decompose(&build_precision(graph))?;
    kff_path_score_with_basis(&basis, data, cfg)
}

pub fn kff_path_score_with_basis(
    basis: &SpectralBasis,
    data: &Dataset,
    cfg: &SelectionConfig,
) -> Result<SelectionResult> {
    let b = cfg.check(data)?;
    if data.n() != basis.n() {
        return Err(Error::Dimension(format!(
            "graph has {} subregions but the data has {} rows",
            basis.n(),
            data.n()
        )));
    }
    let ctx = KffContext::new(basis);
    let omega = OmegaCache::new(basis);
    let y_norm2 = data.y().iter().map(|v| v * v).sum();
    let specs = enumerate_models(data.k());
    let results = par::map_collect(&specs, |spec| {
        let cols = spec.columns();
        if spec.spatial {
            let proj = ctx.projection_eigen(&data.design_columns(&cols), Some(data.y()))?;
            let terms = KffTerms::new(data.n(), proj, y_norm2)?;
            let r = log_fractional_marginal_terms(&terms, b, &cfg.quad, &omega)?;
            Ok((r.log_q, Some(r.quad)))
        } else {
            Ok((log_marginal_independent(data, &cols, b)?, None))
        }
    });
    let scored = collect_scores(&specs, data.names(), results)?;
    Ok(SelectionResult::aggregate(ScoringPath::Kff, data, b, cfg, scored))
}

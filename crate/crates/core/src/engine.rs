//! Gaussian models with covariance `Σ = Σ_k σ_k² C_k + σ_ε² I` and a
//! constant mean.
//!
//! Every kernel `C_k` is either fixed, a Gaussian kernel of squared marker
//! distances with bandwidth `τ`, or a lattice correlation with anisotropy
//! `θ`. The constant mean is profiled out in closed form (GLS). During the
//! search the noise variance is profiled as well: `Σ = s V` with
//! `V = I + Σ_k λ_k C_k`, and `s` has a closed-form maximizer for fixed
//! ratios `λ_k`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{GrfError, Result};
use crate::kernels::{gaussian_from_sq_dists, lattice_correlation, LatticeSpec};
use crate::linalg::SpdFactor;
use crate::optim::{nelder_mead, Bounds, SimplexOptions};

/// Ratio bounds `λ_k = σ_k² / σ_ε²` during the search.
const LOG_RATIO_MIN: f64 = -27.631_021_115_928_547; // ln 1e-12
const LOG_RATIO_MAX: f64 = 23.025_850_929_940_457; // ln 1e10
/// `θ = logistic(z)` with `|z| <= LOGIT_MAX`; the bounds map to exactly 0 and 1.
const LOGIT_MAX: f64 = 20.0;
/// Variance components below this fraction of `var(y)` are reported as zero.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    #[default]
    Ml,
    Reml,
}

/// Observed plots on a lattice, for a spatial term.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTerm {
    pub m1: usize,
    pub m2: usize,
    pub beta00: f64,
    pub plots: Vec<(usize, usize)>,
}

impl SpatialTerm {
    pub fn spec(&self, theta: f64) -> Result<LatticeSpec> {
        LatticeSpec::from_theta(self.m1, self.m2, self.beta00, theta)
    }
}

#[derive(Debug, Clone)]
pub enum TermKernel {
    Fixed(Arc<DMatrix<f64>>),
    /// Squared marker distances; shape parameter `τ`.
    Marker(Arc<DMatrix<f64>>),
    /// Shape parameter `θ`.
    Spatial(Arc<SpatialTerm>),
}

#[derive(Debug, Clone)]
pub struct Term {
    pub name: String,
    pub kernel: TermKernel,
}

impl Term {
    pub fn fixed(name: &str, k: DMatrix<f64>) -> Self {
        Self {
            name: name.into(),
            kernel: TermKernel::Fixed(Arc::new(k)),
        }
    }

    pub fn has_shape(&self) -> bool {
        !matches!(self.kernel, TermKernel::Fixed(_))
    }

    pub fn dim(&self) -> usize {
        match &self.kernel {
            TermKernel::Fixed(k) | TermKernel::Marker(k) => k.nrows(),
            TermKernel::Spatial(s) => s.plots.len(),
        }
    }

    /// Kernel matrix at the given shape parameter.
    pub fn matrix(&self, shape: Option<f64>) -> Result<Arc<DMatrix<f64>>> {
        match (&self.kernel, shape) {
            (TermKernel::Fixed(k), _) => Ok(Arc::clone(k)),
            (TermKernel::Marker(d), Some(tau)) => {
                if !(tau > 0.0) {
                    return Err(GrfError::invalid(format!("tau must be positive, got {tau}")));
                }
                Ok(Arc::new(gaussian_from_sq_dists(d, tau)))
            }
            (TermKernel::Spatial(s), Some(theta)) => {
                Ok(Arc::new(lattice_correlation(&s.spec(theta)?, &s.plots)?))
            }
            _ => Err(GrfError::invalid(format!("term {} needs a shape parameter", self.name))),
        }
    }
}

/// Variance and optional shape of one term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub variance: f64,
    pub shape: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineParams {
    pub terms: Vec<TermValue>,
    pub noise: f64,
}

/// `Σ = Σ_k v_k K_k + noise I`.
pub fn assemble(kernels: &[&DMatrix<f64>], variances: &[f64], noise: f64) -> Result<DMatrix<f64>> {
    if kernels.len() != variances.len() {
        return Err(GrfError::dim(format!(
            "{} kernels but {} variances",
            kernels.len(),
            variances.len()
        )));
    }
    let n = kernels.first().map_or(0, |k| k.nrows());
    let mut s = DMatrix::zeros(n, n);
    for (k, &v) in kernels.iter().zip(variances) {
        if k.nrows() != n || k.ncols() != n {
            return Err(GrfError::dim(format!(
                "kernel is {}x{}, expected {n}x{n}",
                k.nrows(),
                k.ncols()
            )));
        }
        if v != 0.0 {
            s.zip_apply(*k, |a, b| *a += v * b);
        }
    }
    for i in 0..n {
        s[(i, i)] += noise;
    }
    Ok(s)
}

fn is_constant(y: &[f64]) -> bool {
    y.iter().all(|&v| v == y[0])
}

/// Generalized least squares mean `1ᵀΣ⁻¹y / 1ᵀΣ⁻¹1`; exact for constant `y`.
pub fn gls_mean(factor: &SpdFactor, y: &[f64]) -> f64 {
    if is_constant(y) {
        return y[0];
    }
    let n = y.len();
    let ones = DVector::from_element(n, 1.0);
    let w = factor.solve(&ones);
    w.dot(&DVector::from_row_slice(y)) / w.dot(&ones)
}

/// Whitened pieces `L⁻¹1`, `L⁻¹y` from which μ̂ and the quadratic form follow.
struct Whitened {
    mu: f64,
    quad: f64,
    ones_norm2: f64,
}

fn whiten(factor: &SpdFactor, y: &[f64]) -> Whitened {
    let n = y.len();
    let mut b = DMatrix::from_element(n, 2, 1.0);
    for i in 0..n {
        b[(i, 1)] = y[i];
    }
    factor.solve_lower_in_place(&mut b);
    let (u, w) = (b.column(0), b.column(1));
    let ones_norm2 = u.norm_squared();
    let mu = if is_constant(y) { y[0] } else { u.dot(&w) / ones_norm2 };
    let quad = if is_constant(y) {
        0.0
    } else {
        w.iter().zip(u.iter()).map(|(w, u)| (w - mu * u).powi(2)).sum()
    };
    Whitened {
        mu,
        quad,
        ones_norm2,
    }
}

/// Log-likelihood without additive constants at a fully specified `Σ`:
/// ML `-½ log|Σ| - ½ rᵀΣ⁻¹r`, REML adds `-½ log(1ᵀΣ⁻¹1)`.
pub fn log_likelihood(factor: &SpdFactor, y: &[f64], criterion: Criterion) -> (f64, f64) {
    let w = whiten(factor, y);
    let mut ll = -0.5 * factor.log_det() - 0.5 * w.quad;
    if criterion == Criterion::Reml {
        ll -= 0.5 * w.ones_norm2.ln();
    }
    (ll, w.mu)
}

/// Scale-profiled criterion for `Σ = s V`. Returns the value and `ŝ`.
fn profiled(factor_v: &SpdFactor, y: &[f64], criterion: Criterion, s_floor: f64) -> (f64, f64) {
    let n = y.len() as f64;
    let w = whiten(factor_v, y);
    let ld = factor_v.log_det();
    match criterion {
        Criterion::Ml => {
            let s = (w.quad / n).max(s_floor);
            (-0.5 * ld - 0.5 * n * s.ln() - 0.5 * w.quad / s, s)
        }
        Criterion::Reml => {
            let s = (w.quad / (n - 1.0)).max(s_floor);
            (
                -0.5 * ld - 0.5 * (n - 1.0) * s.ln() - 0.5 * w.ones_norm2.ln() - 0.5 * w.quad / s,
                s,
            )
        }
    }
}

pub fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)
}

/// Settings of the multi-start simplex search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub starts: usize,
    /// Standard deviation of start jitter in transformed coordinates.
    pub jitter: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub simplex: SimplexOptions,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            starts: 5,
            jitter: 0.5,
            seed: 0,
            simplex: SimplexOptions::default(),
        }
    }
}

/// Result of one simplex run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    /// Parameters the run started from.
    pub initial: EngineParams,
    /// Log-likelihood at `initial`.
    pub initial_loglik: f64,
    pub final_loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

/// A fitted additive-kernel model with everything needed for prediction.
#[derive(Clone)]
pub struct EngineFit {
    pub params: EngineParams,
    pub mu: f64,
    pub loglik: f64,
    pub criterion: Criterion,
    pub kernels: Vec<Arc<DMatrix<f64>>>,
    pub factor: Arc<SpdFactor>,
    /// `Σ⁻¹ (y - μ 1)`.
    pub alpha: DVector<f64>,
    pub starts: Vec<StartReport>,
}

impl std::fmt::Debug for EngineFit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EngineFit")
            .field("params", &self.params)
            .field("mu", &self.mu)
            .field("loglik", &self.loglik)
            .finish_non_exhaustive()
    }
}

/// Model evaluation at fixed parameters.
pub fn evaluate(y: &[f64], terms: &[Term], params: &EngineParams, criterion: Criterion) -> Result<EngineFit> {
    if terms.len() != params.terms.len() {
        return Err(GrfError::dim("one value per term required"));
    }
    let n = y.len();
    let kernels = terms
        .iter()
        .zip(&params.terms)
        .map(|(t, v)| {
            if t.dim() != n {
                return Err(GrfError::dim(format!("term {} has size {}, data {n}", t.name, t.dim())));
            }
            t.matrix(v.shape)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DMatrix<f64>> = kernels.iter().map(|k| k.as_ref()).collect();
    let vars: Vec<f64> = params.terms.iter().map(|t| t.variance).collect();
    if !(params.noise > 0.0) {
        return Err(GrfError::invalid("noise variance must be positive"));
    }
    let factor = SpdFactor::new(assemble(&refs, &vars, params.noise)?)?;
    let (loglik, mu) = log_likelihood(&factor, y, criterion);
    if !loglik.is_finite() {
        return Err(GrfError::Numerical("non-finite log-likelihood".into()));
    }
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mu));
    let alpha = factor.solve(&r);
    Ok(EngineFit {
        params: params.clone(),
        mu,
        loglik,
        criterion,
        kernels,
        factor: Arc::new(factor),
        alpha,
        starts: Vec::new(),
    })
}

/// Maps between model parameters and unconstrained search coordinates:
/// `ln λ_k` per term, then `ln τ` or `logit θ` per shaped term.
struct Coordinates {
    shaped: Vec<usize>,
    n_terms: usize,
    bounds: Bounds,
}

fn logistic(z: f64) -> f64 {
    if z >= LOGIT_MAX {
        1.0
    } else if z <= -LOGIT_MAX {
        0.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

fn logit(t: f64) -> f64 {
    let t = t.clamp(1e-12, 1.0 - 1e-12);
    (t / (1.0 - t)).ln().clamp(-LOGIT_MAX, LOGIT_MAX)
}

impl Coordinates {
    fn new(terms: &[Term], init: &EngineParams) -> Self {
        let shaped: Vec<usize> = (0..terms.len()).filter(|&k| terms[k].has_shape()).collect();
        let mut lower = vec![LOG_RATIO_MIN; terms.len()];
        let mut upper = vec![LOG_RATIO_MAX; terms.len()];
        for &k in &shaped {
            match terms[k].kernel {
                TermKernel::Marker(_) => {
                    let t0 = init.terms[k].shape.unwrap_or(1.0).max(1e-12).ln();
                    lower.push(t0 - 3.0 * std::f64::consts::LN_10);
                    upper.push(t0 + 3.0 * std::f64::consts::LN_10);
                }
                _ => {
                    lower.push(-LOGIT_MAX);
                    upper.push(LOGIT_MAX);
                }
            }
        }
        Self {
            shaped,
            n_terms: terms.len(),
            bounds: Bounds { lower, upper },
        }
    }

    fn encode(&self, terms: &[Term], p: &EngineParams) -> Vec<f64> {
        let mut x: Vec<f64> = p
            .terms
            .iter()
            .map(|t| (t.variance / p.noise).max(1e-300).ln().clamp(LOG_RATIO_MIN, LOG_RATIO_MAX))
            .collect();
        for &k in &self.shaped {
            let s = p.terms[k].shape.unwrap_or(0.5);
            x.push(match terms[k].kernel {
                TermKernel::Marker(_) => s.ln(),
                _ => logit(s),
            });
        }
        x
    }

    /// Ratios and shapes from coordinates.
    fn decode(&self, terms: &[Term], x: &[f64]) -> (Vec<f64>, Vec<Option<f64>>) {
        let ratios = x[..self.n_terms]
            .iter()
            .map(|&z| if z <= LOG_RATIO_MIN { 0.0 } else { z.exp() })
            .collect();
        let mut shapes = vec![None; self.n_terms];
        for (j, &k) in self.shaped.iter().enumerate() {
            let z = x[self.n_terms + j];
            shapes[k] = Some(match terms[k].kernel {
                TermKernel::Marker(_) => z.exp(),
                _ => logistic(z),
            });
        }
        (ratios, shapes)
    }
}

/// Small cache of kernel matrices keyed by shape value.
struct KernelCache {
    entries: Vec<Vec<(u64, Arc<DMatrix<f64>>)>>,
}

impl KernelCache {
    const SLOTS: usize = 4;

    fn new(n_terms: usize) -> Self {
        Self {
            entries: vec![Vec::new(); n_terms],
        }
    }

    fn get(&mut self, k: usize, term: &Term, shape: Option<f64>) -> Result<Arc<DMatrix<f64>>> {
        let key = shape.map_or(0, f64::to_bits);
        let slot = &mut self.entries[k];
        if let Some(pos) = slot.iter().position(|(b, _)| *b == key) {
            let hit = slot.remove(pos);
            let m = Arc::clone(&hit.1);
            slot.insert(0, hit);
            return Ok(m);
        }
        let m = term.matrix(shape)?;
        slot.insert(0, (key, Arc::clone(&m)));
        slot.truncate(Self::SLOTS);
        Ok(m)
    }
}

/// Fits variance components and shapes by multi-start simplex search from
/// `init`. Start 0 is `init` itself; the others jitter it in search
/// coordinates with a stream seeded from `(config.seed, start)`.
pub fn fit(
    y: &[f64],
    terms: &[Term],
    init: &EngineParams,
    criterion: Criterion,
    config: &OptimizerConfig,
) -> Result<EngineFit> {
    let n = y.len();
    if n < 2 {
        return Err(GrfError::invalid("need at least two observations"));
    }
    for t in terms {
        if t.dim() != n {
            return Err(GrfError::dim(format!("term {} has size {}, data {n}", t.name, t.dim())));
        }
    }
    let vy = variance(y);
    let s_floor = VARIANCE_FLOOR * if vy > 0.0 { vy } else { 1.0 };
    let coords = Coordinates::new(terms, init);
    let x0 = coords.encode(terms, init);

    let starts = config.starts.max(1);
    let runs: Vec<Result<(Vec<f64>, StartReport)>> = (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut x = x0.clone();
            if s > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (s as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += config.jitter * z;
                }
                coords.bounds.project(&mut x);
            }
            let (ratios, shapes) = coords.decode(terms, &x);
            let initial = EngineParams {
                terms: ratios
                    .iter()
                    .zip(&shapes)
                    .map(|(r, s)| TermValue {
                        variance: r * init.noise,
                        shape: *s,
                    })
                    .collect(),
                noise: init.noise,
            };
            let initial_loglik = evaluate(y, terms, &initial, criterion)
                .map(|f| f.loglik)
                .unwrap_or(f64::NEG_INFINITY);

            let mut cache = KernelCache::new(terms.len());
            let objective = |x: &[f64]| -> f64 {
                let (ratios, shapes) = coords.decode(terms, x);
                let ks: Result<Vec<_>> = (0..terms.len()).map(|k| cache.get(k, &terms[k], shapes[k])).collect();
                let Ok(ks) = ks else { return f64::INFINITY };
                let refs: Vec<&DMatrix<f64>> = ks.iter().map(|k| k.as_ref()).collect();
                let Ok(v) = assemble(&refs, &ratios, 1.0) else { return f64::INFINITY };
                match SpdFactor::new(v) {
                    Ok(f) => -profiled(&f, y, criterion, s_floor).0,
                    Err(_) => f64::INFINITY,
                }
            };
            let m = nelder_mead(objective, &x, Some(&coords.bounds), &config.simplex);
            if !m.value.is_finite() {
                return Err(GrfError::Numerical(format!("start {s}: likelihood not finite anywhere visited")));
            }
            Ok((
                m.x,
                StartReport {
                    initial,
                    initial_loglik,
                    final_loglik: -m.value,
                    evals: m.evals,
                    converged: m.converged,
                },
            ))
        })
        .collect();

    let mut reports = Vec::with_capacity(starts);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut last_err = None;
    for r in runs {
        match r {
            Ok((x, rep)) => {
                if best.as_ref().is_none_or(|(_, b)| rep.final_loglik > *b) {
                    best = Some((x.clone(), rep.final_loglik));
                }
                reports.push(rep);
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((xbest, _)) = best else {
        return Err(last_err.unwrap_or_else(|| GrfError::Numerical("no start succeeded".into())));
    };

    // Recover the noise scale at the optimum.
    let (ratios, shapes) = coords.decode(terms, &xbest);
    let ks = terms
        .iter()
        .zip(&shapes)
        .map(|(t, s)| t.matrix(*s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DMatrix<f64>> = ks.iter().map(|k| k.as_ref()).collect();
    let fv = SpdFactor::new(assemble(&refs, &ratios, 1.0)?)?;
    let (_, scale) = profiled(&fv, y, criterion, s_floor);

    let make = |zero_small: bool| EngineParams {
        terms: ratios
            .iter()
            .zip(&shapes)
            .map(|(r, s)| {
                let v = r * scale;
                TermValue {
                    variance: if zero_small && v < s_floor { 0.0 } else { v },
                    shape: *s,
                }
            })
            .collect(),
        noise: scale,
    };
    let raw = evaluate(y, terms, &make(false), criterion)?;
    let mut out = match evaluate(y, terms, &make(true), criterion) {
        Ok(z) if z.loglik >= raw.loglik - 1e-9 => z,
        _ => raw,
    };
    out.starts = reports;
    Ok(out)
}

impl EngineFit {
    /// Conditional mean `σ_k² C_k α` of term `k` at the training points.
    pub fn term_mean(&self, k: usize) -> DVector<f64> {
        let v = self.params.terms[k].variance;
        if v == 0.0 {
            return DVector::zeros(self.alpha.len());
        }
        (self.kernels[k].as_ref() * &self.alpha) * v
    }
}

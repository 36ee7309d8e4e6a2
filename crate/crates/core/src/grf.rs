//! The Gaussian random field model
//! `y = μ1 + Z_g + Z_b + Z_s + ε` with
//! `Σ = σg² C_g(τ) + σb² C_b + σs² C_s(θ) + σε² I`.

use std::fmt;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{sq_dists_between_rows, Dataset};
use crate::engine::{self, Criterion, EngineFit, EngineParams, OptimizerConfig, SpatialTerm, Term, TermKernel, TermValue};
use crate::error::{GrfError, Result};
use crate::kernels::{gaussian_from_sq_dists, indicator_cross, lattice_cross_correlation, DEFAULT_BETA00};
use crate::linalg::SpdFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Genotype,
    Subpop,
    Spatial,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Genotype, Component::Subpop, Component::Spatial];
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Component::Genotype => "genotype",
            Component::Subpop => "subpop",
            Component::Spatial => "spatial",
        })
    }
}

/// Standard deviations, marker bandwidth, anisotropy and mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrfParams {
    pub sigma_g: f64,
    pub sigma_b: f64,
    pub sigma_s: f64,
    pub sigma_eps: f64,
    pub tau: f64,
    pub theta: f64,
    pub mu: f64,
}

impl GrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_g", self.sigma_g),
            ("sigma_b", self.sigma_b),
            ("sigma_s", self.sigma_s),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(GrfError::invalid(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.sigma_eps > 0.0) || !self.sigma_eps.is_finite() {
            return Err(GrfError::invalid(format!("sigma_eps must be positive, got {}", self.sigma_eps)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(GrfError::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(GrfError::invalid(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if !self.mu.is_finite() {
            return Err(GrfError::invalid("mu must be finite"));
        }
        Ok(())
    }

    pub fn variance(&self, c: Component) -> f64 {
        match c {
            Component::Genotype => self.sigma_g.powi(2),
            Component::Subpop => self.sigma_b.powi(2),
            Component::Spatial => self.sigma_s.powi(2),
        }
    }

    /// `σs² / σg²`, zero when either the spatial variance is zero or
    /// the genotypic variance vanishes.
    pub fn gamma(&self) -> f64 {
        let g = self.sigma_g.powi(2);
        if g > 0.0 {
            self.sigma_s.powi(2) / g
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub components: Vec<Component>,
    pub beta00: f64,
    pub optimizer: OptimizerConfig,
    /// Starting point of the search; moment-based values when absent.
    pub init: Option<GrfParams>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    pub fn with_components(components: &[Component]) -> Self {
        Self {
            components: components.to_vec(),
            beta00: DEFAULT_BETA00,
            optimizer: OptimizerConfig::default(),
            init: None,
        }
    }

    pub fn full() -> Self {
        Self::with_components(&Component::ALL)
    }

    pub fn without_spatial() -> Self {
        Self::with_components(&[Component::Genotype, Component::Subpop])
    }

    pub fn without_subpop() -> Self {
        Self::with_components(&[Component::Genotype, Component::Spatial])
    }

    pub fn genotype_only() -> Self {
        Self::with_components(&[Component::Genotype])
    }

    pub fn has(&self, c: Component) -> bool {
        self.components.contains(&c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.has(Component::Genotype) {
            return Err(GrfError::invalid("the genotype component is required"));
        }
        if !(self.beta00 > 0.0 && self.beta00 < 1.0) {
            return Err(GrfError::invalid(format!("beta00 must lie in (0, 1), got {}", self.beta00)));
        }
        if self.optimizer.starts == 0 {
            return Err(GrfError::invalid("at least one optimizer start is required"));
        }
        if let Some(p) = &self.init {
            p.validate()?;
        }
        Ok(())
    }

    /// Sorted, deduplicated components.
    fn normalized(&self) -> Vec<Component> {
        let mut c = self.components.clone();
        c.sort();
        c.dedup();
        c
    }
}

/// Short label of a component set: `GRF`, `GRF-Zs`, `GRF-Zb`, `GRF-Zbs`.
pub fn model_label(components: &[Component]) -> String {
    let mut s = String::from("GRF");
    let missing: String = [(Component::Subpop, 'b'), (Component::Spatial, 's')]
        .iter()
        .filter(|(c, _)| !components.contains(c))
        .map(|(_, ch)| *ch)
        .collect();
    if !missing.is_empty() {
        s.push_str("-Z");
        s.push_str(&missing);
    }
    s
}

/// Components that can be fitted on `data`: a subpopulation term with a
/// single level is indistinguishable from the mean and is dropped.
pub fn active_components(data: &Dataset, config: &ModelConfig) -> Vec<Component> {
    config
        .normalized()
        .into_iter()
        .filter(|&c| {
            if c == Component::Subpop && data.n_subpops() < 2 {
                warn!("subpopulation component dropped: only one subpopulation present");
                return false;
            }
            true
        })
        .collect()
}

fn terms_for(data: &Dataset, components: &[Component], beta00: f64) -> Vec<Term> {
    components
        .iter()
        .map(|c| match c {
            Component::Genotype => Term {
                name: c.to_string(),
                kernel: TermKernel::Marker(Arc::new(data.sq_dists())),
            },
            Component::Subpop => Term::fixed("subpop", indicator_cross(data.subpop(), data.subpop())),
            Component::Spatial => Term {
                name: c.to_string(),
                kernel: TermKernel::Spatial(Arc::new(SpatialTerm {
                    m1: data.layout().m1(),
                    m2: data.layout().m2(),
                    beta00,
                    plots: data.layout().plots().to_vec(),
                })),
            },
        })
        .collect()
}

fn to_engine(params: &GrfParams, components: &[Component]) -> EngineParams {
    EngineParams {
        terms: components
            .iter()
            .map(|&c| TermValue {
                variance: params.variance(c),
                shape: match c {
                    Component::Genotype => Some(params.tau),
                    Component::Subpop => None,
                    Component::Spatial => Some(params.theta),
                },
            })
            .collect(),
        noise: params.sigma_eps.powi(2),
    }
}

fn from_engine(p: &EngineParams, components: &[Component], mu: f64, fallback: &GrfParams) -> GrfParams {
    let mut out = GrfParams {
        sigma_g: 0.0,
        sigma_b: 0.0,
        sigma_s: 0.0,
        sigma_eps: p.noise.sqrt(),
        tau: fallback.tau,
        theta: fallback.theta,
        mu,
    };
    for (c, t) in components.iter().zip(&p.terms) {
        let sd = t.variance.max(0.0).sqrt();
        match c {
            Component::Genotype => {
                out.sigma_g = sd;
                out.tau = t.shape.unwrap_or(fallback.tau);
            }
            Component::Subpop => out.sigma_b = sd,
            Component::Spatial => {
                out.sigma_s = sd;
                out.theta = t.shape.unwrap_or(fallback.theta);
            }
        }
    }
    out
}

/// Median squared distance over distinct observation pairs, ignoring
/// zeros from replicated lines; `1` when every pair coincides.
pub fn median_sq_dist(data: &Dataset) -> f64 {
    let d = data.sq_dists();
    let n = d.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| d[(i, j)])
        .filter(|&x| x > 0.0)
        .collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}

/// Moment-based starting values: every variance `var(y)/4`, `τ` the
/// median squared distance, `θ = 0.5`.
pub fn moment_init(data: &Dataset) -> GrfParams {
    let v = engine::variance(data.y());
    let v = if v > 0.0 { v } else { 1.0 };
    let sd = (v / 4.0).sqrt();
    GrfParams {
        sigma_g: sd,
        sigma_b: sd,
        sigma_s: sd,
        sigma_eps: sd,
        tau: median_sq_dist(data),
        theta: 0.5,
        mu: data.y().iter().sum::<f64>() / data.len() as f64,
    }
}

/// `Σ` at `params` for the kernels of the given components, in the order
/// genotype, subpopulation, spatial.
pub fn assemble_sigma(params: &GrfParams, kernels: &[(Component, &DMatrix<f64>)]) -> Result<DMatrix<f64>> {
    params.validate()?;
    let ks: Vec<&DMatrix<f64>> = kernels.iter().map(|(_, k)| *k).collect();
    let vs: Vec<f64> = kernels.iter().map(|(c, _)| params.variance(*c)).collect();
    engine::assemble(&ks, &vs, params.sigma_eps.powi(2))
}

/// GLS mean `1ᵀΣ⁻¹y / 1ᵀΣ⁻¹1`.
pub fn profile_mu(sigma: &DMatrix<f64>, y: &[f64]) -> Result<f64> {
    if sigma.nrows() != y.len() {
        return Err(GrfError::dim(format!("covariance of size {} for {} responses", sigma.nrows(), y.len())));
    }
    let f = SpdFactor::new(sigma.clone())?;
    Ok(engine::gls_mean(&f, y))
}

/// Profile log-likelihood `-½ log|Σ| - ½ rᵀΣ⁻¹r` with `r = y - μ̂1`; the mean
/// stored in `params` is ignored.
pub fn profile_loglik(params: &GrfParams, data: &Dataset, config: &ModelConfig) -> Result<f64> {
    config.validate()?;
    params.validate()?;
    let comps = active_components(data, config);
    let terms = terms_for(data, &comps, config.beta00);
    Ok(engine::evaluate(data.y(), &terms, &to_engine(params, &comps), Criterion::Ml)?.loglik)
}

/// Serializable record of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSummary {
    pub model: String,
    pub params: GrfParams,
    pub loglik: f64,
    pub gamma_hat: f64,
    pub beta00: f64,
    pub components: Vec<Component>,
    pub n_obs: usize,
    pub config: ModelConfig,
    pub starts: Vec<StartSummary>,
}

/// Log-likelihood at one start and after its search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSummary {
    pub initial_loglik: f64,
    pub final_loglik: f64,
    pub evals: usize,
    pub converged: bool,
}

/// A fitted GRF. Immutable; holds the factorized covariance and kernels.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: GrfParams,
    pub loglik: f64,
    pub gamma_hat: f64,
    pub beta00: f64,
    pub components: Vec<Component>,
    pub config: ModelConfig,
    engine: EngineFit,
}

/// Fits the model by maximizing the profile likelihood.
pub fn fit(data: &Dataset, config: &ModelConfig) -> Result<FitResult> {
    config.validate()?;
    let comps = active_components(data, config);
    let terms = terms_for(data, &comps, config.beta00);
    let init = config.init.unwrap_or_else(|| moment_init(data));
    let e = engine::fit(data.y(), &terms, &to_engine(&init, &comps), Criterion::Ml, &config.optimizer)?;
    Ok(FitResult::from_engine(e, comps, config.clone(), &init, data.y()))
}

impl FitResult {
    fn from_engine(e: EngineFit, comps: Vec<Component>, config: ModelConfig, fallback: &GrfParams, y: &[f64]) -> Self {
        let params = from_engine(&e.params, &comps, e.mu, fallback);
        let vy = engine::variance(y);
        let floor = engine::VARIANCE_FLOOR * if vy > 0.0 { vy } else { 1.0 };
        let gamma_hat = if params.sigma_s.powi(2) < floor { 0.0 } else { params.gamma() };
        Self {
            params,
            loglik: e.loglik,
            gamma_hat,
            beta00: config.beta00,
            components: comps,
            config,
            engine: e,
        }
    }

    /// Rebuilds a fit at stored parameters on its training data.
    pub fn restore(summary: &FitSummary, train: &Dataset) -> Result<Self> {
        if summary.n_obs != train.len() {
            return Err(GrfError::dim(format!(
                "fit was made on {} observations, training data has {}",
                summary.n_obs,
                train.len()
            )));
        }
        let mut config = summary.config.clone();
        config.beta00 = summary.beta00;
        let comps = summary.components.clone();
        if comps.contains(&Component::Subpop) && train.n_subpops() < 2 {
            return Err(GrfError::invalid("fit has a subpopulation component but the data has one subpopulation"));
        }
        let terms = terms_for(train, &comps, summary.beta00);
        let e = engine::evaluate(train.y(), &terms, &to_engine(&summary.params, &comps), Criterion::Ml)?;
        Ok(Self::from_engine(e, comps, config, &summary.params, train.y()))
    }

    pub fn summary(&self) -> FitSummary {
        FitSummary {
            model: model_label(&self.components),
            params: self.params,
            loglik: self.loglik,
            gamma_hat: self.gamma_hat,
            beta00: self.beta00,
            components: self.components.clone(),
            n_obs: self.engine.alpha.len(),
            config: self.config.clone(),
            starts: self
                .engine
                .starts
                .iter()
                .map(|s| StartSummary {
                    initial_loglik: s.initial_loglik,
                    final_loglik: s.final_loglik,
                    evals: s.evals,
                    converged: s.converged,
                })
                .collect(),
        }
    }

    pub fn label(&self) -> String {
        model_label(&self.components)
    }

    pub fn n_obs(&self) -> usize {
        self.engine.alpha.len()
    }

    pub fn has(&self, c: Component) -> bool {
        self.components.contains(&c)
    }

    /// Kernel of an active component at the fitted shape parameters.
    pub fn kernel(&self, c: Component) -> Option<&DMatrix<f64>> {
        self.components
            .iter()
            .position(|&x| x == c)
            .map(|k| self.engine.kernels[k].as_ref())
    }

    /// Parameters each start began from, with their log-likelihoods.
    pub fn start_points(&self) -> Vec<(GrfParams, f64)> {
        self.engine
            .starts
            .iter()
            .map(|s| {
                let mut p = from_engine(&s.initial, &self.components, self.params.mu, &self.params);
                p.mu = self.params.mu;
                (p, s.initial_loglik)
            })
            .collect()
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.engine.factor
    }

    /// `σk² C_k` for every component, zero for inactive ones.
    fn scaled_kernel(&self, c: Component) -> DMatrix<f64> {
        let n = self.n_obs();
        match self.kernel(c) {
            Some(k) if self.params.variance(c) > 0.0 => k * self.params.variance(c),
            _ => DMatrix::zeros(n, n),
        }
    }

    /// Conditional means and joint covariance of `(Z_g, Z_b, Z_s)` given
    /// `y` under the fitted parameters.
    pub fn conditional_moments(&self, y: &[f64]) -> Result<ConditionalMoments> {
        let n = self.n_obs();
        if y.len() != n {
            return Err(GrfError::dim(format!("{} responses for a fit on {n}", y.len())));
        }
        let r = DVector::from_iterator(n, y.iter().map(|v| v - self.params.mu));
        let alpha = self.engine.factor.solve(&r);
        let blocks: Vec<DMatrix<f64>> = Component::ALL.iter().map(|&c| self.scaled_kernel(c)).collect();
        let means: Vec<DVector<f64>> = blocks.iter().map(|b| b * &alpha).collect();

        let mut stacked = DMatrix::zeros(n, 3 * n);
        for (k, b) in blocks.iter().enumerate() {
            stacked.columns_mut(k * n, n).copy_from(b);
        }
        let solved = self.engine.factor.solve_mat(&stacked);
        let mut cov = -(stacked.transpose() * &solved);
        for (k, b) in blocks.iter().enumerate() {
            let mut view = cov.view_mut((k * n, k * n), (n, n));
            view += b;
        }
        crate::linalg::symmetrize(&mut cov);
        let mut it = means.into_iter();
        Ok(ConditionalMoments {
            mean_g: it.next().unwrap(),
            mean_b: it.next().unwrap(),
            mean_s: it.next().unwrap(),
            cov,
        })
    }

    /// Predictions at `points` from the training data the fit was made on.
    pub fn predict(&self, train: &Dataset, points: &[TestPoint], target: Target) -> Result<Vec<f64>> {
        let n = self.n_obs();
        if train.len() != n {
            return Err(GrfError::dim(format!("fit was made on {n} observations, got {}", train.len())));
        }
        let m = points.len();
        let mut pred = DVector::from_element(m, self.params.mu);
        if m == 0 {
            return Ok(Vec::new());
        }
        let alpha = &self.engine.alpha;
        let p = train.genotypes().n_markers();
        for c in self.components.clone() {
            let v = self.params.variance(c);
            if v == 0.0 || (c == Component::Spatial && target == Target::GeneticValue) {
                continue;
            }
            let cross = match c {
                Component::Genotype => {
                    let mut x = DMatrix::zeros(m, p);
                    for (i, pt) in points.iter().enumerate() {
                        if pt.markers.len() != p {
                            return Err(GrfError::dim(format!(
                                "test point {i} has {} markers, training data {p}",
                                pt.markers.len()
                            )));
                        }
                        x.row_mut(i).copy_from_slice(&pt.markers);
                    }
                    let d = sq_dists_between_rows(&x, &train.observation_genotypes(), false);
                    gaussian_from_sq_dists(&d, self.params.tau)
                }
                Component::Subpop => {
                    let labels: Vec<Option<&str>> = points.iter().map(|p| p.subpop.as_deref()).collect();
                    let train_labels: Vec<Option<&str>> = train.subpop().iter().map(|s| Some(s.as_str())).collect();
                    for (i, l) in labels.iter().enumerate() {
                        if !train_labels.contains(l) {
                            warn!(
                                "test point {i}: subpopulation {:?} not in training data, its effect is set to zero",
                                l.unwrap_or("<none>")
                            );
                        }
                    }
                    let mut k = indicator_cross(&labels, &train_labels);
                    for (i, l) in labels.iter().enumerate() {
                        if l.is_none() {
                            k.row_mut(i).fill(0.0);
                        }
                    }
                    k
                }
                Component::Spatial => {
                    let layout = train.layout();
                    let mut rows = Vec::with_capacity(m);
                    for (i, pt) in points.iter().enumerate() {
                        match pt.plot {
                            Some((r, c)) if r >= 1 && c >= 1 && r <= layout.m1() && c <= layout.m2() => {
                                rows.push((r, c))
                            }
                            Some((r, c)) => {
                                return Err(GrfError::invalid(format!(
                                    "test point {i}: plot ({r}, {c}) lies outside the {}x{} field",
                                    layout.m1(),
                                    layout.m2()
                                )))
                            }
                            None => {
                                return Err(GrfError::invalid(format!(
                                    "test point {i} has no plot but the fit has a spatial component"
                                )))
                            }
                        }
                    }
                    let spec = crate::kernels::LatticeSpec::from_theta(
                        layout.m1(),
                        layout.m2(),
                        self.beta00,
                        self.params.theta,
                    )?;
                    lattice_cross_correlation(&spec, &rows, layout.plots())?
                }
            };
            pred += (cross * alpha) * v;
        }
        Ok(pred.iter().copied().collect())
    }

    /// Predicts the held-out observations `test` of `full`, where the fit
    /// was made on `full.subset(train_idx)`.
    pub fn predict_indices(&self, full: &Dataset, train_idx: &[usize], test_idx: &[usize], target: Target) -> Result<Vec<f64>> {
        let train = full.subset(train_idx)?;
        let points: Vec<TestPoint> = test_idx.iter().map(|&i| TestPoint::from_observation(full, i)).collect();
        self.predict(&train, &points, target)
    }

    /// `μ̂ + E[Z_g + Z_b | y]` at the training observations.
    pub fn genetic_values(&self) -> DVector<f64> {
        let mut out = DVector::from_element(self.n_obs(), self.params.mu);
        for (k, c) in self.components.iter().enumerate() {
            if matches!(c, Component::Genotype | Component::Subpop) {
                out += self.engine.term_mean(k);
            }
        }
        out
    }
}

/// What a prediction estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// The observable response: every active component.
    #[default]
    Phenotype,
    /// Genotype and subpopulation parts only.
    GeneticValue,
}

/// A location to predict: marker profile, subpopulation label (`None` when
/// unknown) and plot (`None` when off-field).
#[derive(Debug, Clone, PartialEq)]
pub struct TestPoint {
    pub markers: Vec<f64>,
    pub subpop: Option<String>,
    pub plot: Option<(usize, usize)>,
}

impl TestPoint {
    pub fn from_observation(data: &Dataset, i: usize) -> Self {
        Self {
            markers: data.markers(i),
            subpop: Some(data.subpop()[i].clone()),
            plot: Some(data.layout().plot(i)),
        }
    }
}

/// Conditional moments of the latent components.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    pub mean_g: DVector<f64>,
    pub mean_b: DVector<f64>,
    pub mean_s: DVector<f64>,
    /// Joint `3n × 3n` covariance in block order genotype, subpop, spatial.
    pub cov: DMatrix<f64>,
}

impl ConditionalMoments {
    pub fn n(&self) -> usize {
        self.mean_g.len()
    }

    /// Joint mean in block order.
    pub fn stacked_mean(&self) -> DVector<f64> {
        let n = self.n();
        let mut m = DVector::zeros(3 * n);
        m.rows_mut(0, n).copy_from(&self.mean_g);
        m.rows_mut(n, n).copy_from(&self.mean_b);
        m.rows_mut(2 * n, n).copy_from(&self.mean_s);
        m
    }

    pub fn block(&self, a: Component, b: Component) -> DMatrix<f64> {
        let n = self.n();
        let idx = |c: Component| Component::ALL.iter().position(|&x| x == c).unwrap() * n;
        self.cov.view((idx(a), idx(b)), (n, n)).into_owned()
    }

    pub fn var_g(&self) -> DMatrix<f64> {
        self.block(Component::Genotype, Component::Genotype)
    }

    pub fn var_b(&self) -> DMatrix<f64> {
        self.block(Component::Subpop, Component::Subpop)
    }

    pub fn var_s(&self) -> DMatrix<f64> {
        self.block(Component::Spatial, Component::Spatial)
    }
}

//! Conditional simulation of the latent components and the ranking study
//! that refits model variants on responses with scaled spatial strength.

use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_num, write_table, Dataset};
use crate::engine::OptimizerConfig;
use crate::error::{GrfError, Result};
use crate::evaluation::{accuracy, format_mean_sd, mean_sd, rng_for, spearman, top_l_median_rank};
use crate::grf::{self, model_label, Component, ConditionalMoments, FitResult, GrfParams, ModelConfig};
use crate::linalg::psd_sqrt;

/// Relative eigenvalue cutoff for the conditional covariance factor.
pub const CLIP_TOL: f64 = 1e-10;

/// One joint draw of the latent components at the observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Latents {
    pub g: DVector<f64>,
    pub b: DVector<f64>,
    pub s: DVector<f64>,
}

/// Draws `(Z_g, Z_b, Z_s)` from their joint conditional distribution.
/// Components with zero fitted variance are exactly zero.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    n: usize,
    /// Block positions (0 genotype, 1 subpop, 2 spatial) that are sampled.
    active: Vec<usize>,
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl LatentSampler {
    pub fn new(fit: &FitResult, y: &[f64]) -> Result<Self> {
        let moments = fit.conditional_moments(y)?;
        let active: Vec<usize> = Component::ALL
            .iter()
            .enumerate()
            .filter(|(_, &c)| fit.has(c) && fit.params.variance(c) > 0.0)
            .map(|(k, _)| k)
            .collect();
        Self::from_moments(&moments, &active)
    }

    /// Restricts the moments to the `active` blocks and factors their
    /// covariance by eigendecomposition, clipping eigenvalues below
    /// `CLIP_TOL · λmax`.
    pub fn from_moments(m: &ConditionalMoments, active: &[usize]) -> Result<Self> {
        let n = m.n();
        let full = m.stacked_mean();
        let idx: Vec<usize> = active.iter().flat_map(|&k| k * n..(k + 1) * n).collect();
        let mean = DVector::from_iterator(idx.len(), idx.iter().map(|&i| full[i]));
        let cov = DMatrix::from_fn(idx.len(), idx.len(), |i, j| m.cov[(idx[i], idx[j])]);
        let factor = if idx.is_empty() { cov } else { psd_sqrt(&cov, CLIP_TOL)? };
        if factor.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(GrfError::Numerical("conditional covariance could not be factored".into()));
        }
        Ok(Self {
            n,
            active: active.to_vec(),
            mean,
            factor,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Latents {
        let z = DVector::from_iterator(self.factor.ncols(), (0..self.factor.ncols()).map(|_| rng.sample(StandardNormal)));
        let x = &self.mean + &self.factor * z;
        let mut out = [DVector::zeros(self.n), DVector::zeros(self.n), DVector::zeros(self.n)];
        for (slot, &k) in self.active.iter().enumerate() {
            out[k].copy_from(&x.rows(slot * self.n, self.n));
        }
        let [g, b, s] = out;
        Latents { g, b, s }
    }
}

/// One joint conditional draw; deterministic in `seed`.
pub fn sample_latents(fit: &FitResult, y: &[f64], seed: u64) -> Result<Latents> {
    let sampler = LatentSampler::new(fit, y)?;
    Ok(sampler.draw(&mut rng_for(seed, 0)))
}

/// A synthetic response and the genetic value it is scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticResponse {
    pub y: Vec<f64>,
    /// `μ̂ + Z̃g + Z̃b`.
    pub genetic: Vec<f64>,
    pub noise: Vec<f64>,
}

/// `ỹ = μ̂ + Z̃g + Z̃b + c Z̃s + ẽ` with `ẽ ~ N(0, σ̂ε² I)` drawn from `rng`.
pub fn synth_response(params: &GrfParams, latents: &Latents, c: f64, rng: &mut ChaCha8Rng) -> SyntheticResponse {
    let n = latents.g.len();
    let noise: Vec<f64> = (0..n).map(|_| params.sigma_eps * rng.sample::<f64, _>(StandardNormal)).collect();
    let genetic: Vec<f64> = (0..n).map(|i| params.mu + latents.g[i] + latents.b[i]).collect();
    let y = (0..n).map(|i| genetic[i] + c * latents.s[i] + noise[i]).collect();
    SyntheticResponse { y, genetic, noise }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSpec {
    /// Spatial strength multipliers.
    pub c: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    /// Longest top-l curve.
    pub l_max: usize,
    /// Start every refit at the generating parameters.
    pub warm_start: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            c: vec![1.0, 2.0, 3.0, 4.0],
            replications: 100,
            seed: 0,
            l_max: 10,
            warm_start: false,
        }
    }
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        if self.c.is_empty() || self.c.iter().any(|&c| !(c.is_finite() && c >= 0.0)) {
            return Err(GrfError::invalid("spatial multipliers c must be finite and non-negative"));
        }
        if self.replications == 0 {
            return Err(GrfError::invalid("replications must be positive"));
        }
        Ok(())
    }
}

/// Settings of the refits in a ranking study.
#[derive(Debug, Clone, PartialEq)]
pub struct RefitOptions {
    pub beta00: f64,
    pub optimizer: OptimizerConfig,
}

/// One model variant, one multiplier, one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingRow {
    pub method: String,
    pub c: f64,
    pub replication: usize,
    pub accuracy: Option<f64>,
    pub spearman: Option<f64>,
    /// Median true rank of the top `l` picks, `l = 1..`.
    pub top_l: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingSummary {
    pub method: String,
    pub c: f64,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_spearman: f64,
    pub sd_spearman: f64,
    /// Average over replications of the top-l median rank.
    pub avg_median: Vec<f64>,
    pub replications: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankingReport {
    pub methods: Vec<String>,
    pub c: Vec<f64>,
    /// Ordered by replication, multiplier, then method.
    pub rows: Vec<RankingRow>,
}

impl RankingReport {
    pub fn summaries(&self) -> Vec<RankingSummary> {
        let mut out = Vec::new();
        for &c in &self.c {
            for m in &self.methods {
                let rows: Vec<&RankingRow> = self.rows.iter().filter(|r| &r.method == m && r.c == c).collect();
                let acc: Vec<Option<f64>> = rows.iter().map(|r| r.accuracy).collect();
                let rho: Vec<Option<f64>> = rows.iter().map(|r| r.spearman).collect();
                let (mean_accuracy, sd_accuracy, missing) = mean_sd(&acc);
                let (mean_spearman, sd_spearman, _) = mean_sd(&rho);
                let ok: Vec<&&RankingRow> = rows.iter().filter(|r| r.error.is_none()).collect();
                let l_max = ok.iter().map(|r| r.top_l.len()).min().unwrap_or(0);
                let avg_median = (0..l_max)
                    .map(|l| ok.iter().map(|r| r.top_l[l]).sum::<f64>() / ok.len() as f64)
                    .collect();
                out.push(RankingSummary {
                    method: m.clone(),
                    c,
                    mean_accuracy,
                    sd_accuracy,
                    mean_spearman,
                    sd_spearman,
                    avg_median,
                    replications: rows.len(),
                    missing,
                });
            }
        }
        out
    }

    pub fn summary(&self, method: &str, c: f64) -> Option<RankingSummary> {
        self.summaries().into_iter().find(|s| s.method == method && s.c == c)
    }

    /// `method,c,replication,accuracy,spearman,note`.
    pub fn write_metrics(&self, path: &Path, preamble: Option<&str>) -> Result<()> {
        let opt = |v: Option<f64>| v.map_or_else(String::new, format_num);
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    format_num(r.c),
                    r.replication.to_string(),
                    opt(r.accuracy),
                    opt(r.spearman),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        write_table(path, preamble, &["method", "c", "replication", "accuracy", "spearman", "note"], &rows)
    }

    /// `method,c,accuracy,spearman,...` with `"mean (sd)"` cells.
    pub fn write_summary(&self, path: &Path, preamble: Option<&str>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .summaries()
            .into_iter()
            .map(|s| {
                vec![
                    s.method,
                    format_num(s.c),
                    format_mean_sd(s.mean_accuracy, s.sd_accuracy),
                    format_mean_sd(s.mean_spearman, s.sd_spearman),
                    format_num(s.mean_accuracy),
                    format_num(s.sd_accuracy),
                    format_num(s.mean_spearman),
                    format_num(s.sd_spearman),
                    s.replications.to_string(),
                    s.missing.to_string(),
                ]
            })
            .collect();
        write_table(
            path,
            preamble,
            &[
                "method",
                "c",
                "accuracy",
                "spearman",
                "mean_accuracy",
                "sd_accuracy",
                "mean_spearman",
                "sd_spearman",
                "replications",
                "missing",
            ],
            &rows,
        )
    }

    /// `method,c,l,avg_median`.
    pub fn write_curves(&self, path: &Path, preamble: Option<&str>) -> Result<()> {
        let mut rows = Vec::new();
        for s in self.summaries() {
            for (l, v) in s.avg_median.iter().enumerate() {
                rows.push(vec![s.method.clone(), format_num(s.c), (l + 1).to_string(), format_num(*v)]);
            }
        }
        write_table(path, preamble, &["method", "c", "l", "avg_median"], &rows)
    }
}

/// Refits each variant on `ỹ` and scores predicted genetic values against
/// the true ones.
fn score(
    data: &Dataset,
    response: &SyntheticResponse,
    variant: &[Component],
    config: &ModelConfig,
    l_max: usize,
) -> Result<(Option<f64>, Option<f64>, Vec<f64>)> {
    let sim = data.with_y(response.y.clone())?;
    let mut cfg = config.clone();
    cfg.components = variant.to_vec();
    let fit = grf::fit(&sim, &cfg)?;
    let pred: Vec<f64> = fit.genetic_values().iter().copied().collect();
    Ok((
        accuracy(&pred, &response.genetic)?,
        spearman(&pred, &response.genetic)?,
        top_l_median_rank(&pred, &response.genetic, l_max.min(pred.len()))?,
    ))
}

/// Replication `r` draws latents and noise from stream `r` of `spec.seed`;
/// the same draws serve every multiplier, so only the spatial scale
/// differs between them.
pub fn ranking_study(
    data: &Dataset,
    fit: &FitResult,
    spec: &SimSpec,
    variants: &[Vec<Component>],
    refit: &RefitOptions,
) -> Result<RankingReport> {
    spec.validate()?;
    if variants.is_empty() {
        return Err(GrfError::invalid("no model variants to compare"));
    }
    if fit.n_obs() != data.len() {
        return Err(GrfError::dim(format!(
            "generating fit has {} observations, dataset {}",
            fit.n_obs(),
            data.len()
        )));
    }
    let sampler = LatentSampler::new(fit, data.y())?;
    let mut config = ModelConfig::full();
    config.beta00 = refit.beta00;
    config.optimizer = refit.optimizer.clone();
    if spec.warm_start {
        config.init = Some(fit.params);
    }
    let labels: Vec<String> = variants.iter().map(|v| model_label(v)).collect();
    info!("ranking study: {} replications, c = {:?}, variants {labels:?}", spec.replications, spec.c);
    let per_rep: Vec<Vec<RankingRow>> = (0..spec.replications)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng_for(spec.seed, rep);
            let latents = sampler.draw(&mut rng);
            let mut rows = Vec::new();
            for &c in &spec.c {
                let mut noise_rng = rng.clone();
                let response = synth_response(&fit.params, &latents, c, &mut noise_rng);
                for (v, label) in variants.iter().zip(&labels) {
                    let mut row = RankingRow {
                        method: label.clone(),
                        c,
                        replication: rep,
                        accuracy: None,
                        spearman: None,
                        top_l: Vec::new(),
                        error: None,
                    };
                    match score(data, &response, v, &config, spec.l_max) {
                        Ok((a, r, t)) => {
                            row.accuracy = a;
                            row.spearman = r;
                            row.top_l = t;
                        }
                        Err(e) => {
                            warn!("{label} failed at c = {c}, replication {rep}: {e}");
                            row.error = Some(e.to_string());
                        }
                    }
                    rows.push(row);
                }
            }
            rows
        })
        .collect();
    Ok(RankingReport {
        methods: labels,
        c: spec.c.clone(),
        rows: per_rep.into_iter().flatten().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grf::tests::{summary_at, toy};
    use rand::SeedableRng;

    fn params(sigma_b: f64, sigma_s: f64) -> GrfParams {
        GrfParams {
            sigma_g: 0.9,
            sigma_b,
            sigma_s,
            sigma_eps: 0.6,
            tau: 2.0,
            theta: 0.4,
            mu: 1.5,
        }
    }

    fn fit_at(data: &Dataset, p: GrfParams) -> FitResult {
        FitResult::restore(&summary_at(data, p, &Component::ALL), data).unwrap()
    }

    #[test]
    fn zero_variance_components_are_exactly_zero() {
        let d = toy(6, 3, 1);
        let f = fit_at(&d, params(0.0, 0.0));
        for seed in 0..5 {
            let l = sample_latents(&f, d.y(), seed).unwrap();
            assert!(l.b.iter().chain(l.s.iter()).all(|&v| v == 0.0));
            assert!(l.g.iter().any(|&v| v != 0.0));
        }
    }

    #[test]
    fn monte_carlo_moments_match_conditional_moments() {
        let d = toy(5, 3, 2);
        let f = fit_at(&d, params(0.7, 0.8));
        let m = f.conditional_moments(d.y()).unwrap();
        let sampler = LatentSampler::new(&f, d.y()).unwrap();
        let draws = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = DVector::zeros(15);
        let mut outer = DMatrix::zeros(15, 15);
        for _ in 0..draws {
            let l = sampler.draw(&mut rng);
            let mut x = DVector::zeros(15);
            x.rows_mut(0, 5).copy_from(&l.g);
            x.rows_mut(5, 5).copy_from(&l.b);
            x.rows_mut(10, 5).copy_from(&l.s);
            sum += &x;
            outer += &x * x.transpose();
        }
        let k = draws as f64;
        let mean = &sum / k;
        let cov = (outer - &mean * mean.transpose() * k) / (k - 1.0);
        let var_g = m.var_g();
        for i in 0..5 {
            let se = (var_g[(i, i)] / k).sqrt();
            assert!((mean[i] - m.mean_g[i]).abs() < 3.0 * se, "component {i}");
        }
        let rel = (&cov - &m.cov).norm() / m.cov.norm();
        assert!(rel < 0.1, "relative Frobenius error {rel}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = toy(6, 3, 4);
        let f = fit_at(&d, params(0.5, 0.5));
        assert_eq!(sample_latents(&f, d.y(), 9).unwrap(), sample_latents(&f, d.y(), 9).unwrap());
        assert_ne!(sample_latents(&f, d.y(), 9).unwrap(), sample_latents(&f, d.y(), 10).unwrap());
    }

    #[test]
    fn response_bookkeeping() {
        let d = toy(8, 4, 5);
        let p = params(0.5, 1.0);
        let f = fit_at(&d, p);
        let l = sample_latents(&f, d.y(), 1).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(7);
        let r0 = synth_response(&p, &l, 0.0, &mut rng.clone());
        let r3 = synth_response(&p, &l, 3.0, &mut rng.clone());
        assert_eq!(r0.genetic, r3.genetic);
        assert_eq!(r0.noise, r3.noise);
        for i in 0..8 {
            assert_eq!(r0.y[i], r0.genetic[i] + r0.noise[i]);
            assert_eq!(r3.y[i], r3.genetic[i] + 3.0 * l.s[i] + r3.noise[i]);
            assert_eq!(r0.genetic[i], p.mu + l.g[i] + l.b[i]);
        }
    }

    #[test]
    fn response_variance_grows_with_c() {
        let d = toy(30, 5, 6);
        let p = params(0.5, 1.0);
        let f = fit_at(&d, p);
        let l = sample_latents(&f, d.y(), 2).unwrap();
        let rng = ChaCha8Rng::seed_from_u64(8);
        let var: Vec<f64> = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&c| crate::engine::variance(&synth_response(&p, &l, c, &mut rng.clone()).y))
            .collect();
        assert!(var.windows(2).all(|w| w[0] < w[1]), "{var:?}");
    }

    #[test]
    fn small_study_is_reproducible() {
        let d = toy(16, 4, 7);
        let f = fit_at(&d, params(0.5, 0.8));
        let spec = SimSpec {
            c: vec![1.0, 2.0],
            replications: 3,
            seed: 5,
            l_max: 4,
            warm_start: false,
        };
        let refit = RefitOptions {
            beta00: f.beta00,
            optimizer: OptimizerConfig {
                starts: 1,
                ..OptimizerConfig::default()
            },
        };
        let variants = vec![Component::ALL.to_vec(), vec![Component::Genotype, Component::Subpop]];
        let a = ranking_study(&d, &f, &spec, &variants, &refit).unwrap();
        assert_eq!(a.rows.len(), 3 * 2 * 2);
        assert!(a.rows.iter().all(|r| r.error.is_none() && r.top_l.len() == 4));
        assert_eq!(a, ranking_study(&d, &f, &spec, &variants, &refit).unwrap());
        let s = a.summary("GRF-Zs", 2.0).unwrap();
        assert_eq!((s.replications, s.avg_median.len()), (3, 4));
    }

    #[test]
    fn negative_multiplier_rejected() {
        let spec = SimSpec {
            c: vec![-1.0],
            ..SimSpec::default()
        };
        assert!(spec.validate().is_err());
    }
}

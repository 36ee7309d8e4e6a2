//! Simulated field trials with known genotypic, subpopulation and spatial
//! effects.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{pairwise_sq_dists, Dataset, FieldLayout, GenotypeMatrix};
use crate::error::{GrfError, Result};
use crate::kernels::{gaussian_from_sq_dists, lattice_correlation, LatticeSpec, DEFAULT_BETA00};
use crate::linalg::psd_sqrt;

/// Where each subpopulation's plots lie in the field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubpopPlacement {
    /// Contiguous bands of columns, one per subpopulation.
    #[default]
    Bands,
    /// Plots assigned at random across the whole field.
    Interleaved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDesign {
    /// Field rows.
    pub m1: usize,
    /// Field columns.
    pub m2: usize,
    pub n_lines: usize,
    /// Plots per line.
    pub replicates: usize,
    pub n_markers: usize,
    pub n_subpops: usize,
    pub subpop_placement: SubpopPlacement,
    pub sigma_g: f64,
    pub sigma_b: f64,
    pub sigma_s: f64,
    pub sigma_eps: f64,
    /// Marker bandwidth; the median squared line distance when absent.
    pub tau: Option<f64>,
    pub theta: f64,
    pub beta00: f64,
    pub mu: f64,
}

impl Default for SyntheticDesign {
    fn default() -> Self {
        Self {
            m1: 15,
            m2: 20,
            n_lines: 150,
            replicates: 2,
            n_markers: 50,
            n_subpops: 4,
            subpop_placement: SubpopPlacement::Bands,
            sigma_g: 1.0,
            sigma_b: 1.0,
            sigma_s: 1.0,
            sigma_eps: 0.5,
            tau: None,
            theta: 0.5,
            beta00: DEFAULT_BETA00,
            mu: 10.0,
        }
    }
}

/// A simulated trial with the effects that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticTrial {
    pub data: Dataset,
    pub g: DVector<f64>,
    pub b: DVector<f64>,
    pub s: DVector<f64>,
    pub eps: DVector<f64>,
    /// Marker bandwidth used for `g`.
    pub tau: f64,
}

impl SyntheticTrial {
    /// `μ + g + b` per observation.
    pub fn genetic_values(&self, mu: f64) -> DVector<f64> {
        self.g.add_scalar(mu) + &self.b
    }
}

/// Draws trials from one design. The spatial factor depends only on the
/// design and is computed once.
pub struct TrialGenerator {
    design: SyntheticDesign,
    spatial_sqrt: Option<DMatrix<f64>>,
    plots_by_subpop: Vec<Vec<(usize, usize)>>,
}

impl TrialGenerator {
    pub fn new(design: SyntheticDesign) -> Result<Self> {
        let n = design.n_lines * design.replicates;
        if n < 2 || n > design.m1 * design.m2 {
            return Err(GrfError::invalid(format!(
                "{n} observations do not fit a {}x{} field",
                design.m1, design.m2
            )));
        }
        if design.n_subpops == 0 || design.n_subpops > design.n_lines {
            return Err(GrfError::invalid("need between 1 and n_lines subpopulations"));
        }
        if design.n_markers == 0 {
            return Err(GrfError::invalid("need at least one marker"));
        }
        // Column-major plot order; subpopulation k takes the k-th slice.
        let all: Vec<(usize, usize)> = (1..=design.m2)
            .flat_map(|c| (1..=design.m1).map(move |r| (r, c)))
            .take(n)
            .collect();
        let mut plots_by_subpop = Vec::with_capacity(design.n_subpops);
        let mut start = 0;
        for k in 0..design.n_subpops {
            let lines = line_range(&design, k);
            let len = lines.len() * design.replicates;
            plots_by_subpop.push(all[start..start + len].to_vec());
            start += len;
        }
        let spatial_sqrt = if design.sigma_s > 0.0 {
            let spec = LatticeSpec::from_theta(design.m1, design.m2, design.beta00, design.theta)?;
            Some(psd_sqrt(&lattice_correlation(&spec, &all)?, 1e-10)?)
        } else {
            None
        };
        Ok(Self {
            design,
            spatial_sqrt,
            plots_by_subpop,
        })
    }

    pub fn design(&self) -> &SyntheticDesign {
        &self.design
    }

    /// One trial; deterministic in `seed`.
    pub fn draw(&self, seed: u64) -> Result<SyntheticTrial> {
        let d = &self.design;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = d.n_lines * d.replicates;

        let mut x = DMatrix::zeros(d.n_lines, d.n_markers);
        for j in 0..d.n_markers {
            let p: f64 = rng.gen_range(0.1..0.9);
            let bin = Binomial::new(2, p).map_err(|e| GrfError::invalid(e.to_string()))?;
            for i in 0..d.n_lines {
                x[(i, j)] = bin.sample(&mut rng) as f64;
            }
        }
        let geno = GenotypeMatrix::from_values(x)?;
        let dist = pairwise_sq_dists(&geno);
        let tau = match d.tau {
            Some(t) => t,
            None => median_offdiag(&dist),
        };

        let mut pool: Vec<(usize, usize)> = self.plots_by_subpop.concat();
        if d.subpop_placement == SubpopPlacement::Interleaved {
            pool.shuffle(&mut rng);
        }
        // Observations grouped by subpopulation, shuffled within its plots.
        let mut obs_line = Vec::with_capacity(n);
        let mut obs_plot = Vec::with_capacity(n);
        let mut obs_sub = Vec::with_capacity(n);
        let mut offset = 0;
        for (k, band) in self.plots_by_subpop.iter().enumerate() {
            let plots = &pool[offset..offset + band.len()];
            offset += band.len();
            let mut lines: Vec<usize> = line_range(d, k).flat_map(|l| std::iter::repeat_n(l, d.replicates)).collect();
            lines.shuffle(&mut rng);
            for (l, &p) in lines.into_iter().zip(plots) {
                obs_line.push(l);
                obs_plot.push(p);
                obs_sub.push(k);
            }
        }
        // Back to column-major plot order so observation i sits at plot i.
        let order = {
            let mut o: Vec<usize> = (0..n).collect();
            o.sort_by_key(|&i| (obs_plot[i].1, obs_plot[i].0));
            o
        };

        let g_lines = if d.sigma_g > 0.0 {
            let f = psd_sqrt(&gaussian_from_sq_dists(&dist, tau), 1e-10)?;
            &f * normals(&mut rng, d.n_lines) * d.sigma_g
        } else {
            DVector::zeros(d.n_lines)
        };
        let b_levels = normals(&mut rng, d.n_subpops) * d.sigma_b;
        let s_plots = match &self.spatial_sqrt {
            Some(f) => f * normals(&mut rng, n) * d.sigma_s,
            None => DVector::zeros(n),
        };
        let eps = normals(&mut rng, n) * d.sigma_eps;

        let g = DVector::from_iterator(n, order.iter().map(|&i| g_lines[obs_line[i]]));
        let b = DVector::from_iterator(n, order.iter().map(|&i| b_levels[obs_sub[i]]));
        let s = s_plots;
        let y: Vec<f64> = (0..n).map(|i| d.mu + g[i] + b[i] + s[i] + eps[i]).collect();

        let data = Dataset::new(
            (0..n).map(|i| format!("obs{}", i + 1)).collect(),
            y,
            Arc::new(geno),
            order.iter().map(|&i| obs_line[i]).collect(),
            order.iter().map(|&i| format!("sub{}", obs_sub[i] + 1)).collect(),
            FieldLayout::new(d.m1, d.m2, order.iter().map(|&i| obs_plot[i]).collect())?,
        )?;
        Ok(SyntheticTrial {
            data,
            g,
            b,
            s,
            eps,
            tau,
        })
    }
}

fn line_range(d: &SyntheticDesign, k: usize) -> std::ops::Range<usize> {
    (k * d.n_lines / d.n_subpops)..((k + 1) * d.n_lines / d.n_subpops)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)))
}

fn median_offdiag(d: &DMatrix<f64>) -> f64 {
    let n = d.nrows();
    let mut v: Vec<f64> = (0..n).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| d[(i, j)]).collect();
    if v.is_empty() {
        return 1.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v[v.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

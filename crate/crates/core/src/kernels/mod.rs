//! Covariance building blocks.

pub mod lattice;

use std::collections::HashMap;
use std::hash::Hash;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::FieldLayout;
use crate::error::{GrfError, Result};

pub use lattice::{
    build_precision, lattice_correlation, lattice_cross_correlation, path_laplacian, LatticeSpec,
    DEFAULT_BETA00,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Marker,
    Subpop,
    Spatial,
    Kinship,
    Linear,
    Identity,
    Indicator,
}

impl KernelKind {
    /// Kinds whose diagonal is one by construction.
    pub fn has_unit_diagonal(self) -> bool {
        matches!(
            self,
            KernelKind::Marker
                | KernelKind::Subpop
                | KernelKind::Spatial
                | KernelKind::Identity
                | KernelKind::Indicator
        )
    }
}

/// Symmetric PSD similarity matrix with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    values: DMatrix<f64>,
    kind: KernelKind,
}

impl KernelMatrix {
    pub fn new(values: DMatrix<f64>, kind: KernelKind) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(GrfError::dim(format!(
                "kernel must be square, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        Ok(Self { values, kind })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            values: DMatrix::identity(n, n),
            kind: KernelKind::Identity,
        }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    /// Largest `|K_ij - K_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.values.abs().max().max(f64::MIN_POSITIVE);
        (&self.values - self.values.transpose()).abs().max() / scale
    }

    /// Largest `|K_ii - 1|`.
    pub fn diagonal_defect(&self) -> f64 {
        self.values
            .diagonal()
            .iter()
            .map(|d| (d - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        crate::data::write_matrix_csv(path, &self.values)
    }
}

/// Gaussian marker kernel `exp(-d² / tau)` from squared distances.
pub fn marker_kernel(sq_dists: &DMatrix<f64>, tau: f64) -> Result<KernelMatrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(GrfError::invalid(format!("tau must be positive, got {tau}")));
    }
    KernelMatrix::new(gaussian_from_sq_dists(sq_dists, tau), KernelKind::Marker)
}

pub(crate) fn gaussian_from_sq_dists(sq_dists: &DMatrix<f64>, tau: f64) -> DMatrix<f64> {
    let inv = 1.0 / tau;
    sq_dists.map(|d| (-d * inv).exp())
}

/// `1` where labels agree, `0` elsewhere.
pub fn indicator_kernel<T: Eq>(labels: &[T], kind: KernelKind) -> KernelMatrix {
    KernelMatrix {
        values: indicator_cross(labels, labels),
        kind,
    }
}

/// Subpopulation indicator kernel.
pub fn subpop_kernel<T: Eq>(labels: &[T]) -> KernelMatrix {
    indicator_kernel(labels, KernelKind::Subpop)
}

/// Indicator cross-kernel between two label lists.
pub fn indicator_cross<T: Eq>(rows: &[T], cols: &[T]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, k| if rows[i] == cols[k] { 1.0 } else { 0.0 })
}

/// Dense integer codes for labels, in order of first appearance.
pub fn label_codes<T: Eq + Hash + Clone>(labels: &[T]) -> (Vec<usize>, Vec<T>) {
    let mut map = HashMap::new();
    let mut levels = Vec::new();
    let codes = labels
        .iter()
        .map(|l| {
            *map.entry(l.clone()).or_insert_with(|| {
                levels.push(l.clone());
                levels.len() - 1
            })
        })
        .collect();
    (codes, levels)
}

/// Standardized spatial kernel for the observations of `layout`.
pub fn spatial_kernel(spec: &LatticeSpec, layout: &FieldLayout) -> Result<KernelMatrix> {
    if layout.m1() > spec.m1() || layout.m2() > spec.m2() {
        return Err(GrfError::dim(format!(
            "layout {}x{} does not fit lattice {}x{}",
            layout.m1(),
            layout.m2(),
            spec.m1(),
            spec.m2()
        )));
    }
    let c = lattice_correlation(spec, layout.plots())?;
    KernelMatrix::new(c, KernelKind::Spatial)
}

/// Allele frequencies `mean / max dosage` per marker column.
pub fn allele_frequencies(x: &DMatrix<f64>) -> Vec<f64> {
    let max = x.iter().copied().fold(0.0_f64, f64::max);
    let n = x.nrows() as f64;
    x.column_iter()
        .map(|col| if max > 0.0 { col.sum() / n / max } else { 0.0 })
        .collect()
}

/// VanRaden genomic relationship `X̃ X̃ᵀ / Σ 2p(1-p)` with columns of `x`
/// centered. Monomorphic markers (`p` of 0 or 1) are skipped.
pub fn vanraden_kinship(x: &DMatrix<f64>, freqs: &[f64]) -> Result<KernelMatrix> {
    if freqs.len() != x.ncols() {
        return Err(GrfError::dim(format!(
            "{} frequencies for {} markers",
            freqs.len(),
            x.ncols()
        )));
    }
    let keep: Vec<usize> = (0..x.ncols())
        .filter(|&j| freqs[j] > 0.0 && freqs[j] < 1.0)
        .collect();
    let denom: f64 = keep.iter().map(|&j| 2.0 * freqs[j] * (1.0 - freqs[j])).sum();
    if keep.is_empty() || denom <= 0.0 {
        return Err(GrfError::invalid("kinship denominator is zero: every marker is monomorphic"));
    }
    let n = x.nrows();
    let mut xc = DMatrix::zeros(n, keep.len());
    for (k, &j) in keep.iter().enumerate() {
        let col = x.column(j);
        let mean = col.sum() / n as f64;
        for i in 0..n {
            xc[(i, k)] = col[i] - mean;
        }
    }
    let k = &xc * xc.transpose() / denom;
    KernelMatrix::new(k, KernelKind::Kinship)
}

/// Linear kernel `X Xᵀ` on raw dosages.
pub fn rr_kernel(x: &DMatrix<f64>) -> KernelMatrix {
    KernelMatrix {
        values: x * x.transpose(),
        kind: KernelKind::Linear,
    }
}

//! Stationary lattice autoregression on a padded field and the standardized
//! spatial kernel derived from it.
//!
//! The observed `m1 x m2` field is embedded in an `(m1+4) x (m2+4)` array
//! with two rows/columns of virtual plots on every side. Observed plot
//! `(r, c)` (1-based) sits at padded position `(r+2, c+2)` and padded cells
//! are enumerated column-major.

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{GrfError, Result};
use crate::linalg::BandMatrix;

/// Virtual plots added on each side of the field.
pub const PADDING: usize = 2;

/// Default diagonal weight of the precision matrix.
pub const DEFAULT_BETA00: f64 = 0.001;

/// `k x k` Laplacian of a path graph (free ends).
pub fn path_laplacian(k: usize) -> Result<DMatrix<f64>> {
    if k == 0 {
        return Err(GrfError::invalid("path length must be positive"));
    }
    let mut w = DMatrix::zeros(k, k);
    for i in 0..k.saturating_sub(1) {
        w[(i, i)] += 1.0;
        w[(i + 1, i + 1)] += 1.0;
        w[(i, i + 1)] = -1.0;
        w[(i + 1, i)] = -1.0;
    }
    Ok(w)
}

/// Lattice dimensions and autoregression weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSpec {
    m1: usize,
    m2: usize,
    beta00: f64,
    beta01: f64,
    beta10: f64,
}

impl LatticeSpec {
    /// Checks `beta00 > 0`, non-negative neighbour weights and
    /// `beta00 + 2 (beta01 + beta10) = 1`.
    pub fn new(m1: usize, m2: usize, beta00: f64, beta01: f64, beta10: f64) -> Result<Self> {
        if m1 == 0 || m2 == 0 {
            return Err(GrfError::invalid("lattice dimensions must be positive"));
        }
        if !(beta00 > 0.0) || !beta00.is_finite() {
            return Err(GrfError::invalid(format!(
                "beta00 must be positive (got {beta00}); the intrinsic limit is not supported"
            )));
        }
        if !(beta01 >= 0.0) || !(beta10 >= 0.0) {
            return Err(GrfError::invalid("beta01 and beta10 must be non-negative"));
        }
        if (beta00 + 2.0 * (beta01 + beta10) - 1.0).abs() > 1e-12 {
            return Err(GrfError::invalid(format!(
                "beta00 + 2(beta01 + beta10) = {} != 1",
                beta00 + 2.0 * (beta01 + beta10)
            )));
        }
        Ok(Self {
            m1,
            m2,
            beta00,
            beta01,
            beta10,
        })
    }

    /// `theta` splits the neighbour weight between the two directions:
    /// `beta01 = theta (1 - beta00) / 2`, `beta10 = (1 - theta) (1 - beta00) / 2`.
    pub fn from_theta(m1: usize, m2: usize, beta00: f64, theta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(GrfError::invalid(format!("theta {theta} outside [0, 1]")));
        }
        let half = (1.0 - beta00) / 2.0;
        Self::new(m1, m2, beta00, theta * half, (1.0 - theta) * half)
    }

    pub fn m1(&self) -> usize {
        self.m1
    }
    pub fn m2(&self) -> usize {
        self.m2
    }
    /// Padded row count.
    pub fn m1p(&self) -> usize {
        self.m1 + 2 * PADDING
    }
    /// Padded column count.
    pub fn m2p(&self) -> usize {
        self.m2 + 2 * PADDING
    }
    pub fn beta00(&self) -> f64 {
        self.beta00
    }
    pub fn beta01(&self) -> f64 {
        self.beta01
    }
    pub fn beta10(&self) -> f64 {
        self.beta10
    }
    pub fn theta(&self) -> f64 {
        let s = self.beta01 + self.beta10;
        if s > 0.0 {
            self.beta01 / s
        } else {
            0.5
        }
    }

    /// 0-based column-major index of observed plot `(r, c)` (1-based).
    pub fn padded_index(&self, r: usize, c: usize) -> usize {
        (c + PADDING - 1) * self.m1p() + (r + PADDING - 1)
    }
}

/// Precision matrix `beta00 I + beta01 (I ⊗ W_m1') + beta10 (W_m2' ⊗ I)` of
/// the padded array, in column-major cell order.
pub fn build_precision(spec: &LatticeSpec) -> BandMatrix {
    let (m1p, m2p) = (spec.m1p(), spec.m2p());
    let mut w = BandMatrix::zeros(m1p * m2p, m1p);
    let lap_diag = |i: usize, k: usize| -> f64 {
        if k == 1 {
            0.0
        } else if i == 0 || i == k - 1 {
            1.0
        } else {
            2.0
        }
    };
    for pc in 0..m2p {
        for pr in 0..m1p {
            let a = pc * m1p + pr;
            let d = spec.beta00 + spec.beta01 * lap_diag(pr, m1p) + spec.beta10 * lap_diag(pc, m2p);
            w.add(a, a, d);
            if pr + 1 < m1p && spec.beta01 != 0.0 {
                w.add(a, a + 1, -spec.beta01);
            }
            if pc + 1 < m2p && spec.beta10 != 0.0 {
                w.add(a, a + m1p, -spec.beta10);
            }
        }
    }
    w
}

/// Orthonormal eigenpairs of the `k`-point path Laplacian: cosine modes
/// `cos(π j (i + ½) / k)` with eigenvalues `2 - 2 cos(π j / k)`.
/// Column `j` of the returned matrix is mode `j`.
fn path_modes(k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let kf = k as f64;
    let pi = std::f64::consts::PI;
    let values = (0..k).map(|j| 2.0 - 2.0 * (pi * j as f64 / kf).cos()).collect();
    let modes = DMatrix::from_fn(k, k, |i, j| {
        let norm = if j == 0 { (1.0 / kf).sqrt() } else { (2.0 / kf).sqrt() };
        norm * (pi * j as f64 * (i as f64 + 0.5) / kf).cos()
    });
    (values, modes)
}

/// Entries of `W⁻¹` between a set of plots.
///
/// `W` is a Kronecker sum, so with cosine modes `u` of the row path and
/// `v` of the column path,
/// `W⁻¹[(r,c),(r',c')] = Σ_k v_k(c) v_k(c') T_k⁻¹[r,r']` where
/// `T_k = (beta00 + beta10 λ_k) I + beta01 W_m1'` is diagonal in `u`.
struct InverseColumns {
    /// `cov[i][j] = (W⁻¹)_{a(i), a(j)}` over the unique plots.
    cov: DMatrix<f64>,
    index: HashMap<(usize, usize), usize>,
}

fn distinct(values: impl Iterator<Item = usize>) -> (Vec<usize>, HashMap<usize, usize>) {
    let mut list = Vec::new();
    let mut pos = HashMap::new();
    for v in values {
        pos.entry(v).or_insert_with(|| {
            list.push(v);
            list.len() - 1
        });
    }
    (list, pos)
}

fn inverse_columns(spec: &LatticeSpec, plots: &[(usize, usize)]) -> Result<InverseColumns> {
    let mut index = HashMap::with_capacity(plots.len());
    let mut unique = Vec::with_capacity(plots.len());
    for &(r, c) in plots {
        if r == 0 || c == 0 || r > spec.m1 || c > spec.m2 {
            return Err(GrfError::invalid(format!(
                "plot ({r},{c}) outside the {}x{} lattice",
                spec.m1, spec.m2
            )));
        }
        index.entry((r, c)).or_insert_with(|| {
            unique.push((r, c));
            unique.len() - 1
        });
    }
    let (m1p, m2p) = (spec.m1p(), spec.m2p());
    let (rows, row_pos) = distinct(unique.iter().map(|p| p.0 + PADDING - 1));
    let (cols, col_pos) = distinct(unique.iter().map(|p| p.1 + PADDING - 1));
    let (lam1, u1) = path_modes(m1p);
    let (lam2, u2) = path_modes(m2p);
    let (nr, nc) = (rows.len(), cols.len());

    // t[(a * nr + b) * m2p + k] = T_k⁻¹[rows[a], rows[b]]
    let mut t = vec![0.0; nr * nr * m2p];
    let mut inv_eig = vec![0.0; m1p];
    for k in 0..m2p {
        for (j, l1) in lam1.iter().enumerate() {
            let d = spec.beta00 + spec.beta01 * l1 + spec.beta10 * lam2[k];
            if !(d > 0.0) {
                return Err(GrfError::NotPositiveDefinite(format!("lattice precision eigenvalue {d:e}")));
            }
            inv_eig[j] = 1.0 / d;
        }
        for a in 0..nr {
            for b in 0..=a {
                let v = if spec.beta01 == 0.0 && a != b {
                    0.0
                } else {
                    (0..m1p).map(|j| u1[(rows[a], j)] * u1[(rows[b], j)] * inv_eig[j]).sum()
                };
                t[(a * nr + b) * m2p + k] = v;
                t[(b * nr + a) * m2p + k] = v;
            }
        }
    }
    // w[(a * nc + b) * m2p + k] = v_k(cols[a]) v_k(cols[b])
    let mut w = vec![0.0; nc * nc * m2p];
    for a in 0..nc {
        for b in 0..nc {
            for k in 0..m2p {
                w[(a * nc + b) * m2p + k] = u2[(cols[a], k)] * u2[(cols[b], k)];
            }
        }
    }

    let u = unique.len();
    let coords: Vec<(usize, usize)> = unique
        .iter()
        .map(|&(r, c)| (row_pos[&(r + PADDING - 1)], col_pos[&(c + PADDING - 1)]))
        .collect();
    let mut cov = DMatrix::zeros(u, u);
    for i in 0..u {
        let (ri, ci) = coords[i];
        for j in 0..=i {
            let (rj, cj) = coords[j];
            let v = if spec.beta10 == 0.0 && ci != cj {
                0.0
            } else {
                let tt = &t[(ri * nr + rj) * m2p..(ri * nr + rj + 1) * m2p];
                let ww = &w[(ci * nc + cj) * m2p..(ci * nc + cj + 1) * m2p];
                tt.iter().zip(ww).map(|(a, b)| a * b).sum()
            };
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok(InverseColumns { cov, index })
}

impl InverseColumns {
    fn positions(&self, plots: &[(usize, usize)]) -> Vec<usize> {
        plots.iter().map(|p| self.index[p]).collect()
    }

    fn corr(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 1.0;
        }
        self.cov[(i, j)] / (self.cov[(i, i)] * self.cov[(j, j)]).sqrt()
    }
}

/// Correlations `D^{-1/2} W⁻¹ D^{-1/2}` between the given plots, where `D`
/// is the diagonal of `W⁻¹`. Unit diagonal by construction.
pub fn lattice_correlation(spec: &LatticeSpec, plots: &[(usize, usize)]) -> Result<DMatrix<f64>> {
    let inv = inverse_columns(spec, plots)?;
    let pos = inv.positions(plots);
    let n = plots.len();
    if pos.iter().enumerate().all(|(i, &p)| i == p) {
        let s: Vec<f64> = (0..n).map(|i| 1.0 / inv.cov[(i, i)].sqrt()).collect();
        let mut c = inv.cov;
        for j in 0..n {
            for (i, v) in c.column_mut(j).iter_mut().enumerate() {
                *v = if i == j { 1.0 } else { *v * s[i] * s[j] };
            }
        }
        return Ok(c);
    }
    Ok(DMatrix::from_fn(n, n, |i, j| inv.corr(pos[i], pos[j])))
}

/// Correlations between two plot sets on the same lattice.
pub fn lattice_cross_correlation(
    spec: &LatticeSpec,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> Result<DMatrix<f64>> {
    let all: Vec<_> = rows.iter().chain(cols).copied().collect();
    let inv = inverse_columns(spec, &all)?;
    let (pr, pc) = (inv.positions(rows), inv.positions(cols));
    Ok(DMatrix::from_fn(rows.len(), cols.len(), |i, j| inv.corr(pr[i], pc[j])))
}

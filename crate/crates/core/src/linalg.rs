//! Dense and banded symmetric factorizations used by the kernels and the
//! likelihood.

use faer::linalg::solvers::{Llt, Solve};
use faer::{MatMut, MatRef, Side};
use nalgebra::{DMatrix, DVector};

use crate::error::{GrfError, Result};

/// Symmetric matrix stored as its lower band.
///
/// Row `i` keeps entries `(i, i - bw) ..= (i, i)`; entries left of column 0
/// are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![0.0; n * (bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    /// Adds `v` to `(i, j)` and its mirror.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        assert!(i - j <= self.bw, "entry ({i},{j}) outside bandwidth {}", self.bw);
        let s = self.slot(i, j);
        self.data[s] += v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut out = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..i {
                let a = self.data[self.slot(i, j)];
                out[i] += a * x[j];
                out[j] += a * x[i];
            }
            out[i] += self.data[self.slot(i, i)] * x[i];
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Band Cholesky factor `L` with `A = L Lᵀ`; the band of `L` equals that
    /// of `A`.
    pub fn cholesky(&self) -> Result<BandCholesky> {
        let (n, bw) = (self.n, self.bw);
        let mut l = self.data.clone();
        let w = bw + 1;
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut s = l[i * w + (j + bw - i)];
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                for k in lo..j {
                    s -= l[ri + k] * l[rj + k];
                }
                if i == j {
                    if s <= 0.0 || !s.is_finite() {
                        return Err(GrfError::NotPositiveDefinite(format!(
                            "band pivot {i} is {s:e}"
                        )));
                    }
                    l[ri + i] = s.sqrt();
                } else {
                    l[ri + j] = s / l[rj + j];
                }
            }
        }
        Ok(BandCholesky { n, bw, l })
    }
}

#[derive(Debug, Clone)]
pub struct BandCholesky {
    n: usize,
    bw: usize,
    l: Vec<f64>,
}

impl BandCholesky {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.l[i * (self.bw + 1) + (j + self.bw - i)]
    }

    /// Solves `A X = B` in place for `m` right-hand sides stored row-major
    /// (`b[i * m + c]` is row `i` of column `c`).
    pub fn solve_rows_in_place(&self, b: &mut [f64], m: usize) {
        let (n, bw) = (self.n, self.bw);
        assert_eq!(b.len(), n * m);
        let mut tmp = vec![0.0; m];
        for i in 0..n {
            tmp.copy_from_slice(&b[i * m..(i + 1) * m]);
            for k in i.saturating_sub(bw)..i {
                let a = self.at(i, k);
                if a != 0.0 {
                    let rk = &b[k * m..(k + 1) * m];
                    tmp.iter_mut().zip(rk).for_each(|(t, x)| *t -= a * x);
                }
            }
            let d = 1.0 / self.at(i, i);
            b[i * m..(i + 1) * m]
                .iter_mut()
                .zip(&tmp)
                .for_each(|(o, t)| *o = t * d);
        }
        for i in (0..n).rev() {
            tmp.copy_from_slice(&b[i * m..(i + 1) * m]);
            for k in i + 1..(i + bw + 1).min(n) {
                let a = self.at(k, i);
                if a != 0.0 {
                    let rk = &b[k * m..(k + 1) * m];
                    tmp.iter_mut().zip(rk).for_each(|(t, x)| *t -= a * x);
                }
            }
            let d = 1.0 / self.at(i, i);
            b[i * m..(i + 1) * m]
                .iter_mut()
                .zip(&tmp)
                .for_each(|(o, t)| *o = t * d);
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_rows_in_place(&mut x, 1);
        x
    }
}

/// Cholesky factor of a covariance together with the jitter that was needed.
pub struct SpdFactor {
    llt: Llt<f64>,
    pub jitter: f64,
}

fn view(m: &DMatrix<f64>) -> MatRef<'_, f64> {
    MatRef::from_column_major_slice(m.as_slice(), m.nrows(), m.ncols())
}

fn view_mut(m: &mut DMatrix<f64>) -> MatMut<'_, f64> {
    let (r, c) = m.shape();
    MatMut::from_column_major_slice_mut(m.as_mut_slice(), r, c)
}

impl SpdFactor {
    /// Factorizes `m`; on failure retries once with `1e-8 * mean(diag)`
    /// added to the diagonal.
    pub fn new(mut m: DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(GrfError::dim("covariance is not square"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GrfError::Numerical("non-finite covariance entry".into()));
        }
        if let Ok(llt) = view(&m).llt(Side::Lower) {
            return Ok(Self { llt, jitter: 0.0 });
        }
        let mean_diag = m.diagonal().sum() / n as f64;
        let jitter = 1e-8 * mean_diag.abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            m[(i, i)] += jitter;
        }
        match view(&m).llt(Side::Lower) {
            Ok(llt) => Ok(Self { llt, jitter }),
            Err(_) => Err(GrfError::NotPositiveDefinite(format!(
                "covariance of size {n} after jitter {jitter:e}"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        let n = x.len();
        self.llt.solve_in_place(MatMut::from_column_major_slice_mut(x.as_mut_slice(), n, 1));
        x
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.llt.solve_in_place(view_mut(&mut x));
        x
    }

    /// Overwrites `b` with `L⁻¹ b`.
    pub fn solve_lower_in_place(&self, b: &mut DMatrix<f64>) {
        self.llt.L().solve_lower_triangular_in_place(view_mut(b));
    }
}

/// `A + Aᵀ` halved.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    a.clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Factor `F` with `F Fᵀ ≈ A` for a symmetric PSD `A`, via eigendecomposition
/// with eigenvalues below `rel_tol * λmax` clipped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>, rel_tol: f64) -> Result<DMatrix<f64>> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().copied().fold(0.0_f64, f64::max);
    if !lmax.is_finite() {
        return Err(GrfError::Numerical("non-finite eigenvalue".into()));
    }
    let cut = rel_tol * lmax;
    let mut f = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let scale = if lam > cut { lam.sqrt() } else { 0.0 };
        f.column_mut(j).scale_mut(scale);
    }
    Ok(f)
}

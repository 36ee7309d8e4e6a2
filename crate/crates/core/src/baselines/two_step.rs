//! One-kernel genomic predictor `y = μ1 + u + e`, `u ~ N(0, σu² K)`,
//! fitted by REML on (adjusted) training phenotypes.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::sq_dists_between_rows;
use crate::engine::{self, Criterion, EngineParams, OptimizerConfig, Term, TermKernel, TermValue};
use crate::error::{GrfError, Result};
use crate::kernels::{allele_frequencies, gaussian_from_sq_dists, vanraden_kinship};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwoStepKernel {
    /// `K = X Xᵀ` on raw dosages (ridge regression on markers).
    Rr,
    /// Gaussian kernel with bandwidth estimated by REML.
    Gauss,
    /// VanRaden genomic relationship.
    Kinship,
}

impl std::fmt::Display for TwoStepKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TwoStepKernel::Rr => "RR",
            TwoStepKernel::Gauss => "GAUSS",
            TwoStepKernel::Kinship => "GBLUP",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OneKernelFit {
    pub mu: f64,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    /// Gaussian bandwidth, for [`TwoStepKernel::Gauss`].
    pub tau: Option<f64>,
    /// Restricted log-likelihood without constants.
    pub loglik: f64,
}

/// Kernel blocks `(train × train, test × train)` for linear kernels, built
/// on the stacked marker rows so that test and training rows share the
/// same centering.
fn linear_blocks(kernel: TwoStepKernel, x_train: &DMatrix<f64>, x_test: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (n, m) = (x_train.nrows(), x_test.nrows());
    let mut stacked = DMatrix::zeros(n + m, x_train.ncols());
    stacked.rows_mut(0, n).copy_from(x_train);
    stacked.rows_mut(n, m).copy_from(x_test);
    let k = match kernel {
        TwoStepKernel::Rr => &stacked * stacked.transpose(),
        _ => vanraden_kinship(&stacked, &allele_frequencies(&stacked))?.into_values(),
    };
    Ok((k.view((0, 0), (n, n)).into_owned(), k.view((n, 0), (m, n)).into_owned()))
}

/// Fits the one-kernel model on `y` (one value per row of `x_train`) and
/// returns BLUPs `μ̂ + σu² K(test, train) α` for the rows of `x_test`.
pub fn two_step_predict(
    y: &[f64],
    x_train: &DMatrix<f64>,
    x_test: &DMatrix<f64>,
    kernel: TwoStepKernel,
    optimizer: &OptimizerConfig,
) -> Result<(OneKernelFit, Vec<f64>)> {
    let n = y.len();
    if x_train.nrows() != n {
        return Err(GrfError::dim(format!("{n} responses for {} marker rows", x_train.nrows())));
    }
    if x_test.ncols() != x_train.ncols() {
        return Err(GrfError::dim("training and test markers differ in width"));
    }
    let v = engine::variance(y);
    let start = if v > 0.0 { v / 2.0 } else { 1.0 };
    let (term, cross) = match kernel {
        TwoStepKernel::Gauss => {
            let d = Arc::new(sq_dists_between_rows(x_train, x_train, true));
            (
                Term {
                    name: "markers".into(),
                    kernel: TermKernel::Marker(Arc::clone(&d)),
                },
                None,
            )
        }
        _ => {
            let (k, kx) = linear_blocks(kernel, x_train, x_test)?;
            (Term::fixed("markers", k), Some(kx))
        }
    };
    let tau0 = match &term.kernel {
        TermKernel::Marker(d) => Some(median_positive(d)),
        _ => None,
    };
    // Linear kernels have a data-dependent scale; start at unit ratio of
    // the average diagonal.
    let scale = match &term.kernel {
        TermKernel::Fixed(k) => (k.diagonal().sum() / n as f64).max(f64::MIN_POSITIVE),
        _ => 1.0,
    };
    let init = EngineParams {
        terms: vec![TermValue {
            variance: start / scale,
            shape: tau0,
        }],
        noise: start,
    };
    let fit = engine::fit(y, std::slice::from_ref(&term), &init, Criterion::Reml, optimizer)?;
    let p = &fit.params.terms[0];
    let cross = match cross {
        Some(k) => k,
        None => {
            let tau = p.shape.expect("gaussian kernel has a bandwidth");
            gaussian_from_sq_dists(&sq_dists_between_rows(x_test, x_train, false), tau)
        }
    };
    let pred: DVector<f64> = (cross * &fit.alpha) * p.variance;
    Ok((
        OneKernelFit {
            mu: fit.mu,
            sigma_u2: p.variance,
            sigma_e2: fit.params.noise,
            tau: p.shape,
            loglik: fit.loglik,
        },
        pred.iter().map(|v| v + fit.mu).collect(),
    ))
}

fn median_positive(d: &DMatrix<f64>) -> f64 {
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
    v[v.len() / 2]
}

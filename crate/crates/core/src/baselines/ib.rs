//! Incomplete-block model: kinship genetic effect plus random replicate
//! and block-within-replicate effects, fitted by REML.

use log::warn;
use nalgebra::DVector;

use crate::data::Dataset;
use crate::engine::{self, Criterion, EngineParams, OptimizerConfig, Term, TermValue};
use crate::error::{GrfError, Result};
use crate::kernels::{allele_frequencies, indicator_cross, vanraden_kinship};

/// Replicate and block label per observation of the full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct IbDesign {
    pub rep: Vec<String>,
    pub block: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IbFit {
    pub mu: f64,
    /// Kinship, replicate and block variances (zero for dropped terms).
    pub variances: [f64; 3],
    pub noise: f64,
    pub loglik: f64,
}

/// Fits on `train_idx` and predicts genetic values `μ̂ + σg² K(test, train) α`
/// for `test_idx`. Kinship uses allele frequencies of all lines.
pub fn ib_fit_predict(
    data: &Dataset,
    design: &IbDesign,
    train_idx: &[usize],
    test_idx: &[usize],
    optimizer: &OptimizerConfig,
) -> Result<(IbFit, Vec<f64>)> {
    let n = data.len();
    if design.rep.len() != n || design.block.len() != n {
        return Err(GrfError::invalid(format!(
            "replicate/block labels given for {} / {} of {n} observations",
            design.rep.len(),
            design.block.len()
        )));
    }
    if train_idx.len() < 2 {
        return Err(GrfError::invalid("need at least two training observations"));
    }
    let x = data.genotypes().values();
    let kin = vanraden_kinship(x, &allele_frequencies(x))?.into_values();
    let line = data.line_of();
    let k_train = nalgebra::DMatrix::from_fn(train_idx.len(), train_idx.len(), |i, j| {
        kin[(line[train_idx[i]], line[train_idx[j]])]
    });
    let k_cross = nalgebra::DMatrix::from_fn(test_idx.len(), train_idx.len(), |i, j| {
        kin[(line[test_idx[i]], line[train_idx[j]])]
    });

    let reps: Vec<&str> = train_idx.iter().map(|&i| design.rep[i].as_str()).collect();
    let blocks: Vec<String> = train_idx
        .iter()
        .map(|&i| format!("{}\u{1f}{}", design.rep[i], design.block[i]))
        .collect();
    let mut terms = vec![Term::fixed("kinship", k_train)];
    let mut which = vec![0];
    if distinct(&reps) > 1 {
        terms.push(Term::fixed("replicate", indicator_cross(&reps, &reps)));
        which.push(1);
    } else {
        warn!("replicate effect dropped: a single replicate in the training data");
    }
    if distinct(&blocks) > distinct(&reps) {
        terms.push(Term::fixed("block", indicator_cross(&blocks, &blocks)));
        which.push(2);
    } else {
        warn!("block effect dropped: one block per replicate");
    }

    let y: Vec<f64> = train_idx.iter().map(|&i| data.y()[i]).collect();
    let v = engine::variance(&y);
    let start = if v > 0.0 { v / (terms.len() + 1) as f64 } else { 1.0 };
    let mut init = EngineParams {
        terms: vec![TermValue { variance: start, shape: None }; terms.len()],
        noise: start,
    };
    let kscale = (0..y.len()).map(|i| kin[(line[train_idx[i]], line[train_idx[i]])]).sum::<f64>() / y.len() as f64;
    init.terms[0].variance = start / kscale.max(f64::MIN_POSITIVE);
    let fit = engine::fit(&y, &terms, &init, Criterion::Reml, optimizer)?;
    let mut variances = [0.0; 3];
    for (t, &k) in fit.params.terms.iter().zip(&which) {
        variances[k] = t.variance;
    }
    let pred: DVector<f64> = (k_cross * &fit.alpha) * variances[0];
    Ok((
        IbFit {
            mu: fit.mu,
            variances,
            noise: fit.params.noise,
            loglik: fit.loglik,
        },
        pred.iter().map(|v| v + fit.mu).collect(),
    ))
}

fn distinct<T: AsRef<str>>(labels: &[T]) -> usize {
    let mut v: Vec<&str> = labels.iter().map(|s| s.as_ref()).collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

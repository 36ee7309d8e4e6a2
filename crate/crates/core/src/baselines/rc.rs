//! Row-column adjustment: random row, column and subpopulation effects
//! fitted by ML, with row and column eBLUPs subtracted from the response.

use log::warn;

use super::{AdjustMethod, AdjustedPhenotypes, FittedEffects};
use crate::data::Dataset;
use crate::engine::{self, Criterion, EngineParams, OptimizerConfig, Term, TermValue};
use crate::error::Result;
use crate::kernels::{indicator_cross, label_codes};

/// Sums of `alpha` per level, scaled by the level variance.
fn level_blups(codes: &[usize], n_levels: usize, alpha: &[f64], variance: f64) -> Vec<f64> {
    let mut out = vec![0.0; n_levels];
    if variance == 0.0 {
        return out;
    }
    for (c, a) in codes.iter().zip(alpha) {
        out[*c] += a;
    }
    out.iter_mut().for_each(|v| *v *= variance);
    out
}

pub fn rc_adjust(data: &Dataset, optimizer: &OptimizerConfig) -> Result<AdjustedPhenotypes> {
    let plots = data.layout().plots();
    let rows: Vec<usize> = plots.iter().map(|p| p.0).collect();
    let cols: Vec<usize> = plots.iter().map(|p| p.1).collect();
    let (row_codes, row_levels) = label_codes(&rows);
    let (col_codes, col_levels) = label_codes(&cols);
    let (sub_codes, sub_levels) = label_codes(data.subpop());

    let factors: [(&str, &[usize], usize); 3] = [
        ("row", &row_codes, row_levels.len()),
        ("column", &col_codes, col_levels.len()),
        ("subpopulation", &sub_codes, sub_levels.len()),
    ];
    let mut terms = Vec::new();
    let mut which = Vec::new();
    for (k, (name, codes, levels)) in factors.iter().enumerate() {
        if *levels < 2 {
            warn!("{name} effect dropped from the row-column model: a single level");
            continue;
        }
        terms.push(Term::fixed(name, indicator_cross(codes, codes)));
        which.push(k);
    }

    let y = data.y();
    let mut variances = [0.0; 3];
    let mut alpha = vec![0.0; y.len()];
    let mut noise = engine::variance(y);
    if !terms.is_empty() {
        let v = engine::variance(y);
        let start = if v > 0.0 { v / 4.0 } else { 1.0 };
        let init = EngineParams {
            terms: vec![TermValue { variance: start, shape: None }; terms.len()],
            noise: start,
        };
        let fit = engine::fit(y, &terms, &init, Criterion::Ml, optimizer)?;
        for (t, &k) in fit.params.terms.iter().zip(&which) {
            variances[k] = t.variance;
        }
        alpha = fit.alpha.iter().copied().collect();
        noise = fit.params.noise;
    }

    let row_eff = level_blups(&row_codes, row_levels.len(), &alpha, variances[0]);
    let col_eff = level_blups(&col_codes, col_levels.len(), &alpha, variances[1]);
    let sub_eff = level_blups(&sub_codes, sub_levels.len(), &alpha, variances[2]);
    let y_hat = (0..y.len())
        .map(|i| y[i] - row_eff[row_codes[i]] - col_eff[col_codes[i]])
        .collect();
    Ok(AdjustedPhenotypes {
        y: y.to_vec(),
        y_hat,
        method: AdjustMethod::Rc,
        effects: FittedEffects::Rc {
            rows: row_levels.into_iter().zip(row_eff).collect(),
            cols: col_levels.into_iter().zip(col_eff).collect(),
            subpops: sub_levels.into_iter().zip(sub_eff).collect(),
            variances,
            noise,
        },
    })
}

//! Moving-means covariate adjustment: each plot is compared with the mean
//! of its neighbors one step up and down and two steps left and right.

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{AdjustMethod, AdjustedPhenotypes, FittedEffects};
use crate::data::Dataset;
use crate::error::Result;

/// Which field axis counts as left-right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    /// Left-right moves along a row (changes the column index).
    #[default]
    Columns,
    /// Left-right moves along a column (changes the row index).
    Rows,
}

impl Orientation {
    /// `(row, column)` offsets of the six neighbors.
    fn offsets(self) -> [(isize, isize); 6] {
        let lr = [(0, -2), (0, -1), (0, 1), (0, 2)];
        let ud = [(-1, 0), (1, 0)];
        let mut out = [(0, 0); 6];
        for (k, &(a, b)) in lr.iter().chain(&ud).enumerate() {
            out[k] = match self {
                Orientation::Columns => (a, b),
                Orientation::Rows => (b, a),
            };
        }
        out
    }
}

/// `x_i = y_i - mean(y over available neighbors)`; zero when a plot has no
/// observed neighbor.
pub fn mvng_covariate(data: &Dataset, orientation: Orientation) -> Vec<f64> {
    let plots = data.layout().plots();
    let at: HashMap<(usize, usize), usize> = plots.iter().enumerate().map(|(i, &p)| (p, i)).collect();
    let y = data.y();
    let mut lonely = 0;
    let x = plots
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let (mut sum, mut k) = (0.0, 0usize);
            for (dr, dc) in orientation.offsets() {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 1 || nc < 1 {
                    continue;
                }
                if let Some(&j) = at.get(&(nr as usize, nc as usize)) {
                    sum += y[j];
                    k += 1;
                }
            }
            if k == 0 {
                lonely += 1;
                0.0
            } else {
                y[i] - sum / k as f64
            }
        })
        .collect();
    if lonely > 0 {
        warn!("{lonely} plots have no observed neighbor; their covariate is set to zero");
    }
    x
}

/// Regresses `y` on the neighbor covariate and removes the fitted slope.
pub fn mvng_adjust(data: &Dataset, orientation: Orientation) -> Result<AdjustedPhenotypes> {
    let y = data.y();
    let x = mvng_covariate(data, orientation);
    let n = y.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let y_hat = y.iter().zip(&x).map(|(v, xi)| v - beta * xi).collect();
    Ok(AdjustedPhenotypes {
        y: y.to_vec(),
        y_hat,
        method: AdjustMethod::Mvng,
        effects: FittedEffects::Mvng { beta, covariate: x },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FieldLayout, GenotypeMatrix};
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn field(m1: usize, m2: usize, y: impl Fn(usize, usize) -> f64) -> Dataset {
        let n = m1 * m2;
        let plots: Vec<(usize, usize)> = (1..=m2).flat_map(|c| (1..=m1).map(move |r| (r, c))).collect();
        let g = GenotypeMatrix::from_values(DMatrix::from_fn(n, 2, |i, j| ((i + j) % 3) as f64)).unwrap();
        Dataset::new(
            (0..n).map(|i| format!("o{i}")).collect(),
            plots.iter().map(|&(r, c)| y(r, c)).collect(),
            Arc::new(g),
            (0..n).collect(),
            vec!["all".into(); n],
            FieldLayout::new(m1, m2, plots).unwrap(),
        )
        .unwrap()
    }

    fn idx(d: &Dataset, p: (usize, usize)) -> usize {
        d.layout().plots().iter().position(|&q| q == p).unwrap()
    }

    #[test]
    fn interior_hand_case() {
        // Center plot 5, its six neighbors 2, everything else far away.
        let d = field(5, 5, |r, c| match (r, c) {
            (3, 3) => 5.0,
            (3, 1) | (3, 2) | (3, 4) | (3, 5) | (2, 3) | (4, 3) => 2.0,
            _ => 100.0,
        });
        let x = mvng_covariate(&d, Orientation::Columns);
        assert_eq!(x[idx(&d, (3, 3))], 3.0);
    }

    #[test]
    fn edge_uses_available_neighbors() {
        let d = field(3, 3, |r, c| (10 * r + c) as f64);
        let x = mvng_covariate(&d, Orientation::Columns);
        // (1,1): right neighbors (1,2),(1,3) and down (2,1).
        let want = 11.0 - (12.0 + 13.0 + 21.0) / 3.0;
        assert!((x[idx(&d, (1, 1))] - want).abs() < 1e-12);
        let x = mvng_covariate(&d, Orientation::Rows);
        // Rotated: (2,1),(3,1) along the column, (1,2) across.
        let want = 11.0 - (21.0 + 31.0 + 12.0) / 3.0;
        assert!((x[idx(&d, (1, 1))] - want).abs() < 1e-12);
    }

    #[test]
    fn constant_response() {
        let d = field(4, 4, |_, _| 3.0);
        let a = mvng_adjust(&d, Orientation::Columns).unwrap();
        assert_eq!(a.y_hat, a.y);
        match a.effects {
            FittedEffects::Mvng { beta, ref covariate } => {
                assert_eq!(beta, 0.0);
                assert!(covariate.iter().all(|&v| v == 0.0));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn isolated_plot_gets_zero_covariate() {
        let g = GenotypeMatrix::from_values(DMatrix::from_fn(2, 1, |i, _| i as f64)).unwrap();
        let d = Dataset::new(
            vec!["a".into(), "b".into()],
            vec![1.0, 4.0],
            Arc::new(g),
            vec![0, 1],
            vec!["all".into(); 2],
            FieldLayout::new(5, 5, vec![(1, 1), (5, 5)]).unwrap(),
        )
        .unwrap();
        assert_eq!(mvng_covariate(&d, Orientation::Columns), vec![0.0, 0.0]);
    }

    #[test]
    fn smooth_trend_reduces_variance() {
        let d = field(5, 5, |r, c| (r as f64 * 0.9).sin() * 3.0 + c as f64 + ((r * 7 + c * 3) % 5) as f64 * 0.2);
        let a = mvng_adjust(&d, Orientation::Columns).unwrap();
        let var = |v: &[f64]| crate::engine::variance(v);
        assert!(var(&a.y_hat) < var(&a.y));
    }

    proptest! {
        #[test]
        fn location_equivariant(shift in -50.0f64..50.0, seed in 0u64..100) {
            let d = field(4, 5, |r, c| ((r * 31 + c * 17 + seed as usize) % 11) as f64);
            let s = d.with_y(d.y().iter().map(|v| v + shift).collect()).unwrap();
            let a = mvng_adjust(&d, Orientation::Columns).unwrap();
            let b = mvng_adjust(&s, Orientation::Columns).unwrap();
            for (x, y) in a.y_hat.iter().zip(&b.y_hat) {
                prop_assert!((x + shift - y).abs() < 1e-9);
            }
        }
    }
}

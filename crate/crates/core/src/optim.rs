//! Bounded Nelder–Mead simplex minimizer.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimplexOptions {
    /// Stop once every vertex lies within `xtol` (max-norm) of the best one.
    pub xtol: f64,
    /// Stop once the spread of vertex values is below `ftol`; zero disables.
    pub ftol: f64,
    pub max_evals: usize,
    /// Edge length of the initial simplex.
    pub initial_step: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self {
            xtol: 1e-6,
            ftol: 0.0,
            max_evals: 2000,
            initial_step: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub evals: usize,
    pub converged: bool,
}

/// Box constraints; points are projected onto the box before evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn project(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// Minimizes `f` from `x0`. Non-finite values count as `+inf`.
///
/// Uses the dimension-adaptive coefficients of Gao and Han, which behave
/// better than the classic (1, 2, 0.5, 0.5) set beyond two dimensions.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], bounds: Option<&Bounds>, opts: &SimplexOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut evals = 0usize;
    let mut eval = |x: &mut Vec<f64>, evals: &mut usize| -> f64 {
        if let Some(b) = bounds {
            b.project(x);
        }
        *evals += 1;
        let v = f(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    };

    let mut start = x0.to_vec();
    let f0 = eval(&mut start, &mut evals);
    if n == 0 {
        return Minimum {
            x: start,
            value: f0,
            evals,
            converged: true,
        };
    }

    let nf = n as f64;
    let (alpha, gamma, rho, sigma) = (1.0, 1.0 + 2.0 / nf, 0.75 - 1.0 / (2.0 * nf), 1.0 - 1.0 / nf);

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.clone(), f0));
    for i in 0..n {
        let mut v = start.clone();
        v[i] += opts.initial_step;
        if let Some(b) = bounds {
            // Step inward when the vertex would sit on the boundary.
            if v[i] > b.upper[i] {
                v[i] = start[i] - opts.initial_step;
            }
        }
        let fv = eval(&mut v, &mut evals);
        simplex.push((v, fv));
    }

    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = &simplex[0].0;
        let diameter = simplex[1..]
            .iter()
            .flat_map(|(v, _)| v.iter().zip(best).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let spread = simplex[n].1 - simplex[0].1;
        if diameter < opts.xtol || (opts.ftol > 0.0 && spread.is_finite() && spread < opts.ftol) {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (v, _) in &simplex[..n] {
            for (c, x) in centroid.iter_mut().zip(v) {
                *c += x / nf;
            }
        }
        let worst = simplex[n].clone();
        let along = |t: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + t * (c - w))
                .collect()
        };

        let mut xr = along(alpha);
        let fr = eval(&mut xr, &mut evals);
        if fr < simplex[0].1 {
            let mut xe = along(alpha * gamma);
            let fe = eval(&mut xe, &mut evals);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (mut xc, fc) = if fr < worst.1 {
            let mut xc = along(alpha * rho);
            let fc = eval(&mut xc, &mut evals);
            (xc, fc)
        } else {
            let mut xc = along(-rho);
            let fc = eval(&mut xc, &mut evals);
            (xc, fc)
        };
        if fc < worst.1.min(fr) {
            simplex[n] = (std::mem::take(&mut xc), fc);
            continue;
        }
        let b = simplex[0].0.clone();
        for (v, fv) in simplex.iter_mut().skip(1) {
            for (x, bx) in v.iter_mut().zip(&b) {
                *x = bx + sigma * (*x - bx);
            }
            *fv = eval(v, &mut evals);
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (x, value) = simplex.swap_remove(0);
    Minimum {
        x,
        value,
        evals,
        converged,
    }
}

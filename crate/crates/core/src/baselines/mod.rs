//! Comparison methods: phenotype adjustment (RC, MVNG) followed by a
//! one-kernel genomic predictor, and the IB mixed model.

mod ib;
mod mvng;
mod rc;
mod two_step;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{format_num, write_table, Dataset};
use crate::error::{GrfError, Result};

pub use ib::{ib_fit_predict, IbDesign};
pub use mvng::{mvng_adjust, mvng_covariate, Orientation};
pub use rc::rc_adjust;
pub use two_step::{two_step_predict, OneKernelFit, TwoStepKernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjustMethod {
    Rc,
    Mvng,
}

impl fmt::Display for AdjustMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjustMethod::Rc => "RC",
            AdjustMethod::Mvng => "MVNG",
        })
    }
}

/// Effects removed by an adjustment.
#[derive(Debug, Clone, PartialEq)]
pub enum FittedEffects {
    /// eBLUPs per row, column and subpopulation level, with the fitted
    /// variances (zero for dropped terms).
    Rc {
        rows: Vec<(usize, f64)>,
        cols: Vec<(usize, f64)>,
        subpops: Vec<(String, f64)>,
        variances: [f64; 3],
        noise: f64,
    },
    /// Regression slope on the neighbor covariate, and the covariate.
    Mvng { beta: f64, covariate: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjustedPhenotypes {
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub method: AdjustMethod,
    pub effects: FittedEffects,
}

impl AdjustedPhenotypes {
    /// Writes `obs_id,y,y_hat,method`.
    pub fn write_csv(&self, data: &Dataset, path: &Path, preamble: Option<&str>) -> Result<()> {
        if data.len() != self.y.len() {
            return Err(GrfError::dim("adjusted phenotypes do not match the dataset"));
        }
        let method = self.method.to_string();
        let rows: Vec<Vec<String>> = (0..self.y.len())
            .map(|i| {
                vec![
                    data.obs_ids()[i].clone(),
                    format_num(self.y[i]),
                    format_num(self.y_hat[i]),
                    method.clone(),
                ]
            })
            .collect();
        write_table(path, preamble, &["obs_id", "y", "y_hat", "method"], &rows)
    }
}

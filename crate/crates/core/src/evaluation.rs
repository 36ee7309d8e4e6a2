//! Repeated train/test partitions, accuracy and ranking metrics, and the
//! cross-validation benchmark across methods.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{ib_fit_predict, mvng_adjust, rc_adjust, two_step_predict, IbDesign, Orientation, TwoStepKernel};
use crate::data::{format_num, write_table, Dataset};
use crate::engine::OptimizerConfig;
use crate::error::{GrfError, Result};
use crate::grf::{self, model_label, Component, ModelConfig, Target};

/// RNG for replication `rep`: one ChaCha stream per replication, so results
/// do not depend on scheduling.
pub fn rng_for(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Observations drawn uniformly.
    #[default]
    Random,
    /// Whole genotypes drawn, so no line is on both sides.
    GenotypeGrouped,
    /// Random split within each subpopulation, pooled.
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub train_fraction: f64,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            mode: SplitMode::Random,
            train_fraction: 0.8,
            replications: 1000,
            seed: 0,
        }
    }
}

impl SplitPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(GrfError::invalid(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        if self.replications == 0 {
            return Err(GrfError::invalid("replications must be positive"));
        }
        Ok(())
    }
}

/// Sorted training and test indices of one replication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn random_split(idx: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx = idx.to_vec();
    idx.shuffle(rng);
    let k = (fraction * idx.len() as f64).round() as usize;
    let test = idx.split_off(k);
    (idx, test)
}

/// Adds shuffled groups until the target is reached, then drops the last
/// group if that lands closer to the target.
fn grouped_split(groups: &[Vec<usize>], target: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(rng);
    let mut cut = 0;
    let mut count = 0;
    while count < target && cut < order.len() {
        count += groups[order[cut]].len();
        cut += 1;
    }
    if cut > 0 {
        let last = groups[order[cut - 1]].len();
        if count - target > target - (count - last) {
            cut -= 1;
        }
    }
    let pick = |sel: &[usize]| sel.iter().flat_map(|&g| groups[g].iter().copied()).collect::<Vec<_>>();
    (pick(&order[..cut]), pick(&order[cut..]))
}

fn groups_by<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<Vec<usize>> {
    let mut map: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.enumerate() {
        map.entry(l).or_default().push(i);
    }
    map.into_values().collect()
}

pub fn make_splits(data: &Dataset, plan: &SplitPlan) -> Result<Vec<Split>> {
    plan.validate()?;
    let n = data.len();
    let all: Vec<usize> = (0..n).collect();
    let genotype_groups = groups_by(data.genotype_groups().into_iter());
    let strata = groups_by(data.subpop().iter().map(String::as_str));
    let target = (plan.train_fraction * n as f64).round() as usize;
    let mut splits = Vec::with_capacity(plan.replications);
    for rep in 0..plan.replications {
        let mut rng = rng_for(plan.seed, rep);
        let (mut train, mut test) = match plan.mode {
            SplitMode::Random => random_split(&all, plan.train_fraction, &mut rng),
            SplitMode::GenotypeGrouped => grouped_split(&genotype_groups, target, &mut rng),
            SplitMode::Stratified => {
                let (mut tr, mut te) = (Vec::new(), Vec::new());
                for s in &strata {
                    let (a, b) = random_split(s, plan.train_fraction, &mut rng);
                    tr.extend(a);
                    te.extend(b);
                }
                (tr, te)
            }
        };
        if train.is_empty() || test.is_empty() {
            return Err(GrfError::invalid(format!(
                "train_fraction {} leaves an empty {} set for {n} observations",
                plan.train_fraction,
                if train.is_empty() { "training" } else { "test" }
            )));
        }
        train.sort_unstable();
        test.sort_unstable();
        splits.push(Split { train, test });
    }
    Ok(splits)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation; `None` when either vector is constant or shorter
/// than three.
pub fn accuracy(pred: &[f64], obs: &[f64]) -> Result<Option<f64>> {
    if pred.len() != obs.len() {
        return Err(GrfError::dim(format!("{} predictions for {} observations", pred.len(), obs.len())));
    }
    if pred.len() < 3 {
        return Ok(None);
    }
    Ok(pearson(pred, obs))
}

/// Ascending ranks starting at 1; ties share their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; `None` for constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(GrfError::dim(format!("rank vectors of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Ok(None);
    }
    Ok(pearson(&average_ranks(a), &average_ranks(b)))
}

/// For `l = 1..=l_max`: the median true rank (1 = largest true value) of
/// the `l` lines with the largest predictions. Prediction ties keep index
/// order.
pub fn top_l_median_rank(pred: &[f64], truth: &[f64], l_max: usize) -> Result<Vec<f64>> {
    let n = truth.len();
    if pred.len() != n {
        return Err(GrfError::dim(format!("{} predictions for {n} true values", pred.len())));
    }
    if l_max > n {
        return Err(GrfError::invalid(format!("l_max {l_max} exceeds {n} lines")));
    }
    let true_rank: Vec<f64> = average_ranks(truth).iter().map(|r| (n + 1) as f64 - r).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let mut out = Vec::with_capacity(l_max);
    let mut chosen: Vec<f64> = Vec::with_capacity(l_max);
    for &i in order.iter().take(l_max) {
        let r = true_rank[i];
        let at = chosen.partition_point(|&x| x < r);
        chosen.insert(at, r);
        let l = chosen.len();
        out.push(if l % 2 == 1 { chosen[l / 2] } else { (chosen[l / 2 - 1] + chosen[l / 2]) / 2.0 });
    }
    Ok(out)
}

/// Mean and sample standard deviation of the present values, with the
/// number of missing ones. Both are NaN when nothing is present; the
/// standard deviation is NaN for a single value.
pub fn mean_sd(values: &[Option<f64>]) -> (f64, f64, usize) {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let missing = values.len() - present.len();
    let k = present.len() as f64;
    if present.is_empty() {
        return (f64::NAN, f64::NAN, missing);
    }
    let mean = present.iter().sum::<f64>() / k;
    let sd = if present.len() < 2 {
        f64::NAN
    } else {
        (present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    };
    (mean, sd, missing)
}

/// `"0.4520 (0.0629)"`; `NA` for undefined parts.
pub fn format_mean_sd(mean: f64, sd: f64) -> String {
    let f = |v: f64| if v.is_finite() { format!("{v:.4}") } else { "NA".into() };
    format!("{} ({})", f(mean), f(sd))
}

/// Spatial adjustment applied before a one-kernel predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Adjustment {
    Rc,
    Mvng,
}

/// A prediction method, written as its label: `GRF`, `GRF-Zs`, `GRF-Zb`,
/// `GRF-Zbs`, `RR`, `GAUSS`, `GBLUP`, `RC+RR`, `MVNG+GAUSS`, ..., `IB`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Grf(Vec<Component>),
    TwoStep {
        adjust: Option<Adjustment>,
        kernel: TwoStepKernel,
    },
    Ib,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Grf(c) => f.write_str(&model_label(c)),
            Method::TwoStep { adjust: None, kernel } => write!(f, "{kernel}"),
            Method::TwoStep { adjust: Some(Adjustment::Rc), kernel } => write!(f, "RC+{kernel}"),
            Method::TwoStep { adjust: Some(Adjustment::Mvng), kernel } => write!(f, "MVNG+{kernel}"),
            Method::Ib => f.write_str("IB"),
        }
    }
}

impl FromStr for Method {
    type Err = GrfError;

    fn from_str(s: &str) -> Result<Self> {
        use Component::*;
        let kernel = |k: &str| match k {
            "RR" => Some(TwoStepKernel::Rr),
            "GAUSS" => Some(TwoStepKernel::Gauss),
            "GBLUP" => Some(TwoStepKernel::Kinship),
            _ => None,
        };
        let m = match s.trim() {
            "GRF" => Method::Grf(vec![Genotype, Subpop, Spatial]),
            "GRF-Zs" => Method::Grf(vec![Genotype, Subpop]),
            "GRF-Zb" => Method::Grf(vec![Genotype, Spatial]),
            "GRF-Zbs" => Method::Grf(vec![Genotype]),
            "IB" => Method::Ib,
            other => {
                let (adjust, k) = match other.split_once('+') {
                    Some(("RC", k)) => (Some(Adjustment::Rc), k),
                    Some(("MVNG", k)) => (Some(Adjustment::Mvng), k),
                    Some(_) => return Err(GrfError::invalid(format!("unknown adjustment in method {s:?}"))),
                    None => (None, other),
                };
                match kernel(k) {
                    Some(kernel) => Method::TwoStep { adjust, kernel },
                    None => return Err(GrfError::invalid(format!("unknown method {s:?}"))),
                }
            }
        };
        Ok(m)
    }
}

impl TryFrom<String> for Method {
    type Error = GrfError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> String {
        m.to_string()
    }
}

/// Settings shared by every method of a benchmark.
#[derive(Debug, Clone, Default)]
pub struct BenchmarkOptions {
    pub beta00: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub target: Target,
    pub orientation: Orientation,
    pub ib_design: Option<IbDesign>,
}

impl BenchmarkOptions {
    fn grf_config(&self, components: &[Component]) -> ModelConfig {
        let mut c = ModelConfig::with_components(components);
        if let Some(b) = self.beta00 {
            c.beta00 = b;
        }
        c.optimizer = self.optimizer.clone();
        c
    }
}

/// Predictions for the test observations of one split.
pub fn predict_split(data: &Dataset, method: &Method, split: &Split, opts: &BenchmarkOptions) -> Result<Vec<f64>> {
    match method {
        Method::Grf(components) => {
            let train = data.subset(&split.train)?;
            let fit = grf::fit(&train, &opts.grf_config(components))?;
            fit.predict_indices(data, &split.train, &split.test, opts.target)
        }
        Method::TwoStep { adjust, kernel } => {
            let train = data.subset(&split.train)?;
            let y = match adjust {
                None => train.y().to_vec(),
                Some(Adjustment::Rc) => rc_adjust(&train, &opts.optimizer)?.y_hat,
                Some(Adjustment::Mvng) => mvng_adjust(&train, opts.orientation)?.y_hat,
            };
            let x = data.observation_genotypes();
            let rows = |idx: &[usize]| DMatrix::from_fn(idx.len(), x.ncols(), |i, j| x[(idx[i], j)]);
            let (_, pred) = two_step_predict(&y, &rows(&split.train), &rows(&split.test), *kernel, &opts.optimizer)?;
            Ok(pred)
        }
        Method::Ib => {
            let design = opts
                .ib_design
                .as_ref()
                .ok_or_else(|| GrfError::invalid("the IB method needs replicate and block labels"))?;
            Ok(ib_fit_predict(data, design, &split.train, &split.test, &opts.optimizer)?.1)
        }
    }
}

/// One method on one replication.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub replication: usize,
    pub accuracy: Option<f64>,
    pub spearman: Option<f64>,
    pub gamma_hat: Option<f64>,
    /// Failure message when the method did not produce predictions.
    pub error: Option<String>,
}

/// Aggregates of one method across replications.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: String,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub mean_spearman: f64,
    pub sd_spearman: f64,
    pub gamma_hat: Option<f64>,
    pub replications: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    /// Method labels in the order given.
    pub methods: Vec<String>,
    /// Ordered by replication, then method.
    pub rows: Vec<MetricRow>,
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(String::new, format_num)
}

impl MetricReport {
    pub fn summaries(&self) -> Vec<MethodSummary> {
        self.methods
            .iter()
            .map(|m| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| &r.method == m).collect();
                let acc: Vec<Option<f64>> = rows.iter().map(|r| r.accuracy).collect();
                let rho: Vec<Option<f64>> = rows.iter().map(|r| r.spearman).collect();
                let (mean_accuracy, sd_accuracy, missing) = mean_sd(&acc);
                let (mean_spearman, sd_spearman, _) = mean_sd(&rho);
                MethodSummary {
                    method: m.clone(),
                    mean_accuracy,
                    sd_accuracy,
                    mean_spearman,
                    sd_spearman,
                    gamma_hat: rows.iter().find_map(|r| r.gamma_hat),
                    replications: rows.len(),
                    missing,
                }
            })
            .collect()
    }

    /// `method,replication,accuracy,spearman,gamma_hat,note`; missing values
    /// are empty and `note` carries failure messages.
    pub fn write_replications(&self, path: &Path, preamble: Option<&str>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.method.clone(),
                    r.replication.to_string(),
                    opt_num(r.accuracy),
                    opt_num(r.spearman),
                    opt_num(r.gamma_hat),
                    r.error.clone().unwrap_or_default(),
                ]
            })
            .collect();
        write_table(
            path,
            preamble,
            &["method", "replication", "accuracy", "spearman", "gamma_hat", "note"],
            &rows,
        )
    }

    pub fn write_summary(&self, path: &Path, preamble: Option<&str>) -> Result<()> {
        let rows: Vec<Vec<String>> = self
            .summaries()
            .into_iter()
            .map(|s| {
                vec![
                    s.method,
                    format_mean_sd(s.mean_accuracy, s.sd_accuracy),
                    format_mean_sd(s.mean_spearman, s.sd_spearman),
                    s.gamma_hat.map_or_else(String::new, |g| format!("{g:.4}")),
                    format_num(s.mean_accuracy),
                    format_num(s.sd_accuracy),
                    format_num(s.mean_spearman),
                    format_num(s.sd_spearman),
                    s.replications.to_string(),
                    s.missing.to_string(),
                ]
            })
            .collect();
        write_table(
            path,
            preamble,
            &[
                "method",
                "accuracy",
                "spearman",
                "gamma_hat",
                "mean_accuracy",
                "sd_accuracy",
                "mean_spearman",
                "sd_spearman",
                "replications",
                "missing",
            ],
            &rows,
        )
    }
}

/// Method labels, with `#2`, `#3`, ... appended to repeats.
fn unique_labels(methods: &[Method]) -> Vec<String> {
    let mut seen: HashMap<String, usize> = HashMap::new();
    methods
        .iter()
        .map(|m| {
            let base = m.to_string();
            let k = seen.entry(base.clone()).or_insert(0);
            *k += 1;
            if *k == 1 {
                base
            } else {
                format!("{base}#{k}")
            }
        })
        .collect()
}

/// Runs every method on every split of `plan`. Failures of a method on a
/// replication are recorded in its row. `γ̂` of a GRF method with both
/// genotype and spatial terms is fitted once on the full data.
pub fn run_benchmark(data: &Dataset, methods: &[Method], plan: &SplitPlan, opts: &BenchmarkOptions) -> Result<MetricReport> {
    if methods.is_empty() {
        return Err(GrfError::invalid("no methods to benchmark"));
    }
    if methods.contains(&Method::Ib) {
        let d = opts
            .ib_design
            .as_ref()
            .ok_or_else(|| GrfError::invalid("the IB method needs replicate and block labels"))?;
        if d.rep.len() != data.len() || d.block.len() != data.len() {
            return Err(GrfError::dim("replicate/block labels do not cover the dataset"));
        }
    }
    let splits = make_splits(data, plan)?;
    let labels = unique_labels(methods);
    let mut gamma: HashMap<String, f64> = HashMap::new();
    for (m, label) in methods.iter().zip(&labels) {
        if let Method::Grf(c) = m {
            if c.contains(&Component::Genotype) && c.contains(&Component::Spatial) {
                let fit = grf::fit(data, &opts.grf_config(c))?;
                info!("{label}: full-data gamma_hat {:.4}", fit.gamma_hat);
                gamma.insert(label.clone(), fit.gamma_hat);
            }
        }
    }
    let per_rep: Vec<Vec<MetricRow>> = splits
        .par_iter()
        .enumerate()
        .map(|(rep, split)| {
            let obs: Vec<f64> = split.test.iter().map(|&i| data.y()[i]).collect();
            methods
                .iter()
                .zip(&labels)
                .map(|(m, label)| {
                    let mut row = MetricRow {
                        method: label.clone(),
                        replication: rep,
                        accuracy: None,
                        spearman: None,
                        gamma_hat: gamma.get(label).copied(),
                        error: None,
                    };
                    match predict_split(data, m, split, opts) {
                        Ok(pred) => {
                            row.accuracy = accuracy(&pred, &obs).ok().flatten();
                            row.spearman = spearman(&pred, &obs).ok().flatten();
                        }
                        Err(e) => {
                            warn!("{label} failed on replication {rep}: {e}");
                            row.error = Some(e.to_string());
                        }
                    }
                    row
                })
                .collect()
        })
        .collect();
    Ok(MetricReport {
        methods: labels,
        rows: per_rep.into_iter().flatten().collect(),
    })
}

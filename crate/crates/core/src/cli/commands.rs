//! Subcommand bodies. Every table starts with the config hash and seed.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{grf_components, RunConfig};
use crate::baselines::{mvng_adjust, rc_adjust, AdjustMethod, FittedEffects, IbDesign};
use crate::data::{format_num, load_dataset, write_matrix_csv, write_table, Dataset};
use crate::error::{GrfError, Result};
use crate::evaluation::{average_ranks, run_benchmark, spearman, top_l_median_rank, BenchmarkOptions};
use crate::grf::{self, FitResult, FitSummary, TestPoint};
use crate::simulation::{ranking_study, RefitOptions, SimSpec};
use crate::synthetic::TrialGenerator;

/// A fit as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitFile {
    pub config_hash: String,
    pub seed: u64,
    pub fit: FitSummary,
}

pub struct Context {
    pub cfg: RunConfig,
    preamble: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GrfError + '_ {
    move |source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
        let preamble = cfg.preamble();
        Ok(Self { cfg, preamble })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn table(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        write_table(&self.out(name), Some(&self.preamble), header, rows)
    }

    fn load_data(&self) -> Result<Dataset> {
        if let Some(d) = &self.cfg.data {
            let data = load_dataset(&d.genotypes, &d.phenotypes, &d.layout, d.subpops.as_deref())?;
            return Ok(if d.center { data.centered() } else { data });
        }
        let design = self.cfg.synthetic.clone().expect("validated data source");
        Ok(TrialGenerator::new(design)?.draw(self.cfg.seed)?.data)
    }

    fn fit_inline(&self, data: &Dataset) -> Result<FitResult> {
        let fit = grf::fit(data, &self.cfg.fit.model_config(self.cfg.seed))?;
        info!("{} fit: loglik {:.6}, gamma_hat {:.4}", fit.label(), fit.loglik, fit.gamma_hat);
        Ok(fit)
    }

    fn write_fit(&self, name: &str, fit: &FitResult) -> Result<()> {
        let file = FitFile {
            config_hash: self.cfg.hash(),
            seed: self.cfg.seed,
            fit: fit.summary(),
        };
        let path = self.out(name);
        let mut text = serde_json::to_string_pretty(&file).expect("fit serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(io_err(&path))
    }
}

pub fn read_fit(path: &Path, data: &Dataset) -> Result<FitResult> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let file: FitFile = serde_json::from_str(&text).map_err(|e| GrfError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    FitResult::restore(&file.fit, data)
}

fn csv_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let got: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if got != header {
        return Err(GrfError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected columns {header:?}, found {got:?}"),
        });
    }
    Ok(rdr.records().collect::<std::result::Result<_, _>>()?)
}

/// Replicate and block labels keyed by observation id.
pub fn read_design(path: &Path, data: &Dataset) -> Result<IbDesign> {
    let rows = csv_rows(path, &["obs_id", "rep", "block"])?;
    let map: HashMap<&str, (&str, &str)> = rows.iter().map(|r| (&r[0], (&r[1], &r[2]))).collect();
    let mut design = IbDesign {
        rep: Vec::with_capacity(data.len()),
        block: Vec::with_capacity(data.len()),
    };
    for id in data.obs_ids() {
        let (r, b) = map
            .get(id.as_str())
            .ok_or_else(|| GrfError::dim(format!("observation {id} has no replicate/block label")))?;
        design.rep.push(r.to_string());
        design.block.push(b.to_string());
    }
    Ok(design)
}

fn read_points(path: &Path, data: &Dataset) -> Result<(Vec<String>, Vec<TestPoint>)> {
    let rows = csv_rows(path, &["obs_id", "line_id", "row", "col", "subpop_label"])?;
    let g = data.genotypes();
    let mut ids = Vec::with_capacity(rows.len());
    let mut points = Vec::with_capacity(rows.len());
    for r in &rows {
        let line = r.position().map_or(0, |p| p.line() as usize);
        let bad = |m: String| GrfError::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let l = g.line_index(&r[1]).ok_or_else(|| bad(format!("line {} has no genotype", &r[1])))?;
        let coord = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| bad(format!("malformed plot coordinate {s:?}")))
        };
        let plot = match (&r[2], &r[3]) {
            ("", "") => None,
            (a, b) => Some((coord(a)?, coord(b)?)),
        };
        ids.push(r[0].to_string());
        points.push(TestPoint {
            markers: g.row(l),
            subpop: (!r[4].is_empty()).then(|| r[4].to_string()),
            plot,
        });
    }
    Ok((ids, points))
}

pub fn cmd_fit(ctx: &Context) -> Result<()> {
    let data = ctx.load_data()?;
    let fit = ctx.fit_inline(&data)?;
    ctx.write_fit("fit.json", &fit)?;
    if ctx.cfg.fit.write_kernels {
        for &c in &fit.components {
            if let Some(k) = fit.kernel(c) {
                write_matrix_csv(&ctx.out(&format!("kernel_{c}.csv")), k)?;
            }
        }
    }
    Ok(())
}

pub fn cmd_predict(ctx: &Context) -> Result<()> {
    let section = ctx
        .cfg
        .predict
        .as_ref()
        .ok_or_else(|| GrfError::invalid("predict needs a [predict] section"))?;
    let data = ctx.load_data()?;
    let fit = match &section.fit {
        Some(path) => read_fit(path, &data)?,
        None => ctx.fit_inline(&data)?,
    };
    let (ids, points) = read_points(&section.points, &data)?;
    let pred = fit.predict(&data, &points, section.target)?;
    let target = serde_json::to_value(section.target).expect("target serializes");
    let target = target.as_str().unwrap_or_default().to_string();
    let rows: Vec<Vec<String>> = ids
        .into_iter()
        .zip(pred)
        .map(|(id, p)| vec![id, format_num(p), target.clone()])
        .collect();
    ctx.table("predictions.csv", &["obs_id", "prediction", "target"], &rows)
}

pub fn cmd_adjust(ctx: &Context) -> Result<()> {
    let section = ctx
        .cfg
        .adjust
        .as_ref()
        .ok_or_else(|| GrfError::invalid("adjust needs an [adjust] section"))?;
    let data = ctx.load_data()?;
    let adjusted = match section.method {
        AdjustMethod::Rc => rc_adjust(&data, &ctx.cfg.fit.model_config(ctx.cfg.seed).optimizer)?,
        AdjustMethod::Mvng => mvng_adjust(&data, section.orientation)?,
    };
    adjusted.write_csv(&data, &ctx.out("adjusted.csv"), Some(&ctx.preamble))?;
    let mut rows = Vec::new();
    let mut push = |effect: &str, level: String, value: f64| rows.push(vec![effect.to_string(), level, format_num(value)]);
    match &adjusted.effects {
        FittedEffects::Rc {
            rows: r,
            cols,
            subpops,
            variances,
            noise,
        } => {
            for (k, name) in ["row", "column", "subpopulation"].iter().enumerate() {
                push("variance", name.to_string(), variances[k]);
            }
            push("variance", "noise".into(), *noise);
            r.iter().for_each(|(l, v)| push("row", l.to_string(), *v));
            cols.iter().for_each(|(l, v)| push("column", l.to_string(), *v));
            subpops.iter().for_each(|(l, v)| push("subpopulation", l.clone(), *v));
        }
        FittedEffects::Mvng { beta, .. } => push("slope", "covariate".into(), *beta),
    }
    ctx.table("effects.csv", &["effect", "level", "value"], &rows)
}

pub fn cmd_cv(ctx: &Context) -> Result<()> {
    let section = ctx.cfg.cv.as_ref().ok_or_else(|| GrfError::invalid("cv needs a [cv] section"))?;
    let data = ctx.load_data()?;
    let ib_design = match ctx.cfg.data.as_ref().and_then(|d| d.design.as_ref()) {
        Some(p) => Some(read_design(p, &data)?),
        None => None,
    };
    let model = ctx.cfg.fit.model_config(ctx.cfg.seed);
    let opts = BenchmarkOptions {
        beta00: Some(model.beta00),
        optimizer: model.optimizer,
        target: section.target,
        orientation: section.orientation,
        ib_design,
    };
    let report = run_benchmark(&data, &section.methods, &section.plan(ctx.cfg.seed), &opts)?;
    report.write_replications(&ctx.out("cv_replications.csv"), Some(&ctx.preamble))?;
    report.write_summary(&ctx.out("cv_summary.csv"), Some(&ctx.preamble))
}

pub fn cmd_simulate(ctx: &Context) -> Result<()> {
    let section = ctx
        .cfg
        .simulate
        .as_ref()
        .ok_or_else(|| GrfError::invalid("simulate needs a [simulate] section"))?;
    let data = ctx.load_data()?;
    let fit = match &section.fit {
        Some(path) if path.exists() => read_fit(path, &data)?,
        Some(path) if !section.inline_fit => {
            return Err(GrfError::invalid(format!(
                "generating fit {} does not exist and inline_fit is off",
                path.display()
            )))
        }
        None if !section.inline_fit => {
            return Err(GrfError::invalid("no generating fit given and inline_fit is off"));
        }
        _ => {
            let fit = ctx.fit_inline(&data)?;
            ctx.write_fit("generating_fit.json", &fit)?;
            fit
        }
    };
    let spec = SimSpec {
        c: section.c.clone(),
        replications: section.replications,
        seed: ctx.cfg.seed,
        l_max: section.l_max,
        warm_start: section.warm_start,
    };
    let model = ctx.cfg.fit.model_config(ctx.cfg.seed);
    let refit = RefitOptions {
        beta00: model.beta00,
        optimizer: model.optimizer,
    };
    let variants = grf_components(&section.variants, "[simulate] variants")?;
    let report = ranking_study(&data, &fit, &spec, &variants, &refit)?;
    report.write_metrics(&ctx.out("sim_metrics.csv"), Some(&ctx.preamble))?;
    report.write_summary(&ctx.out("sim_summary.csv"), Some(&ctx.preamble))?;
    report.write_curves(&ctx.out("sim_curves.csv"), Some(&ctx.preamble))
}

pub fn cmd_rank_report(ctx: &Context) -> Result<()> {
    let section = ctx.cfg.rank_report.clone().unwrap_or_else(|| super::config::RankReportSection {
        variants: ["GRF", "GRF-Zs", "GRF-Zb", "GRF-Zbs"].iter().map(|s| s.parse().expect("built-in label")).collect(),
        l_max: 10,
    });
    let data = ctx.load_data()?;
    let variants = grf_components(&section.variants, "[rank_report] variants")?;
    let mut config = ctx.cfg.fit.model_config(ctx.cfg.seed);
    let mut labels = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for v in &variants {
        config.components = v.clone();
        let fit = grf::fit(&data, &config)?;
        labels.push(fit.label());
        values.push(fit.genetic_values().iter().copied().collect());
    }
    let n = data.len() as f64;
    let mut rows = Vec::new();
    for (label, g) in labels.iter().zip(&values) {
        let rank: Vec<f64> = average_ranks(g).iter().map(|r| n + 1.0 - r).collect();
        for i in 0..data.len() {
            rows.push(vec![
                label.clone(),
                data.obs_ids()[i].clone(),
                data.line_id(i).to_string(),
                format_num(g[i]),
                format_num(rank[i]),
            ]);
        }
    }
    ctx.table("rankings.csv", &["method", "obs_id", "line_id", "genetic_value", "rank"], &rows)?;
    let l_max = section.l_max.min(data.len());
    let mut agree = Vec::new();
    for a in 0..labels.len() {
        for b in 0..labels.len() {
            if a == b {
                continue;
            }
            let rho = spearman(&values[a], &values[b])?;
            let curve = top_l_median_rank(&values[b], &values[a], l_max)?;
            agree.push(vec![
                labels[a].clone(),
                labels[b].clone(),
                rho.map_or_else(String::new, format_num),
                l_max.to_string(),
                curve.last().map_or_else(String::new, |v| format_num(*v)),
            ]);
        }
    }
    ctx.table(
        "rank_agreement.csv",
        &["reference", "method", "spearman", "l", "median_reference_rank"],
        &agree,
    )
}

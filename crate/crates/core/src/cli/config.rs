//! Run configuration: one TOML document per run, validated before any
//! computation. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{AdjustMethod, Orientation};
use crate::engine::OptimizerConfig;
use crate::error::{GrfError, Result};
use crate::evaluation::{Method, SplitMode, SplitPlan};
use crate::grf::{Component, GrfParams, ModelConfig, Target};
use crate::kernels::DEFAULT_BETA00;
use crate::synthetic::SyntheticDesign;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the optimizer, the splits, the simulations and synthetic data.
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide. Not part of the hash.
    #[serde(default, skip_serializing)]
    pub threads: usize,
    /// Not part of the hash.
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    pub data: Option<DataSection>,
    /// Simulated trial used instead of `[data]`.
    pub synthetic: Option<SyntheticDesign>,
    #[serde(default)]
    pub fit: FitSection,
    pub predict: Option<PredictSection>,
    pub adjust: Option<AdjustSection>,
    pub cv: Option<CvSection>,
    pub simulate: Option<SimulateSection>,
    pub rank_report: Option<RankReportSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("grf-out")
}

/// Input files; relative paths are taken from the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub genotypes: PathBuf,
    pub phenotypes: PathBuf,
    pub layout: PathBuf,
    pub subpops: Option<PathBuf>,
    /// `obs_id,rep,block` labels for the IB model.
    pub design: Option<PathBuf>,
    /// Subtract the phenotype mean after loading.
    #[serde(default)]
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub components: Vec<Component>,
    pub beta00: f64,
    pub optimizer: OptimizerConfig,
    pub init: Option<GrfParams>,
    /// Also write the fitted kernel matrices.
    pub write_kernels: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            components: Component::ALL.to_vec(),
            beta00: DEFAULT_BETA00,
            optimizer: OptimizerConfig::default(),
            init: None,
            write_kernels: false,
        }
    }
}

impl FitSection {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        let mut optimizer = self.optimizer.clone();
        optimizer.seed = seed;
        ModelConfig {
            components: self.components.clone(),
            beta00: self.beta00,
            optimizer,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictSection {
    /// A `fit.json` made on the `[data]` observations; fitted inline when
    /// absent.
    pub fit: Option<PathBuf>,
    /// `obs_id,line_id,row,col,subpop_label`; blank plot or label cells
    /// mean unknown.
    pub points: PathBuf,
    #[serde(default)]
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjustSection {
    pub method: AdjustMethod,
    #[serde(default)]
    pub orientation: Orientation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSection {
    pub methods: Vec<Method>,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_cv_replications")]
    pub replications: usize,
    #[serde(default)]
    pub target: Target,
    #[serde(default)]
    pub orientation: Orientation,
}

fn default_fraction() -> f64 {
    0.8
}

fn default_cv_replications() -> usize {
    1000
}

impl CvSection {
    pub fn plan(&self, seed: u64) -> SplitPlan {
        SplitPlan {
            mode: self.mode,
            train_fraction: self.train_fraction,
            replications: self.replications,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    /// Generating fit; made inline from `[fit]` when absent and
    /// `inline_fit` is set.
    pub fit: Option<PathBuf>,
    #[serde(default = "yes")]
    pub inline_fit: bool,
    #[serde(default = "default_c")]
    pub c: Vec<f64>,
    #[serde(default = "default_sim_replications")]
    pub replications: usize,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
    #[serde(default)]
    pub warm_start: bool,
    #[serde(default = "default_variants")]
    pub variants: Vec<Method>,
}

fn yes() -> bool {
    true
}

fn default_c() -> Vec<f64> {
    vec![1.0, 2.0, 3.0, 4.0]
}

fn default_sim_replications() -> usize {
    100
}

fn default_l_max() -> usize {
    10
}

fn default_variants() -> Vec<Method> {
    ["GRF", "GRF-Zs", "GRF-Zb", "GRF-Zbs"].iter().map(|s| s.parse().expect("built-in label")).collect()
}

/// Fits model variants on the data and compares their genetic-value
/// rankings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankReportSection {
    #[serde(default = "default_variants")]
    pub variants: Vec<Method>,
    #[serde(default = "default_l_max")]
    pub l_max: usize,
}

/// Components of a GRF method label; other methods are rejected.
pub fn grf_components(methods: &[Method], what: &str) -> Result<Vec<Vec<Component>>> {
    methods
        .iter()
        .map(|m| match m {
            Method::Grf(c) => Ok(c.clone()),
            other => Err(GrfError::invalid(format!("{what} accepts GRF variants only, got {other}"))),
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GrfError::invalid(format!("config: {}", e.message().trim())))
    }

    /// Reads a config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| GrfError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.output_dir);
        if let Some(d) = cfg.data.as_mut() {
            fix(&mut d.genotypes);
            fix(&mut d.phenotypes);
            fix(&mut d.layout);
            d.subpops.as_mut().map(fix);
            d.design.as_mut().map(fix);
        }
        if let Some(p) = cfg.predict.as_mut() {
            p.fit.as_mut().map(fix);
            fix(&mut p.points);
        }
        if let Some(s) = cfg.simulate.as_mut() {
            s.fit.as_mut().map(fix);
        }
        Ok(cfg)
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => return Err(GrfError::invalid("give either [data] or [synthetic], not both")),
            (None, None) => return Err(GrfError::invalid("a [data] or [synthetic] section is required")),
            _ => {}
        }
        self.fit.model_config(self.seed).validate()?;
        if let Some(cv) = &self.cv {
            cv.plan(self.seed).validate()?;
            if cv.methods.is_empty() {
                return Err(GrfError::invalid("[cv] methods is empty"));
            }
        }
        if let Some(s) = &self.simulate {
            grf_components(&s.variants, "[simulate] variants")?;
            if s.c.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
                return Err(GrfError::invalid("[simulate] c values must be finite and non-negative"));
            }
            if s.replications == 0 {
                return Err(GrfError::invalid("[simulate] replications must be positive"));
            }
        }
        if let Some(r) = &self.rank_report {
            grf_components(&r.variants, "[rank_report] variants")?;
        }
        Ok(())
    }

    /// SHA-256 of the effective configuration, leaving out where outputs go
    /// and how many threads compute them.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Comment line written at the top of every output table.
    pub fn preamble(&self) -> String {
        format!("config_hash={} seed={}", self.hash(), self.seed)
    }
}

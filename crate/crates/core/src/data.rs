//! Dataset model and CSV ingestion.
//!
//! Four files describe a trial: genotypes per line, one phenotype record per
//! observation, the plot of every observation and (optionally) its
//! subpopulation. Observation order always follows the phenotype file.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{GrfError, Result};

/// Label used for every observation when no subpopulation file is given.
pub const DEFAULT_SUBPOP: &str = "all";

/// Marker dosages for a panel of lines, one row per line.
#[derive(Debug, Clone, PartialEq)]
pub struct GenotypeMatrix {
    values: DMatrix<f64>,
    line_ids: Vec<String>,
    marker_ids: Vec<String>,
}

impl GenotypeMatrix {
    pub fn new(values: DMatrix<f64>, line_ids: Vec<String>, marker_ids: Vec<String>) -> Result<Self> {
        if values.nrows() != line_ids.len() {
            return Err(GrfError::dim(format!(
                "{} genotype rows but {} line ids",
                values.nrows(),
                line_ids.len()
            )));
        }
        if values.ncols() != marker_ids.len() {
            return Err(GrfError::dim(format!(
                "{} genotype columns but {} marker ids",
                values.ncols(),
                marker_ids.len()
            )));
        }
        if values.ncols() == 0 {
            return Err(GrfError::invalid("genotype matrix has no markers"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GrfError::invalid("missing genotype value"));
        }
        let mut seen = HashSet::new();
        for id in &line_ids {
            if !seen.insert(id.as_str()) {
                return Err(GrfError::invalid(format!("duplicate line id {id}")));
            }
        }
        Ok(Self {
            values,
            line_ids,
            marker_ids,
        })
    }

    /// Builds a matrix with generated ids `L1..Ln` and `M1..Mp`.
    pub fn from_values(values: DMatrix<f64>) -> Result<Self> {
        let lines = (1..=values.nrows()).map(|i| format!("L{i}")).collect();
        let markers = (1..=values.ncols()).map(|j| format!("M{j}")).collect();
        Self::new(values, lines, markers)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn line_ids(&self) -> &[String] {
        &self.line_ids
    }

    pub fn marker_ids(&self) -> &[String] {
        &self.marker_ids
    }

    pub fn n_lines(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_markers(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().copied().collect()
    }

    pub fn line_index(&self, id: &str) -> Option<usize> {
        self.line_ids.iter().position(|l| l == id)
    }
}

/// Squared Euclidean distances between all rows of `g`.
///
/// Computed by explicit differences so that replicated genotypes give an
/// exact zero.
pub fn pairwise_sq_dists(g: &GenotypeMatrix) -> DMatrix<f64> {
    sq_dists_between_rows(g.values(), g.values(), true)
}

pub(crate) fn sq_dists_between_rows(a: &DMatrix<f64>, b: &DMatrix<f64>, symmetric: bool) -> DMatrix<f64> {
    let (na, nb, p) = (a.nrows(), b.nrows(), a.ncols());
    debug_assert_eq!(p, b.ncols());
    // Row-major copies keep the inner loop contiguous.
    let ra: Vec<f64> = (0..na).flat_map(|i| a.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let rb: Vec<f64> = (0..nb).flat_map(|i| b.row(i).iter().copied().collect::<Vec<_>>()).collect();
    let mut out = DMatrix::zeros(na, nb);
    for i in 0..na {
        let xi = &ra[i * p..(i + 1) * p];
        let start = if symmetric { i + 1 } else { 0 };
        for k in start..nb {
            let xk = &rb[k * p..(k + 1) * p];
            let d: f64 = xi.iter().zip(xk).map(|(u, v)| (u - v) * (u - v)).sum();
            out[(i, k)] = d;
            if symmetric {
                out[(k, i)] = d;
            }
        }
    }
    out
}

/// Plot coordinates of every observation on an `m1 x m2` field, 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldLayout {
    m1: usize,
    m2: usize,
    plots: Vec<(usize, usize)>,
}

impl FieldLayout {
    pub fn new(m1: usize, m2: usize, plots: Vec<(usize, usize)>) -> Result<Self> {
        if m1 == 0 || m2 == 0 {
            return Err(GrfError::invalid("field dimensions must be positive"));
        }
        let mut used = HashSet::with_capacity(plots.len());
        for &(r, c) in &plots {
            if r == 0 || c == 0 || r > m1 || c > m2 {
                return Err(GrfError::invalid(format!(
                    "plot ({r},{c}) outside the {m1}x{m2} field"
                )));
            }
            if !used.insert((r, c)) {
                return Err(GrfError::invalid(format!("duplicate plot ({r},{c})")));
            }
        }
        Ok(Self { m1, m2, plots })
    }

    /// Smallest field containing every plot.
    pub fn from_plots(plots: Vec<(usize, usize)>) -> Result<Self> {
        let m1 = plots.iter().map(|p| p.0).max().unwrap_or(0);
        let m2 = plots.iter().map(|p| p.1).max().unwrap_or(0);
        Self::new(m1, m2, plots)
    }

    pub fn m1(&self) -> usize {
        self.m1
    }

    pub fn m2(&self) -> usize {
        self.m2
    }

    pub fn plots(&self) -> &[(usize, usize)] {
        &self.plots
    }

    pub fn plot(&self, i: usize) -> (usize, usize) {
        self.plots[i]
    }

    pub fn len(&self) -> usize {
        self.plots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plots.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            m1: self.m1,
            m2: self.m2,
            plots: idx.iter().map(|&i| self.plots[i]).collect(),
        }
    }
}

/// A validated trial: phenotypes, genotypes, subpopulations and plots.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    obs_ids: Vec<String>,
    y: Vec<f64>,
    genotypes: Arc<GenotypeMatrix>,
    line_of: Vec<usize>,
    subpop: Vec<String>,
    layout: FieldLayout,
}

impl Dataset {
    pub fn new(
        obs_ids: Vec<String>,
        y: Vec<f64>,
        genotypes: Arc<GenotypeMatrix>,
        line_of: Vec<usize>,
        subpop: Vec<String>,
        layout: FieldLayout,
    ) -> Result<Self> {
        let n = y.len();
        for (what, len) in [
            ("observation ids", obs_ids.len()),
            ("line indices", line_of.len()),
            ("subpopulation labels", subpop.len()),
            ("plots", layout.len()),
        ] {
            if len != n {
                return Err(GrfError::dim(format!("{n} phenotypes but {len} {what}")));
            }
        }
        if n < 2 {
            return Err(GrfError::invalid("a dataset needs at least two observations"));
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(GrfError::invalid(format!(
                "missing phenotype for observation {}",
                obs_ids[i]
            )));
        }
        if let Some(&l) = line_of.iter().find(|&&l| l >= genotypes.n_lines()) {
            return Err(GrfError::dim(format!("line index {l} out of range")));
        }
        let mut seen = HashSet::new();
        for id in &obs_ids {
            if !seen.insert(id.as_str()) {
                return Err(GrfError::invalid(format!("duplicate observation id {id}")));
            }
        }
        Ok(Self {
            obs_ids,
            y,
            genotypes,
            line_of,
            subpop,
            layout,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn obs_ids(&self) -> &[String] {
        &self.obs_ids
    }

    pub fn genotypes(&self) -> &Arc<GenotypeMatrix> {
        &self.genotypes
    }

    /// Row of the genotype matrix planted in each observation.
    pub fn line_of(&self) -> &[usize] {
        &self.line_of
    }

    pub fn line_id(&self, i: usize) -> &str {
        &self.genotypes.line_ids()[self.line_of[i]]
    }

    /// Genotype identifier of every observation, used for grouped splits.
    pub fn genotype_groups(&self) -> Vec<&str> {
        (0..self.len()).map(|i| self.line_id(i)).collect()
    }

    pub fn subpop(&self) -> &[String] {
        &self.subpop
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn n_subpops(&self) -> usize {
        self.subpop.iter().collect::<HashSet<_>>().len()
    }

    /// Marker vector of observation `i`.
    pub fn markers(&self, i: usize) -> Vec<f64> {
        self.genotypes.row(self.line_of[i])
    }

    /// Observation-level genotype matrix (replicated lines repeat rows).
    pub fn observation_genotypes(&self) -> DMatrix<f64> {
        let g = self.genotypes.values();
        DMatrix::from_fn(self.len(), g.ncols(), |i, j| g[(self.line_of[i], j)])
    }

    /// Squared marker distances between observations.
    pub fn sq_dists(&self) -> DMatrix<f64> {
        let n_lines = self.genotypes.n_lines();
        let used: HashSet<usize> = self.line_of.iter().copied().collect();
        if used.len() * 2 < n_lines {
            // Only a few lines are planted; skip the full panel.
            let x = self.observation_genotypes();
            return sq_dists_between_rows(&x, &x, true);
        }
        let d = pairwise_sq_dists(&self.genotypes);
        let n = self.len();
        DMatrix::from_fn(n, n, |i, k| d[(self.line_of[i], self.line_of[k])])
    }

    pub fn with_y(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(
            self.obs_ids.clone(),
            y,
            Arc::clone(&self.genotypes),
            self.line_of.clone(),
            self.subpop.clone(),
            self.layout.clone(),
        )
    }

    /// Phenotypes shifted to mean zero.
    pub fn centered(&self) -> Self {
        let m = self.y.iter().sum::<f64>() / self.len() as f64;
        let mut out = self.clone();
        out.y.iter_mut().for_each(|v| *v -= m);
        out
    }

    /// Observations at `idx`, in that order. Genotypes are shared.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| self.obs_ids[i].clone()).collect(),
            idx.iter().map(|&i| self.y[i]).collect(),
            Arc::clone(&self.genotypes),
            idx.iter().map(|&i| self.line_of[i]).collect(),
            idx.iter().map(|&i| self.subpop[i].clone()).collect(),
            self.layout.subset(idx),
        )
    }

    /// Writes the four input files into `dir` and returns their paths in
    /// the order genotypes, phenotypes, layout, subpopulations.
    pub fn write_csv(&self, dir: &Path) -> Result<[PathBuf; 4]> {
        let paths = [
            dir.join("genotypes.csv"),
            dir.join("phenotypes.csv"),
            dir.join("layout.csv"),
            dir.join("subpops.csv"),
        ];
        let g = &self.genotypes;
        let mut w = csv_writer(&paths[0])?;
        let mut header = vec!["line_id".to_string()];
        header.extend(g.marker_ids().iter().cloned());
        w.write_record(&header)?;
        for i in 0..g.n_lines() {
            let mut rec = vec![g.line_ids()[i].clone()];
            rec.extend(g.values().row(i).iter().map(|v| format_num(*v)));
            w.write_record(&rec)?;
        }
        flush(w, &paths[0])?;

        let mut w = csv_writer(&paths[1])?;
        w.write_record(["obs_id", "line_id", "value"])?;
        for i in 0..self.len() {
            w.write_record([self.obs_ids[i].as_str(), self.line_id(i), &format_num(self.y[i])])?;
        }
        flush(w, &paths[1])?;

        let mut w = csv_writer(&paths[2])?;
        w.write_record(["obs_id", "row", "col"])?;
        for i in 0..self.len() {
            let (r, c) = self.layout.plot(i);
            w.write_record([self.obs_ids[i].clone(), r.to_string(), c.to_string()])?;
        }
        flush(w, &paths[2])?;

        let mut w = csv_writer(&paths[3])?;
        w.write_record(["obs_id", "subpop_label"])?;
        for i in 0..self.len() {
            w.write_record([self.obs_ids[i].as_str(), self.subpop[i].as_str()])?;
        }
        flush(w, &paths[3])?;
        Ok(paths)
    }
}

/// Shortest decimal that round-trips through `f64` parsing.
pub fn format_num(v: f64) -> String {
    format!("{v:?}")
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(csv::Writer::from_writer(f))
}

fn flush(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn is_missing(field: &str) -> bool {
    matches!(field.trim(), "" | "NA" | "na" | "NaN" | "nan" | ".")
}

struct Table {
    path: PathBuf,
    header: Vec<String>,
    rows: Vec<(usize, Vec<String>)>,
}

fn read_table(path: &Path) -> Result<Table> {
    let file = File::open(path).map_err(|source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(file);
    let header = rdr.headers()?.iter().map(str::to_string).collect::<Vec<_>>();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| GrfError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

impl Table {
    fn err(&self, line: usize, message: impl Into<String>) -> GrfError {
        GrfError::Parse {
            path: self.path.clone(),
            line,
            message: message.into(),
        }
    }

    fn expect_columns(&self, names: &[&str]) -> Result<()> {
        let got: Vec<&str> = self.header.iter().map(String::as_str).collect();
        if got != names {
            return Err(self.err(1, format!("expected columns {names:?}, found {got:?}")));
        }
        Ok(())
    }

    /// Map from the first column (an observation id) to the remaining fields.
    fn keyed(&self) -> Result<HashMap<&str, (usize, &[String])>> {
        let mut map = HashMap::with_capacity(self.rows.len());
        for (line, row) in &self.rows {
            if map.insert(row[0].as_str(), (*line, &row[1..])).is_some() {
                return Err(self.err(*line, format!("duplicate observation id {}", row[0])));
            }
        }
        Ok(map)
    }
}

pub fn read_genotypes(path: &Path) -> Result<GenotypeMatrix> {
    let t = read_table(path)?;
    if t.header.len() < 2 {
        return Err(t.err(1, "genotype header needs a line id column and at least one marker"));
    }
    let p = t.header.len() - 1;
    let n = t.rows.len();
    let mut values = DMatrix::zeros(n, p);
    let mut ids = Vec::with_capacity(n);
    for (i, (line, row)) in t.rows.iter().enumerate() {
        for (j, field) in row[1..].iter().enumerate() {
            if is_missing(field) {
                return Err(t.err(*line, format!("missing genotype value for line {} marker {}", row[0], t.header[j + 1])));
            }
            values[(i, j)] = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| t.err(*line, format!("malformed genotype value {field:?}")))?;
        }
        ids.push(row[0].clone());
    }
    GenotypeMatrix::new(values, ids, t.header[1..].to_vec())
}

/// Reads and cross-validates the input files.
///
/// Without a subpopulation file every observation gets the label
/// [`DEFAULT_SUBPOP`].
pub fn load_dataset(
    genotype_path: &Path,
    phenotype_path: &Path,
    layout_path: &Path,
    subpop_path: Option<&Path>,
) -> Result<Dataset> {
    let genotypes = read_genotypes(genotype_path)?;

    let pheno = read_table(phenotype_path)?;
    pheno.expect_columns(&["obs_id", "line_id", "value"])?;
    let mut obs_ids = Vec::with_capacity(pheno.rows.len());
    let mut y = Vec::with_capacity(pheno.rows.len());
    let mut line_of = Vec::with_capacity(pheno.rows.len());
    for (line, row) in &pheno.rows {
        if is_missing(&row[2]) {
            return Err(pheno.err(*line, format!("missing phenotype for observation {}", row[0])));
        }
        let v = row[2]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| pheno.err(*line, format!("malformed phenotype {:?}", row[2])))?;
        let l = genotypes
            .line_index(&row[1])
            .ok_or_else(|| pheno.err(*line, format!("line {} has no genotype", row[1])))?;
        obs_ids.push(row[0].clone());
        y.push(v);
        line_of.push(l);
    }

    let layout_t = read_table(layout_path)?;
    layout_t.expect_columns(&["obs_id", "row", "col"])?;
    if layout_t.rows.len() != obs_ids.len() {
        return Err(GrfError::dim(format!(
            "{} phenotype records but {} layout records",
            obs_ids.len(),
            layout_t.rows.len()
        )));
    }
    let layout_map = layout_t.keyed()?;
    let mut plots = Vec::with_capacity(obs_ids.len());
    let mut used = HashMap::new();
    for id in &obs_ids {
        let (line, fields) = layout_map
            .get(id.as_str())
            .ok_or_else(|| GrfError::dim(format!("observation {id} has no plot")))?;
        let parse = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| layout_t.err(*line, format!("malformed plot coordinate {s:?}")))
        };
        let plot = (parse(&fields[0])?, parse(&fields[1])?);
        if let Some(other) = used.insert(plot, id.clone()) {
            return Err(layout_t.err(
                *line,
                format!("duplicate plot ({},{}) for observations {other} and {id}", plot.0, plot.1),
            ));
        }
        plots.push(plot);
    }
    let layout = FieldLayout::from_plots(plots)?;

    let subpop = match subpop_path {
        None => vec![DEFAULT_SUBPOP.to_string(); obs_ids.len()],
        Some(path) => {
            let t = read_table(path)?;
            t.expect_columns(&["obs_id", "subpop_label"])?;
            if t.rows.len() != obs_ids.len() {
                return Err(GrfError::dim(format!(
                    "{} phenotype records but {} subpopulation records",
                    obs_ids.len(),
                    t.rows.len()
                )));
            }
            let map = t.keyed()?;
            obs_ids
                .iter()
                .map(|id| match map.get(id.as_str()) {
                    Some((line, f)) if is_missing(&f[0]) => {
                        Err(t.err(*line, format!("missing subpopulation for {id}")))
                    }
                    Some((_, f)) => Ok(f[0].clone()),
                    None => Err(GrfError::dim(format!("observation {id} has no subpopulation"))),
                })
                .collect::<Result<Vec<_>>>()?
        }
    };

    Dataset::new(obs_ids, y, Arc::new(genotypes), line_of, subpop, layout)
}

/// Writes a square matrix as CSV with generated row/column labels.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut f = File::create(path).map_err(|source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format_num(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a CSV table, optionally preceded by a `# ...` comment line.
pub fn write_table(path: &Path, preamble: Option<&str>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    let body = w.into_inner().map_err(|e| GrfError::Io {
        path: path.to_path_buf(),
        source: e.into_error(),
    })?;
    let mut out = Vec::with_capacity(body.len() + 64);
    if let Some(p) = preamble {
        out.extend_from_slice(b"# ");
        out.extend_from_slice(p.as_bytes());
        out.push(b'\n');
    }
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|source| GrfError::Io {
        path: path.to_path_buf(),
        source,
    })
}

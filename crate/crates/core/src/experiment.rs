//! Sweeps over sketching schemes, sketch sizes and replicates.
//!
//! Each replicate draws one sketch, solves the sketched problem and records the
//! rank-preservation diagnostic together with the relative error against the
//! exact solution. Replicate `k` of cell `(scheme i, size j)` always uses the
//! seed `derive_seed(master, [SWEEP, i, j, k])`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{diagnose, RankPreservation};
use crate::error::{Error, Result};
use crate::io::{read_matrix_csv, read_vector_csv, write_atomic};
use crate::linalg::Matrix;
use crate::model::{exact_solve, simulate_response, DesignData, ModelSpec};
use crate::rng::{derive_seed, normal_vector, rng_from_seed, stream, Rng};
use crate::sketch::{draw_with, SketchKind, SketchScheme};

pub const DEFAULT_SIGMA2: f64 = 1e-12;
pub const DEFAULT_SPARSITY: f64 = 0.5;
const DESIGN_RETRIES: u64 = 16;

pub fn default_r_grid() -> Vec<usize> {
    (20..=100).step_by(5).collect()
}

fn default_schemes() -> Vec<SketchKind> {
    SketchKind::ALL_RANDOM.to_vec()
}

fn default_replicates() -> usize {
    100
}

fn default_sigma2() -> f64 {
    DEFAULT_SIGMA2
}

fn default_sparsity() -> f64 {
    DEFAULT_SPARSITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub p: usize,
    #[serde(default)]
    pub coherence: f64,
    #[serde(default = "default_sigma2")]
    pub sigma2: f64,
    /// Fraction of the dense-column coefficients set to zero.
    #[serde(default = "default_sparsity")]
    pub sparsity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CsvSource {
    pub x: PathBuf,
    pub y: PathBuf,
    #[serde(default)]
    pub header: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Csv(CsvSource),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Outputs {
    pub records: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SketchKind>,
    #[serde(default = "default_r_grid")]
    pub r_grid: Vec<usize>,
    #[serde(default = "default_replicates")]
    pub n_replicates: usize,
    pub master_seed: u64,
    pub data_source: DataSource,
    #[serde(default)]
    pub outputs: Outputs,
    /// Write `wall_time_us = 0` so output files are byte-identical across runs.
    #[serde(default)]
    pub deterministic: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            source_name: "experiment config".into(),
            row: e.line(),
            col: e.column(),
            message: e.to_string(),
        })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { row, col, message, .. } => Error::Parse {
                source_name: path.display().to_string(),
                row,
                col,
                message,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schemes.is_empty() {
            return Err(Error::InvalidConfig("no sketching schemes".into()));
        }
        if self.r_grid.is_empty() {
            return Err(Error::InvalidConfig("empty r grid".into()));
        }
        if self.r_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("r grid must be strictly ascending".into()));
        }
        if self.r_grid[0] == 0 {
            return Err(Error::InvalidConfig("r grid must start at 1 or above".into()));
        }
        if self.n_replicates == 0 {
            return Err(Error::InvalidConfig("need at least one replicate".into()));
        }
        if let DataSource::Synthetic(s) = &self.data_source {
            check_synthetic(s)?;
        }
        Ok(())
    }
}

fn check_synthetic(s: &SyntheticSpec) -> Result<()> {
    if s.p == 0 || s.n <= s.p {
        return Err(Error::InvalidConfig(format!(
            "synthetic design needs n > p >= 1, got n = {}, p = {}",
            s.n, s.p
        )));
    }
    if !(0.0..=1.0).contains(&s.coherence) {
        return Err(Error::InvalidConfig(format!("coherence {} outside [0, 1]", s.coherence)));
    }
    if !(0.0..=1.0).contains(&s.sparsity) {
        return Err(Error::InvalidConfig(format!("sparsity {} outside [0, 1]", s.sparsity)));
    }
    if !(s.sigma2 > 0.0 && s.sigma2.is_finite()) {
        return Err(Error::InvalidConfig(format!("sigma2 must be positive, got {}", s.sigma2)));
    }
    Ok(())
}

/// Synthetic problem: observed data plus the truth it was simulated from.
#[derive(Clone, Debug)]
pub struct SyntheticProblem {
    pub data: DesignData,
    pub spec: ModelSpec,
    /// Columns with sparse support.
    pub rare_columns: Vec<usize>,
}

/// Number of sparse columns and their support size for a coherence level.
pub fn rare_layout(n: usize, p: usize, coherence: f64) -> (usize, usize) {
    let k = ((coherence * p as f64 / 10.0).round() as usize).min(p.saturating_sub(1));
    let support = ((n as f64 * (1.0 - coherence) / 5.0).round() as usize).clamp(1, n);
    (k, support)
}

fn synthetic_design(rng: &mut Rng, n: usize, p: usize, coherence: f64) -> (Matrix, Vec<usize>) {
    let (k, support) = rare_layout(n, p, coherence);
    let mut x = Matrix::zeros(n, p);
    let dense = p - k;
    let block = crate::rng::normal_matrix(rng, n, dense);
    x.columns_mut(0, dense).copy_from(&block);
    let outliers = ((10.0 * coherence).round() as usize).min(dense).min(n);
    let boost = 1.0 + 9.0 * coherence;
    for i in rand::seq::index::sample(rng, n, outliers) {
        x.row_mut(i).columns_mut(0, dense).scale_mut(boost * (n as f64).sqrt());
    }
    let scale = (n as f64 / support as f64).sqrt();
    for j in dense..p {
        let rows = rand::seq::index::sample(rng, n, support);
        let vals = normal_vector(rng, support, scale);
        for (i, v) in rows.iter().zip(vals.iter()) {
            x[(i, j)] = *v;
        }
    }
    (x, (dense..p).collect())
}

/// Gaussian design whose leverage grows more uneven with `coherence`.
///
/// At `coherence = 0` every entry is i.i.d. standard normal. Otherwise
/// `round(10 coherence)` rows of the dense block are scaled up by
/// `(1 + 9 coherence) sqrt(n)`, which puts leverage close to 1 on each, and the last
/// `round(coherence p / 10)` columns are zero except on
/// `round(n (1 - coherence) / 5)` random rows, so their directions are only seen
/// by sketches that hit those rows. Their coefficients are kept away from zero;
/// the dense coefficients are hard-thresholded to the requested sparsity.
pub fn generate_synthetic_design(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticProblem> {
    check_synthetic(spec)?;
    let SyntheticSpec { n, p, coherence, sigma2, sparsity } = *spec;
    for attempt in 0..DESIGN_RETRIES {
        let mut rng = rng_from_seed(derive_seed(seed, &[stream::DESIGN, attempt]));
        let (x, rare_columns) = synthetic_design(&mut rng, n, p, coherence);
        let mut beta0 = normal_vector(&mut rng, p, 1.0);
        let dense = p - rare_columns.len();
        let mut order: Vec<usize> = (0..dense).collect();
        order.sort_by(|&a, &b| beta0[a].abs().total_cmp(&beta0[b].abs()));
        let zeroed = ((sparsity * dense as f64).round() as usize).min(dense.saturating_sub(1));
        for &j in &order[..zeroed] {
            beta0[j] = 0.0;
        }
        for &j in &rare_columns {
            beta0[j] = beta0[j].signum() * (1.0 + beta0[j].abs());
        }
        let model = ModelSpec::new(beta0, sigma2)?;
        let y = simulate_response(&x, &model, derive_seed(seed, &[stream::NOISE, attempt]))?;
        match DesignData::new(x, y) {
            Ok(data) => {
                return Ok(SyntheticProblem {
                    data,
                    spec: model,
                    rare_columns,
                })
            }
            Err(Error::RankDeficientDesign { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Numerical(format!(
        "no full-rank synthetic design after {DESIGN_RETRIES} attempts"
    )))
}

/// One row of the records CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub scheme: SketchKind,
    pub r: usize,
    pub replicate: usize,
    pub seed: u64,
    pub rank_preserved: bool,
    pub kappa_p0: String,
    pub rel_err_beta: f64,
    pub rel_err_pred: f64,
    pub wall_time_us: u64,
}

/// One row of the summary CSV.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scheme: SketchKind,
    pub r: usize,
    pub pr_rank_preserved: f64,
    pub pr_stderr: f64,
    pub median_log10_rel_err: f64,
}

/// Where the rank-preservation probability and the error curve turn over.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct Transition {
    pub scheme: SketchKind,
    /// Smallest `r` with estimated probability above one half.
    pub first_r_majority: Option<usize>,
    /// Smallest `r` whose median `log10` error is at least 3 below the value at the smallest `r`.
    pub first_r_error_drop: Option<usize>,
    /// The two agree to within one grid step (or neither occurs).
    pub coupled: bool,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub records: Vec<ExperimentRow>,
    pub summary: Vec<SummaryRow>,
    pub transitions: Vec<Transition>,
}

/// Load the configured data source.
pub fn load_data(config: &ExperimentConfig) -> Result<DesignData> {
    match &config.data_source {
        DataSource::Synthetic(s) => {
            Ok(generate_synthetic_design(s, derive_seed(config.master_seed, &[stream::DESIGN]))?.data)
        }
        DataSource::Csv(c) => {
            let x = read_matrix_csv(&c.x, c.header)?;
            let y = read_vector_csv(&c.y, c.header)?;
            DesignData::new(x, y)
        }
    }
}

/// Run the sweep and write any configured output files.
pub fn run_sweep(config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    let data = load_data(config)?;
    let result = sweep_on(&data, config)?;
    if let Some(path) = &config.outputs.records {
        write_atomic(path, &records_csv(&result.records)?)?;
    }
    if let Some(path) = &config.outputs.summary {
        write_atomic(path, &summary_csv(&result.summary)?)?;
    }
    Ok(result)
}

/// Run the sweep on already loaded data without touching the file system.
pub fn sweep_on(data: &DesignData, config: &ExperimentConfig) -> Result<SweepResult> {
    config.validate()?;
    if let Some(&r) = config.r_grid.iter().find(|&&r| r > data.n()) {
        return Err(Error::InvalidConfig(format!(
            "sketch size {r} exceeds the {} rows of the design",
            data.n()
        )));
    }
    let fit = exact_solve(data);
    let leverage = data.leverage_scores();
    let reps = config.n_replicates;
    let cells: Vec<(usize, usize, usize)> = (0..config.schemes.len())
        .flat_map(|i| (0..config.r_grid.len()).flat_map(move |j| (0..reps).map(move |k| (i, j, k))))
        .collect();

    let records = cells
        .par_iter()
        .map(|&(i, j, k)| {
            let kind = config.schemes[i];
            let r = config.r_grid[j];
            let seed = derive_seed(config.master_seed, &[stream::SWEEP, i as u64, j as u64, k as u64]);
            let start = Instant::now();
            let rec = draw_with(SketchScheme::new(kind, r), data.n(), Some(&leverage), seed)
                .and_then(|draw| diagnose(data, &draw, &fit))
                .map_err(|e| Error::Cell {
                    scheme: kind.to_string(),
                    r,
                    replicate: k,
                    source: Box::new(e),
                })?;
            let wall_time_us = if config.deterministic {
                0
            } else {
                start.elapsed().as_micros() as u64
            };
            Ok(ExperimentRow {
                scheme: kind,
                r,
                replicate: k,
                seed,
                rank_preserved: rec.rank_preserved,
                kappa_p0: rec.kappa_p0.to_string(),
                rel_err_beta: rec.rel_err_beta,
                rel_err_pred: rec.rel_err_pred,
                wall_time_us,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let summary: Vec<SummaryRow> = records
        .chunks(reps)
        .map(|cell| {
            let hits = cell.iter().filter(|row| row.rank_preserved).count();
            let pr = RankPreservation::from_counts(hits, reps);
            let mut logs: Vec<f64> = cell.iter().map(|row| row.rel_err_beta.log10()).collect();
            SummaryRow {
                scheme: cell[0].scheme,
                r: cell[0].r,
                pr_rank_preserved: pr.estimate,
                pr_stderr: pr.std_err,
                median_log10_rel_err: median(&mut logs),
            }
        })
        .collect();

    let transitions = summary
        .chunks(config.r_grid.len())
        .map(transition)
        .collect();
    Ok(SweepResult {
        records,
        summary,
        transitions,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Transition points of one scheme's summary rows, ordered by `r`.
pub fn transition(rows: &[SummaryRow]) -> Transition {
    let majority = rows.iter().position(|row| row.pr_rank_preserved > 0.5);
    let base = rows[0].median_log10_rel_err;
    let drop = rows
        .iter()
        .position(|row| row.median_log10_rel_err <= base - 3.0);
    let coupled = match (majority, drop) {
        (Some(a), Some(b)) => a.abs_diff(b) <= 1,
        (None, None) => true,
        _ => false,
    };
    Transition {
        scheme: rows[0].scheme,
        first_r_majority: majority.map(|i| rows[i].r),
        first_r_error_drop: drop.map(|i| rows[i].r),
        coupled,
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::InvalidInput(format!("csv encoding failed: {e}")))?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv encoding failed: {e}")))
}

pub fn records_csv(rows: &[ExperimentRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<Vec<u8>> {
    to_csv(rows)
}

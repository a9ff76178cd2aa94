//! Tasks, dataset generation, the log/max-normalisation transform and the
//! error-targeted oversampling loop.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::{parse, Expr};

const PROBE_SAMPLES: usize = 10_000;
const PROBE_SEED: u64 = 0x9e37_79b9;
const MAX_RETRIES: usize = 1000;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("task {task}: {reason}")]
    InvalidTask { task: String, reason: String },
    #[error("task {task}: ground truth is not finite and positive at {x:?}")]
    Rejected { task: String, x: Vec<f64> },
    #[error("non-positive value {value} in column {column}, row {row}")]
    NonPositive { column: usize, row: usize, value: f64 },
    #[error("empty dataset")]
    Empty,
    #[error("k must be at least 2")]
    BadGrid,
    #[error("no grid cell holds at least two samples")]
    NoEligibleCells,
    #[error("model prediction failed: {0}")]
    Model(String),
    #[error("dataset cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A benchmark problem: a positive ground-truth formula over a box.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub formula: String,
    pub truth: Expr,
    pub arity: usize,
    pub ranges: Vec<(f64, f64)>,
    pub count: usize,
    /// Overrides the default `arity + 1` network depth.
    pub layers: Option<usize>,
}

impl Task {
    /// Parses `formula` and checks the task invariants.
    pub fn new(name: &str, formula: &str, ranges: Vec<(f64, f64)>, count: usize) -> Result<Task, SamplingError> {
        let invalid = |reason: String| SamplingError::InvalidTask { task: name.to_string(), reason };
        let truth = parse(formula).map_err(|e| invalid(e.to_string()))?;
        let task = Task {
            name: name.to_string(),
            formula: formula.to_string(),
            arity: ranges.len(),
            truth,
            ranges,
            count,
            layers: None,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = Some(layers);
        self
    }

    pub fn validate(&self) -> Result<(), SamplingError> {
        let invalid = |reason: String| SamplingError::InvalidTask { task: self.name.clone(), reason };
        if self.arity == 0 {
            return Err(invalid("at least one variable is required".into()));
        }
        if self.truth.arity() > self.arity {
            return Err(invalid(format!(
                "formula uses {} variables, only {} ranges given",
                self.truth.arity(),
                self.arity
            )));
        }
        for (j, &(lo, hi)) in self.ranges.iter().enumerate() {
            if !(lo > 0.0 && hi > lo && hi.is_finite()) {
                return Err(invalid(format!("range of x{} must satisfy 0 < lo < hi, got [{lo}, {hi}]", j + 1)));
            }
        }
        if self.count == 0 {
            return Err(invalid("sample count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
        for _ in 0..PROBE_SAMPLES {
            let x = uniform_point(&self.ranges, &mut rng);
            match self.truth.eval(&x) {
                Ok(y) if y.is_finite() && y > 0.0 => {}
                _ => return Err(SamplingError::Rejected { task: self.name.clone(), x }),
            }
        }
        Ok(())
    }

    /// Stable digest of the task definition.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update([0]);
        h.update(self.formula.as_bytes());
        for (lo, hi) in &self.ranges {
            h.update(lo.to_le_bytes());
            h.update(hi.to_le_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

fn uniform_point(ranges: &[(f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    ranges.iter().map(|&(lo, hi)| if hi > lo { rng.gen_range(lo..hi) } else { lo }).collect()
}

/// Rows of original-space inputs with their targets.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn arity(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    pub fn extend(&mut self, other: &Dataset) {
        self.x.extend(other.x.iter().cloned());
        self.y.extend(other.y.iter().copied());
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: idx.iter().map(|&i| self.x[i].clone()).collect(), y: idx.iter().map(|&i| self.y[i]).collect() }
    }
}

/// `count` uniform i.i.d. points inside `bounds`, labelled by the truth.
pub fn sample_box(
    task: &Task,
    bounds: &[(f64, f64)],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, SamplingError> {
    let mut ds = Dataset { x: Vec::with_capacity(count), y: Vec::with_capacity(count) };
    for _ in 0..count {
        let mut tries = 0;
        loop {
            let x = uniform_point(bounds, rng);
            match task.truth.eval(&x) {
                Ok(y) if y.is_finite() && y > 0.0 => {
                    ds.x.push(x);
                    ds.y.push(y);
                    break;
                }
                _ if tries < MAX_RETRIES => tries += 1,
                _ => return Err(SamplingError::Rejected { task: task.name.clone(), x }),
            }
        }
    }
    Ok(ds)
}

/// Deterministic uniform sample of the task box.
pub fn generate(task: &Task, count: usize, seed: u64) -> Result<Dataset, SamplingError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_box(task, &task.ranges, count, &mut rng)
}

/// Per-variable scales `m_j = max|ln x_j|` of the initial training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub scales: Vec<f64>,
    pub log_target: bool,
}

/// Inputs `u_j = ln(x_j)/m_j` and targets `v = ln y`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Transformed {
    pub u: Vec<Vec<f64>>,
    pub v: Vec<f64>,
}

fn check_positive(ds: &Dataset) -> Result<(), SamplingError> {
    for (row, (x, y)) in ds.x.iter().zip(&ds.y).enumerate() {
        for (column, v) in x.iter().enumerate() {
            if !(*v > 0.0) {
                return Err(SamplingError::NonPositive { column, row, value: *v });
            }
        }
        if !(*y > 0.0) {
            return Err(SamplingError::NonPositive { column: x.len(), row, value: *y });
        }
    }
    Ok(())
}

pub fn fit_apply_transform(ds: &Dataset) -> Result<(Transformed, TransformRecord), SamplingError> {
    if ds.is_empty() {
        return Err(SamplingError::Empty);
    }
    check_positive(ds)?;
    let scales = (0..ds.arity())
        .map(|j| {
            let m = ds.x.iter().map(|x| x[j].ln().abs()).fold(0.0, f64::max);
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let rec = TransformRecord { scales, log_target: true };
    let t = rec.apply(ds)?;
    Ok((t, rec))
}

impl TransformRecord {
    pub fn apply(&self, ds: &Dataset) -> Result<Transformed, SamplingError> {
        check_positive(ds)?;
        Ok(Transformed { u: ds.x.iter().map(|x| self.apply_x(x)).collect(), v: ds.y.iter().map(|y| y.ln()).collect() })
    }

    pub fn apply_x(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scales).map(|(v, m)| v.ln() / m).collect()
    }

    pub fn invert_u(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(&self.scales).map(|(v, m)| (m * v).exp()).collect()
    }

    /// The transformed inputs `u_j` as expressions in the original variables.
    pub fn input_exprs(&self) -> Vec<Expr> {
        self.scales.iter().enumerate().map(|(j, m)| Expr::lit(1.0 / m) * Expr::ln(Expr::var(j))).collect()
    }
}

/// Anything that predicts an original-space target from original inputs.
pub trait Model {
    fn predict(&self, x: &[f64]) -> Result<f64, String>;
}

impl<F: Fn(&[f64]) -> f64> Model for F {
    fn predict(&self, x: &[f64]) -> Result<f64, String> {
        Ok(self(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub count: usize,
    /// `1 − R²` of the model on the cell; 0 for cells with fewer than two
    /// samples.
    pub error: f64,
}

/// Per-cell errors over a `k^n` equal-width grid of the task box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridErrors {
    pub k: usize,
    pub ranges: Vec<(f64, f64)>,
    pub cells: Vec<CellError>,
    /// Mean error over cells with at least two samples.
    pub mean: f64,
}

impl GridErrors {
    pub fn eligible(&self, cell: usize) -> bool {
        self.cells[cell].count >= 2
    }

    /// Eligible cell with the largest error (lowest index on ties).
    pub fn worst(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, c) in self.cells.iter().enumerate() {
            if c.count >= 2 && best.is_none_or(|b| c.error > self.cells[b].error) {
                best = Some(i);
            }
        }
        best
    }

    pub fn cell_of(&self, x: &[f64]) -> usize {
        cell_index(x, &self.ranges, self.k)
    }

    /// Hyper-rectangle of a cell.
    pub fn cell_box(&self, cell: usize) -> Vec<(f64, f64)> {
        let mut rest = cell;
        self.ranges
            .iter()
            .map(|&(lo, hi)| {
                let b = rest % self.k;
                rest /= self.k;
                let w = (hi - lo) / self.k as f64;
                let a = lo + w * b as f64;
                (a, if b + 1 == self.k { hi } else { a + w })
            })
            .collect()
    }
}

fn cell_index(x: &[f64], ranges: &[(f64, f64)], k: usize) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for (v, &(lo, hi)) in x.iter().zip(ranges) {
        let b = (((v - lo) / (hi - lo)) * k as f64).floor();
        let b = (b.max(0.0) as usize).min(k - 1);
        idx += b * stride;
        stride *= k;
    }
    idx
}

/// `1 − R²`, with constant-target cells scored 0 when predicted exactly
/// and 1 otherwise.
fn one_minus_r2(pred: &[f64], y: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let sst: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let sse: f64 = pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum();
    if sst > 0.0 {
        sse / sst
    } else if sse == 0.0 {
        0.0
    } else {
        1.0_f64.max(sse)
    }
}

pub fn cell_errors<M: Model + ?Sized>(
    model: &M,
    ds: &Dataset,
    ranges: &[(f64, f64)],
    k: usize,
) -> Result<GridErrors, SamplingError> {
    if k < 2 {
        return Err(SamplingError::BadGrid);
    }
    let n_cells = k.pow(ranges.len() as u32);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_cells];
    for (i, x) in ds.x.iter().enumerate() {
        members[cell_index(x, ranges, k)].push(i);
    }
    let mut cells = Vec::with_capacity(n_cells);
    let (mut sum, mut eligible) = (0.0, 0usize);
    for m in &members {
        if m.len() < 2 {
            cells.push(CellError { count: m.len(), error: 0.0 });
            continue;
        }
        let pred = m
            .iter()
            .map(|&i| model.predict(&ds.x[i]))
            .collect::<Result<Vec<f64>, String>>()
            .map_err(SamplingError::Model)?;
        let y: Vec<f64> = m.iter().map(|&i| ds.y[i]).collect();
        let mut e = one_minus_r2(&pred, &y);
        if !e.is_finite() {
            e = f64::MAX;
        }
        sum += e;
        eligible += 1;
        cells.push(CellError { count: m.len(), error: e });
    }
    if eligible == 0 {
        return Err(SamplingError::NoEligibleCells);
    }
    Ok(GridErrors { k, ranges: ranges.to_vec(), cells, mean: sum / eligible as f64 })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OversampleConfig {
    pub max_iter: usize,
    /// Percentage of the current dataset size added per round.
    pub percent: f64,
    pub k: usize,
}

impl Default for OversampleConfig {
    fn default() -> Self {
        OversampleConfig { max_iter: 2, percent: 30.0, k: 8 }
    }
}

/// One executed round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub worst_cell: usize,
    pub cell_box: Vec<(f64, f64)>,
    pub added: usize,
    pub added_inside: usize,
    pub error_before: f64,
    pub error_after: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug)]
pub struct OversampleOutcome<M> {
    pub model: M,
    pub dataset: Dataset,
    pub initial_error: f64,
    pub final_error: f64,
    pub rounds: Vec<RoundTrace>,
    /// Trainer failure that ended the loop early.
    pub aborted: Option<String>,
}

/// Rounds of: pick the worst cell, add fresh labelled points inside it,
/// retrain (warm-started from the current model) and keep the result only
/// if the mean cell error drops.
pub fn oversample_rounds<M, F>(
    task: &Task,
    dataset: Dataset,
    model: M,
    mut trainer: F,
    cfg: &OversampleConfig,
    seed: u64,
) -> Result<OversampleOutcome<M>, SamplingError>
where
    M: Model,
    F: FnMut(&Dataset, &M) -> Result<M, String>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = cell_errors(&model, &dataset, &task.ranges, cfg.k)?;
    let initial = grid.mean;
    let mut out = OversampleOutcome {
        model,
        dataset,
        initial_error: initial,
        final_error: initial,
        rounds: Vec::new(),
        aborted: None,
    };
    let mut grid = grid;
    for _ in 0..cfg.max_iter {
        let Some(worst) = grid.worst() else { break };
        let bounds = grid.cell_box(worst);
        let add = (cfg.percent / 100.0 * out.dataset.len() as f64).ceil() as usize;
        let fresh = sample_box(task, &bounds, add, &mut rng)?;
        let inside = fresh.x.iter().filter(|x| grid.cell_of(x) == worst).count();
        let mut next = out.dataset.clone();
        next.extend(&fresh);
        let model = match trainer(&next, &out.model) {
            Ok(m) => m,
            Err(e) => {
                out.aborted = Some(e);
                break;
            }
        };
        let next_grid = cell_errors(&model, &next, &task.ranges, cfg.k)?;
        let accepted = next_grid.mean < grid.mean;
        out.rounds.push(RoundTrace {
            worst_cell: worst,
            cell_box: bounds,
            added: add,
            added_inside: inside,
            error_before: grid.mean,
            error_after: next_grid.mean,
            accepted,
        });
        if !accepted {
            break;
        }
        out.model = model;
        out.dataset = next;
        out.final_error = next_grid.mean;
        grid = next_grid;
    }
    Ok(out)
}

/// Initial training followed by [`oversample_rounds`].
pub fn oversample_loop<M, T, F>(
    task: &Task,
    dataset: Dataset,
    mut initial: T,
    trainer: F,
    cfg: &OversampleConfig,
    seed: u64,
) -> Result<OversampleOutcome<M>, SamplingError>
where
    M: Model,
    T: FnMut(&Dataset) -> Result<M, String>,
    F: FnMut(&Dataset, &M) -> Result<M, String>,
{
    let model = initial(&dataset).map_err(SamplingError::Model)?;
    oversample_rounds(task, dataset, model, trainer, cfg, seed)
}

const CACHE_MAGIC: &[u8; 8] = b"LIESDS1\n";

#[derive(Serialize, Deserialize, Debug, PartialEq)]
struct CacheHeader {
    task: String,
    task_hash: String,
    seed: u64,
    rows: usize,
    columns: usize,
}

/// Cache file name for `(task, seed, count)`.
pub fn cache_path(dir: &Path, task: &Task, seed: u64, count: usize) -> PathBuf {
    dir.join(format!("{}-{}-s{seed}-n{count}.lds", task.name, task.hash()))
}

/// Writes a dataset as a JSON header followed by little-endian `f64`
/// columns (inputs first, target last).
pub fn write_dataset(path: &Path, task: &Task, seed: u64, ds: &Dataset) -> Result<(), SamplingError> {
    let header = CacheHeader {
        task: task.name.clone(),
        task_hash: task.hash(),
        seed,
        rows: ds.len(),
        columns: ds.arity() + 1,
    };
    let json = serde_json::to_vec(&header).map_err(|e| SamplingError::Cache(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * ds.len() * header.columns);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for j in 0..ds.arity() {
        for x in &ds.x {
            buf.extend_from_slice(&x[j].to_le_bytes());
        }
    }
    for y in &ds.y {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset(path: &Path, task: &Task) -> Result<Dataset, SamplingError> {
    let bad = |m: &str| SamplingError::Cache(format!("{}: {m}", path.display()));
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 12 || &buf[..8] != CACHE_MAGIC {
        return Err(bad("bad magic"));
    }
    let hlen = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let body = buf.get(12 + hlen..).ok_or_else(|| bad("truncated header"))?;
    let header: CacheHeader = serde_json::from_slice(&buf[12..12 + hlen]).map_err(|e| bad(&e.to_string()))?;
    if header.task_hash != task.hash() {
        return Err(bad("task hash mismatch"));
    }
    if body.len() != 8 * header.rows * header.columns || header.columns == 0 {
        return Err(bad("payload size does not match the header"));
    }
    let col = |j: usize, i: usize| {
        let o = 8 * (j * header.rows + i);
        f64::from_le_bytes(body[o..o + 8].try_into().unwrap())
    };
    let arity = header.columns - 1;
    Ok(Dataset {
        x: (0..header.rows).map(|i| (0..arity).map(|j| col(j, i)).collect()).collect(),
        y: (0..header.rows).map(|i| col(arity, i)).collect(),
    })
}

/// Reads the cached dataset for `(task, seed, count)` or generates and
/// caches it.
pub fn load_or_generate(dir: &Path, task: &Task, count: usize, seed: u64) -> Result<Dataset, SamplingError> {
    let path = cache_path(dir, task, seed, count);
    if path.exists() {
        match read_dataset(&path, task) {
            Ok(ds) if ds.len() == count => return Ok(ds),
            Ok(_) => log::warn!("{}: row count mismatch, regenerating", path.display()),
            Err(e) => log::warn!("{e}; regenerating"),
        }
    }
    let ds = generate(task, count, seed)?;
    write_dataset(&path, task, seed, &ds)?;
    Ok(ds)
}

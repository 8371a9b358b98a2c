//! Resumable grid sweeps over sample count, selection size and expert count.
//!
//! Cells are enumerated as `(model, row, column)`. Every trial derives its
//! training seed from `(root, cell, trial)` and its data from
//! `(root, trial)`, so cells that differ only in `N` see nested prefixes of
//! the same training pool. Finished cells are persisted one file each and
//! skipped on re-runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::plot::{emit_plot, Heatmap, Plot, PlotBody, Point, Series};
use crate::data::{load_dataset, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag_hash, Rng};
use crate::training::{train, TrainConfig};
use crate::util::{mean, std_dev, write_atomic};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variable {
    /// Training-set size.
    #[serde(rename = "N", alias = "n")]
    Samples,
    #[serde(rename = "l")]
    L,
    #[serde(rename = "k")]
    K,
}

impl Variable {
    pub fn name(self) -> &'static str {
        match self {
            Variable::Samples => "N",
            Variable::L => "l",
            Variable::K => "k",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    /// Success counts over an `(l, N)` grid, drawn as a heatmap.
    PhaseTransition,
    /// Mean metric against `l` or `k` at fixed `N`.
    AccuracyVs,
    /// Mean metric against `N` for several models.
    SamplesVsAccuracy,
    /// Routing rates against a grid, drawn as lines.
    RouterRate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TestAccuracy,
    /// Worst per-class rate of the discriminative patch being selected.
    RateInTopl,
    /// Worst per-class rate of the discriminative patch being top-gated.
    RateTopGate,
}

impl Metric {
    pub fn column(self) -> &'static str {
        match self {
            Metric::TestAccuracy => "accuracy",
            Metric::RateInTopl => "rate_in_topl",
            Metric::RateTopGate => "rate_top_gate",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticConfig),
    /// Pre-built dataset files (for example an MNIST collage).
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub variable: Variable,
    pub grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: String,
    pub train: TrainConfig,
}

fn default_threshold() -> f64 {
    0.95
}

fn default_trials() -> usize {
    5
}

fn default_metric() -> Metric {
    Metric::TestAccuracy
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub name: String,
    /// Figure key recorded in `index.json` (for example `phase-transition`).
    #[serde(default)]
    pub figure: Option<String>,
    pub kind: SweepKind,
    /// Column axis.
    pub variable: Variable,
    pub grid: Vec<usize>,
    /// Optional row axis (phase transitions use `l`).
    #[serde(default)]
    pub rows: Option<Axis>,
    /// Models compared in the sweep; empty means `train` alone.
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSpec,
    /// Training-set size when `N` is not swept.
    #[serde(default)]
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_threshold")]
    pub success_threshold: f64,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    /// Successes a cell needs to count as solved in the frontier summary;
    /// defaults to all trials.
    #[serde(default)]
    pub frontier_successes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let increasing = |g: &[usize]| !g.is_empty() && g.windows(2).all(|w| w[0] < w[1]);
        if !increasing(&self.grid) {
            return Err(Error::invalid("grid must be non-empty and strictly increasing"));
        }
        if let Some(rows) = &self.rows {
            if !increasing(&rows.grid) {
                return Err(Error::invalid("row grid must be non-empty and strictly increasing"));
            }
            if rows.variable == self.variable {
                return Err(Error::invalid("row and column variables must differ"));
            }
        }
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if self.test_size == 0 {
            return Err(Error::invalid("test_size must be >= 1"));
        }
        let sweeps_n = self.variable == Variable::Samples
            || self.rows.as_ref().is_some_and(|r| r.variable == Variable::Samples);
        if !sweeps_n && self.train_size == 0 {
            return Err(Error::invalid("train_size must be set when N is not swept"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("sweep name must be a plain file stem"));
        }
        Ok(())
    }

    fn model_list(&self) -> Vec<ModelSpec> {
        if self.models.is_empty() {
            vec![ModelSpec {
                label: self.train.mode.as_str().into(),
                train: self.train.clone(),
            }]
        } else {
            self.models.clone()
        }
    }

    fn row_values(&self) -> Vec<Option<usize>> {
        match &self.rows {
            Some(axis) => axis.grid.iter().map(|&v| Some(v)).collect(),
            None => vec![None],
        }
    }

    /// Cells in enumeration order.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for (mi, m) in self.model_list().iter().enumerate() {
            for row in self.row_values() {
                for &col in &self.grid {
                    out.push(CellKey {
                        index: out.len(),
                        model: mi,
                        label: m.label.clone(),
                        row,
                        col,
                    });
                }
            }
        }
        out
    }

    fn fingerprint(&self) -> Result<String> {
        Ok(format!("{:016x}", tag_hash(&serde_json::to_string(self)?)))
    }

    fn max_samples(&self) -> usize {
        let mut n = self.train_size;
        if self.variable == Variable::Samples {
            n = n.max(*self.grid.last().unwrap_or(&0));
        }
        if let Some(r) = &self.rows {
            if r.variable == Variable::Samples {
                n = n.max(*r.grid.last().unwrap_or(&0));
            }
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub index: usize,
    pub model: usize,
    pub label: String,
    pub row: Option<usize>,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub value: Option<f64>,
    pub success: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub trials: Vec<TrialResult>,
}

impl CellResult {
    pub fn successes(&self) -> usize {
        self.trials.iter().filter(|t| t.success).count()
    }

    /// Values of completed trials; failed trials are excluded.
    pub fn values(&self) -> Vec<f64> {
        self.trials.iter().filter_map(|t| t.value).collect()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values())
    }

    pub fn std(&self) -> f64 {
        std_dev(&self.values())
    }
}

#[derive(Serialize, Deserialize)]
struct CellFile {
    fingerprint: String,
    result: CellResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub model: String,
    pub row: Option<usize>,
    pub col: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub successes: usize,
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepOutput {
    pub name: String,
    pub cells: Vec<CellResult>,
    pub summary: Vec<CellSummary>,
    /// Per model and row: smallest column value whose cell reaches the
    /// frontier success count (phase transitions) or whose mean reaches the
    /// success threshold (curves).
    pub frontier: Vec<FrontierEntry>,
    pub artifacts: Vec<PathBuf>,
    /// Cells computed by this call (the rest were loaded from disk).
    pub computed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierEntry {
    pub model: String,
    pub row: Option<usize>,
    pub first_col: Option<usize>,
}

impl SweepOutput {
    pub fn cell(&self, label: &str, row: Option<usize>, col: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.key.label == label && c.key.row == row && c.key.col == col)
    }
}

/// Data shared by every cell of one trial.
struct TrialData {
    train: Dataset,
    test: Dataset,
}

fn trial_data(spec: &SweepSpec, trial: usize) -> Result<TrialData> {
    let seed = derive_seed(spec.seed, &[tag_hash("data"), trial as u64]);
    let rng = Rng::new(seed);
    let max_n = spec.max_samples();
    match &spec.data {
        DataSpec::Synthetic(cfg) => {
            // the library depends only on the root seed: every trial samples
            // the same distribution
            let lib = cfg.library(&Rng::new(derive_seed(spec.seed, &[tag_hash("library")])))?;
            let train = cfg.dataset(&lib, max_n, &mut rng.fork("train"))?;
            let test = cfg.dataset(&lib, spec.test_size, &mut rng.fork("test"))?;
            Ok(TrialData { train, test })
        }
        DataSpec::Files { train, test } => {
            let full = load_dataset(train)?;
            if full.len() < max_n {
                return Err(Error::invalid(format!(
                    "{} holds {} samples, sweep needs {max_n}",
                    train.display(),
                    full.len()
                )));
            }
            let mut order: Vec<usize> = (0..full.len()).collect();
            rng.fork("train").shuffle(&mut order);
            order.truncate(max_n);
            let test_full = load_dataset(test)?;
            let take: Vec<usize> = (0..spec.test_size.min(test_full.len())).collect();
            Ok(TrialData {
                train: full.subset(&order),
                test: test_full.subset(&take),
            })
        }
    }
}

fn run_trial(spec: &SweepSpec, model: &ModelSpec, key: &CellKey, trial: usize, data: &TrialData) -> TrialResult {
    let seed = derive_seed(spec.seed, &[key.index as u64, trial as u64]);
    let mut cfg = model.train.clone();
    cfg.seed = seed;
    let mut n = spec.train_size;
    let mut set = |var: Variable, v: usize| match var {
        Variable::Samples => n = v,
        Variable::L => cfg.l = v,
        Variable::K => cfg.experts = v,
    };
    set(spec.variable, key.col);
    if let (Some(axis), Some(v)) = (&spec.rows, key.row) {
        set(axis.variable, v);
    }
    let outcome = (|| -> Result<f64> {
        if n == 0 || n > data.train.len() {
            return Err(Error::invalid(format!("training size {n} unavailable")));
        }
        let idx: Vec<usize> = (0..n).collect();
        let train_set = data.train.subset(&idx);
        let (_, report) = train(&train_set, Some(&data.test), &cfg)?;
        match spec.metric {
            Metric::TestAccuracy => report
                .last()
                .test_acc
                .ok_or_else(|| Error::MissingMetadata("test accuracy".into())),
            Metric::RateInTopl | Metric::RateTopGate => {
                let audit = report
                    .final_audit
                    .as_ref()
                    .ok_or_else(|| Error::invalid("routing metrics need a model with a router"))?;
                Ok(if spec.metric == Metric::RateInTopl {
                    audit.min_rate_in_topl()
                } else {
                    audit.min_rate_top_gate()
                })
            }
        }
    })();
    match outcome {
        Ok(v) => TrialResult {
            trial,
            seed,
            value: Some(v),
            success: v >= spec.success_threshold,
            error: None,
        },
        Err(e) => TrialResult {
            trial,
            seed,
            value: None,
            success: false,
            error: Some(e.to_string()),
        },
    }
}

fn cell_path(out_dir: &Path, spec: &SweepSpec, index: usize) -> PathBuf {
    out_dir.join("cells").join(format!("{}-{index:04}.json", spec.name))
}

fn load_cell(path: &Path, fingerprint: &str, key: &CellKey) -> Option<CellResult> {
    let bytes = fs::read(path).ok()?;
    let file: CellFile = serde_json::from_slice(&bytes).ok()?;
    (file.fingerprint == fingerprint && &file.result.key == key).then_some(file.result)
}

/// Runs (or resumes) a sweep and writes its artifacts under `out_dir`:
/// `cells/`, `<name>.csv`, `<name>.svg`, `<name>.summary.json` and an
/// updated `index.json`. At most `jobs` cells run concurrently.
pub fn run_sweep(spec: &SweepSpec, out_dir: &Path, jobs: usize) -> Result<SweepOutput> {
    spec.validate()?;
    let fingerprint = spec.fingerprint()?;
    let keys = spec.cells();
    let models = spec.model_list();
    let mut done: BTreeMap<usize, CellResult> = BTreeMap::new();
    let mut pending = Vec::new();
    for key in &keys {
        match load_cell(&cell_path(out_dir, spec, key.index), &fingerprint, key) {
            Some(r) => {
                done.insert(key.index, r);
            }
            None => pending.push(key.clone()),
        }
    }
    let computed = pending.len();
    if !pending.is_empty() {
        // trial data is shared across cells; build it once per trial
        let data: Vec<TrialData> = (0..spec.trials)
            .map(|t| trial_data(spec, t))
            .collect::<Result<_>>()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        let results: Vec<Result<CellResult>> = pool.install(|| {
            pending
                .par_iter()
                .map(|key| {
                    let model = &models[key.model];
                    let trials = (0..spec.trials)
                        .map(|t| run_trial(spec, model, key, t, &data[t]))
                        .collect();
                    let result = CellResult {
                        key: key.clone(),
                        trials,
                    };
                    let file = CellFile {
                        fingerprint: fingerprint.clone(),
                        result,
                    };
                    write_atomic(&cell_path(out_dir, spec, key.index), &serde_json::to_vec_pretty(&file)?)?;
                    Ok(file.result)
                })
                .collect()
        });
        for r in results {
            let r = r?;
            done.insert(r.key.index, r);
        }
    }
    let cells: Vec<CellResult> = done.into_values().collect();
    finish(spec, out_dir, cells, computed)
}

fn finish(spec: &SweepSpec, out_dir: &Path, cells: Vec<CellResult>, computed: usize) -> Result<SweepOutput> {
    let row_name = spec.rows.as_ref().map(|r| r.variable.name());
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["model"];
    header.extend(row_name);
    header.extend([spec.variable.name(), "trial", spec.metric.column(), "success"]);
    let csv_err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    csv.write_record(&header).map_err(csv_err)?;
    for c in &cells {
        for t in &c.trials {
            let mut rec = vec![c.key.label.clone()];
            rec.extend(c.key.row.map(|r| r.to_string()));
            rec.push(c.key.col.to_string());
            rec.push(t.trial.to_string());
            rec.push(t.value.map(|v| v.to_string()).unwrap_or_default());
            rec.push((t.success as u8).to_string());
            csv.write_record(&rec).map_err(csv_err)?;
        }
    }
    let csv_bytes = csv.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;

    let summary: Vec<CellSummary> = cells
        .iter()
        .map(|c| {
            let vals = c.values();
            CellSummary {
                model: c.key.label.clone(),
                row: c.key.row,
                col: c.key.col,
                mean: (!vals.is_empty()).then(|| mean(&vals)),
                std: (!vals.is_empty()).then(|| std_dev(&vals)),
                successes: c.successes(),
                trials: c.trials.len(),
            }
        })
        .collect();

    let needed = spec.frontier_successes.unwrap_or(spec.trials);
    let mut frontier = Vec::new();
    for m in spec.model_list() {
        for row in spec.row_values() {
            let first_col = spec.grid.iter().copied().find(|&col| {
                cells
                    .iter()
                    .find(|c| c.key.label == m.label && c.key.row == row && c.key.col == col)
                    .is_some_and(|c| match spec.kind {
                        SweepKind::PhaseTransition => c.successes() >= needed,
                        _ => !c.values().is_empty() && c.mean() >= spec.success_threshold,
                    })
            });
            frontier.push(FrontierEntry {
                model: m.label.clone(),
                row,
                first_col,
            });
        }
    }

    let plot = build_plot(spec, &cells);
    let csv_path = out_dir.join(format!("{}.csv", spec.name));
    let svg_path = out_dir.join(format!("{}.svg", spec.name));
    let summary_path = out_dir.join(format!("{}.summary.json", spec.name));
    write_atomic(&csv_path, &csv_bytes)?;
    emit_plot(&plot, &svg_path)?;
    let output = SweepOutput {
        name: spec.name.clone(),
        cells,
        summary,
        frontier,
        artifacts: vec![csv_path, svg_path, summary_path.clone()],
        computed,
    };
    write_atomic(&summary_path, &serde_json::to_vec_pretty(&output)?)?;
    if let Some(fig) = &spec.figure {
        update_index(out_dir, fig, &output.artifacts)?;
    }
    Ok(output)
}

fn build_plot(spec: &SweepSpec, cells: &[CellResult]) -> Plot {
    let title = spec.figure.clone().unwrap_or_else(|| spec.name.clone());
    match (spec.kind, &spec.rows) {
        (SweepKind::PhaseTransition, Some(axis)) => {
            // one heatmap per sweep; with several models only the first is drawn
            let label = cells.first().map(|c| c.key.label.clone()).unwrap_or_default();
            let values = axis
                .grid
                .iter()
                .map(|&r| {
                    spec.grid
                        .iter()
                        .map(|&col| {
                            cells
                                .iter()
                                .find(|c| c.key.label == label && c.key.row == Some(r) && c.key.col == col)
                                .map_or(0.0, |c| c.successes() as f64 / c.trials.len().max(1) as f64)
                        })
                        .collect()
                })
                .collect();
            Plot {
                title,
                x_label: spec.variable.name().into(),
                y_label: axis.variable.name().into(),
                body: PlotBody::Heatmap(Heatmap {
                    x_ticks: spec.grid.iter().map(|v| v.to_string()).collect(),
                    y_ticks: axis.grid.iter().map(|v| v.to_string()).collect(),
                    values,
                }),
            }
        }
        _ => {
            let mut series: Vec<Series> = Vec::new();
            for c in cells {
                let label = match c.key.row {
                    Some(r) => format!("{} {}={r}", c.key.label, spec.rows.as_ref().map_or("", |a| a.variable.name())),
                    None => c.key.label.clone(),
                };
                let vals = c.values();
                if vals.is_empty() {
                    continue;
                }
                let point = Point {
                    x: c.key.col as f64,
                    mean: mean(&vals),
                    std: std_dev(&vals),
                };
                match series.iter_mut().find(|s| s.label == label) {
                    Some(s) => s.points.push(point),
                    None => series.push(Series {
                        label,
                        points: vec![point],
                    }),
                }
            }
            if series.is_empty() {
                series.push(Series {
                    label: "no completed trials".into(),
                    points: vec![Point {
                        x: spec.grid[0] as f64,
                        mean: 0.0,
                        std: 0.0,
                    }],
                });
            }
            Plot {
                title,
                x_label: spec.variable.name().into(),
                y_label: spec.metric.column().into(),
                body: PlotBody::Line(series),
            }
        }
    }
}

/// Merges `figure -> artifacts` into `out_dir/index.json`.
pub fn update_index(out_dir: &Path, figure: &str, artifacts: &[PathBuf]) -> Result<()> {
    let path = out_dir.join("index.json");
    let mut index: BTreeMap<String, Vec<String>> = match fs::read(&path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(Error::io(&path, e)),
    };
    let names = artifacts
        .iter()
        .map(|p| {
            p.strip_prefix(out_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        })
        .collect();
    index.insert(figure.to_string(), names);
    write_atomic(&path, &serde_json::to_vec_pretty(&index)?)
}

//! Cartesian ablation grids. Each cell is one (configuration, seed) pair stored in its own
//! directory named after its config hash, so reruns skip finished cells and concurrent cells
//! never share a file.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::affine::{Aggregation, AffineModuleConfig, ViewCount};
use crate::data::{load_dataset, Dataset, DatasetId, LoadOptions, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalRecord};
use crate::geometry::{Component, ComponentMask};
use crate::rng::{derive_seed, purpose};
use crate::ssl::{BranchSource, Method, Model};
use crate::train::{fit, FitOptions};

pub const CELL_FILE: &str = "cell.json";
pub const PROBES_FILE: &str = "probes.ndjson";
pub const DONE_FILE: &str = "done.json";
const ERROR_FILE: &str = "error.json";

/// Subsets drawn from a dataset are keyed by this seed, not the run seed, so every cell of a
/// grid sees the same images.
const DATA_SEED: u64 = 0;

/// A component-mask axis entry: one component or a list of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ComponentsAxis {
    One(Component),
    Many(Vec<Component>),
}

impl ComponentsAxis {
    pub fn mask(&self) -> ComponentMask {
        match self {
            ComponentsAxis::One(c) => ComponentMask::only(*c),
            ComponentsAxis::Many(cs) => cs.iter().fold(ComponentMask::NONE, |m, c| m.with(*c, true)),
        }
    }
}

/// Axis values; an empty axis keeps the base configuration's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridAxes {
    pub method: Vec<Method>,
    /// `false` is the plain method, `true` adds the affine module.
    pub affine: Vec<bool>,
    pub aggregation: Vec<Aggregation>,
    pub views: Vec<ViewCount>,
    pub source: Vec<BranchSource>,
    pub components: Vec<ComponentsAxis>,
    pub bounded: Vec<bool>,
    pub seed: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub base: ExperimentConfig,
    pub axes: GridAxes,
}

impl GridSpec {
    /// Parses a grid file: a `[grid]` table of axes plus, optionally, a full base
    /// configuration. Without one, `fallback` is the base.
    pub fn from_toml(text: &str, fallback: Option<ExperimentConfig>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        let axes = match table.remove("grid") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::config(format!("[grid]: {e}")))?,
            None => GridAxes::default(),
        };
        let base = if table.is_empty() {
            fallback.ok_or_else(|| Error::config("grid file has no base configuration and no profile was given"))?
        } else {
            let cfg: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
            cfg.validate()?;
            cfg
        };
        Ok(GridSpec { base, axes })
    }
}

/// One unit of work.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    /// Single-seed configuration.
    pub config: ExperimentConfig,
    pub hash: String,
    pub method: Method,
    pub variant: String,
}

impl Cell {
    pub fn new(config: ExperimentConfig) -> Self {
        Cell { hash: config.config_hash(), method: config.ssl.method, variant: variant_label(&config), config }
    }

    pub fn seed(&self) -> u64 {
        self.config.seeds[0]
    }
}

/// Short description of the module settings that differ from the defaults.
pub fn variant_label(cfg: &ExperimentConfig) -> String {
    let Some(a) = &cfg.affine else { return "baseline".into() };
    let mut parts = vec!["+affine".to_string()];
    if a.aggregation == Aggregation::Concatenation {
        parts.push("concat".into());
    }
    if a.views == ViewCount::Both {
        parts.push("2x".into());
    }
    if a.source == BranchSource::Projector {
        parts.push("g".into());
    }
    if a.components != ComponentMask::ALL {
        parts.push(a.components.components().iter().map(|c| c.name()).collect::<Vec<_>>().join("+"));
    }
    if a.bounded {
        parts.push("bounded".into());
    }
    parts.join(" ")
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Cartesian product of the axes. Combinations that collapse to the same configuration
/// (e.g. affine-only axes crossed with the baseline) appear once.
pub fn expand_grid(spec: &GridSpec) -> Result<Vec<Cell>> {
    let b = &spec.base;
    let a = &spec.axes;
    let base_affine = b.affine.clone().unwrap_or_default();
    let mut cells: Vec<Cell> = Vec::new();
    for &method in &axis(&a.method, b.ssl.method) {
        for &with_affine in &axis(&a.affine, b.affine.is_some()) {
            for &aggregation in &axis(&a.aggregation, base_affine.aggregation) {
                for &views in &axis(&a.views, base_affine.views) {
                    for &source in &axis(&a.source, base_affine.source) {
                        let masks: Vec<ComponentMask> = if a.components.is_empty() { vec![base_affine.components] } else { a.components.iter().map(|c| c.mask()).collect() };
                        for &components in &masks {
                            for &bounded in &axis(&a.bounded, base_affine.bounded) {
                                for &seed in &axis(&a.seed, b.seeds[0]) {
                                    let mut cfg = b.clone();
                                    cfg.ssl.method = method;
                                    cfg.seeds = vec![seed];
                                    cfg.affine = with_affine.then(|| AffineModuleConfig { aggregation, views, source, components, bounded, ..base_affine.clone() });
                                    cfg.validate()?;
                                    let cell = Cell::new(cfg);
                                    if !cells.iter().any(|c| c.hash == cell.hash) {
                                        cells.push(cell);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Contents of a cell's `cell.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub hash: String,
    pub method: Method,
    pub variant: String,
    pub seed: u64,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DoneRecord {
    hash: String,
    epochs_completed: usize,
    checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ran,
    Skipped,
    Failed(CellFailure),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub hash: String,
    pub message: String,
    /// The training data could not be read (as opposed to a failure during the run).
    pub data_error: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridReport {
    pub ran: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<CellFailure>,
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub out_dir: PathBuf,
    pub data_root: Option<PathBuf>,
    /// Cells run concurrently.
    pub jobs: usize,
}

impl GridOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        GridOptions { out_dir: out_dir.into(), data_root: None, jobs: 1 }
    }
}

pub fn cell_dir(out: &Path, hash: &str) -> PathBuf {
    out.join("cells").join(&hash[..16.min(hash.len())])
}

type CacheKey = (DatasetId, Split, usize, Option<usize>);

#[derive(Default)]
struct DataCache {
    sets: Mutex<HashMap<CacheKey, Arc<Dataset>>>,
}

impl DataCache {
    fn get(&self, root: Option<&Path>, id: DatasetId, split: Split, resolution: usize, limit: Option<usize>) -> Result<Arc<Dataset>> {
        let key = (id, split, resolution, limit);
        if let Some(d) = self.sets.lock().expect("cache lock").get(&key) {
            return Ok(d.clone());
        }
        let d = Arc::new(load_dataset(id, root, split, &LoadOptions { resolution, limit, seed: DATA_SEED })?);
        self.sets.lock().expect("cache lock").insert(key, d.clone());
        Ok(d)
    }
}

/// Whether an error means "this dataset is not available" rather than a real failure.
fn is_missing_data(e: &Error) -> bool {
    matches!(e, Error::Ingestion { .. } | Error::Config(_))
}

fn append_record(path: &Path, record: &EvalRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

fn probe_epoch(cell: &Cell, root: Option<&Path>, cache: &DataCache, dir: &Path, epoch: usize, model: &Model) -> Result<()> {
    let cfg = &cell.config;
    let resolution = cfg.data.resolution();
    for id in cfg.data.eval_datasets() {
        let splits = cache
            .get(root, id, Split::Train, resolution, cfg.probe.train_limit)
            .and_then(|tr| Ok((tr, cache.get(root, id, Split::Eval, resolution, cfg.probe.eval_limit)?)));
        let record = match splits {
            Ok((train, test)) => {
                let seed = derive_seed(cell.seed(), &[purpose::PROBE]);
                EvalRecord::Probe(evaluate(model, &train, &test, &cfg.probe, seed, &format!("epoch_{epoch:04}"), epoch)?)
            }
            Err(e) if is_missing_data(&e) => {
                log::warn!("skipping probe on {id}: {e}");
                EvalRecord::Skipped { dataset: id, epoch, reason: e.to_string() }
            }
            Err(e) => return Err(e),
        };
        append_record(&dir.join(PROBES_FILE), &record)?;
    }
    Ok(())
}

fn execute(cell: &Cell, opts: &GridOptions, cache: &DataCache, dir: &Path) -> Result<()> {
    let cfg = &cell.config;
    let record = CellRecord { hash: cell.hash.clone(), method: cell.method, variant: cell.variant.clone(), seed: cell.seed(), config: cfg.clone() };
    std::fs::write(dir.join(CELL_FILE), serde_json::to_vec_pretty(&record)?)?;
    File::create(dir.join(PROBES_FILE))?;
    let root = opts.data_root.as_deref();
    let data = cache.get(root, cfg.data.dataset, Split::Train, cfg.data.resolution(), cfg.data.train_limit)?;
    let epochs = cfg.optimizer.epochs;
    let mut on_epoch = |completed: usize, model: &Model| -> Result<()> {
        if completed % cfg.eval_every == 0 || completed == epochs {
            probe_epoch(cell, root, cache, dir, completed, model)?;
        }
        Ok(())
    };
    let mut fit_opts = FitOptions::new(dir);
    fit_opts.config_hash = cell.hash.clone();
    fit_opts.checkpoint_every = cfg.eval_every;
    fit_opts.on_epoch = Some(&mut on_epoch);
    let out = fit(&cfg.run_spec(cell.seed()), &data, fit_opts)?;
    let done = DoneRecord { hash: cell.hash.clone(), epochs_completed: out.epochs_completed, checkpoint: out.checkpoint };
    std::fs::write(dir.join(DONE_FILE), serde_json::to_vec_pretty(&done)?)?;
    Ok(())
}

fn is_done(dir: &Path, hash: &str) -> bool {
    std::fs::read(dir.join(DONE_FILE)).ok().and_then(|b| serde_json::from_slice::<DoneRecord>(&b).ok()).is_some_and(|d| d.hash == hash)
}

fn run_one(cell: &Cell, opts: &GridOptions, cache: &DataCache) -> CellStatus {
    let dir = cell_dir(&opts.out_dir, &cell.hash);
    if is_done(&dir, &cell.hash) {
        return CellStatus::Skipped;
    }
    // An unfinished cell restarts from scratch.
    let prepared = (|| -> Result<()> {
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        Ok(())
    })();
    let result = prepared.and_then(|_| execute(cell, opts, cache, &dir));
    match result {
        Ok(()) => CellStatus::Ran,
        Err(e) => {
            log::error!("cell {} ({} {}) failed: {e}", &cell.hash[..16], cell.method, cell.variant);
            let diag = serde_json::json!({ "hash": cell.hash, "error": e.to_string() });
            let _ = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(dir.join(ERROR_FILE), diag.to_string()));
            CellStatus::Failed(CellFailure { hash: cell.hash.clone(), message: e.to_string(), data_error: is_missing_data(&e) })
        }
    }
}

/// Runs every cell not yet finished, up to `opts.jobs` at a time. A failing cell is recorded
/// and the others continue.
pub fn run_cells(cells: &[Cell], opts: &GridOptions) -> GridReport {
    let cache = DataCache::default();
    let next = AtomicUsize::new(0);
    let statuses: Mutex<Vec<Option<CellStatus>>> = Mutex::new(vec![None; cells.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(cell) = cells.get(i) else { break };
        let status = run_one(cell, opts, &cache);
        statuses.lock().expect("status lock")[i] = Some(status);
    };
    let jobs = opts.jobs.clamp(1, cells.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(worker);
            }
        });
    }
    let mut report = GridReport::default();
    for (cell, status) in cells.iter().zip(statuses.into_inner().expect("status lock")) {
        match status.expect("every cell ran") {
            CellStatus::Ran => report.ran.push(cell.hash.clone()),
            CellStatus::Skipped => report.skipped.push(cell.hash.clone()),
            CellStatus::Failed(f) => report.failed.push(f),
        }
    }
    report
}

pub fn run_grid(spec: &GridSpec, opts: &GridOptions) -> Result<GridReport> {
    let cells = expand_grid(spec)?;
    log::info!("grid: {} cells", cells.len());
    Ok(run_cells(&cells, opts))
}

/// A cell as read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredCell {
    pub record: CellRecord,
    pub probes: Vec<EvalRecord>,
    pub done: bool,
}

/// Every cell under `out/cells`, ordered by (method, variant, seed, hash) regardless of the
/// order cells were run in.
pub fn read_store(out: &Path) -> Result<Vec<StoredCell>> {
    let mut cells = Vec::new();
    let Ok(entries) = std::fs::read_dir(out.join("cells")) else { return Ok(cells) };
    for entry in entries {
        let dir = entry?.path();
        let Ok(bytes) = std::fs::read(dir.join(CELL_FILE)) else { continue };
        let record: CellRecord = serde_json::from_slice(&bytes)?;
        let mut probes = Vec::new();
        if let Ok(f) = File::open(dir.join(PROBES_FILE)) {
            for line in BufReader::new(f).lines() {
                let line = line?;
                if !line.trim().is_empty() {
                    probes.push(serde_json::from_str(&line)?);
                }
            }
        }
        let done = is_done(&dir, &record.hash);
        cells.push(StoredCell { record, probes, done });
    }
    cells.sort_by(|a, b| {
        let key = |c: &StoredCell| (Method::ALL.iter().position(|m| *m == c.record.method), c.record.variant.clone(), c.record.seed, c.record.hash.clone());
        key(a).cmp(&key(b))
    });
    Ok(cells)
}

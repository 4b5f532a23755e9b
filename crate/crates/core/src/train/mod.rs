//! The optimisation loop: view generation, loss assembly, SGD with momentum under a cosine
//! schedule, EMA updates, checkpointing and per-step metrics.

pub mod checkpoint;

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::affine::{self, AffineModuleConfig};
use crate::autograd::{Tape, Tensor};
use crate::batch::ImageBatch;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::rng::{purpose, stream};
use crate::ssl::{forward_bundle, ssl_loss, Model, SslConfig, Views};
use crate::views::{make_views, AugmentationConfig};
use checkpoint::{CheckpointHeader, Snapshot};

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    /// Linear warm-up length in epochs before the cosine decay.
    #[serde(default)]
    pub warmup_epochs: usize,
    /// Global gradient-norm clipping threshold.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

fn d_lr() -> f64 {
    0.03
}
fn d_wd() -> f64 {
    4e-4
}
fn d_batch() -> usize {
    256
}
fn d_epochs() -> usize {
    100
}
fn d_momentum() -> f64 {
    0.9
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { lr: d_lr(), weight_decay: d_wd(), batch_size: d_batch(), epochs: d_epochs(), momentum: d_momentum(), warmup_epochs: 0, grad_clip: None }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("weight decay must be >= 0 and momentum in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("gradient clip threshold must be positive"));
        }
        Ok(())
    }
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    assert!(total_steps > 0 && step <= total_steps, "step {step} outside [0, {total_steps}]");
    base_lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0
}

/// Learning rate at `step` with an optional linear warm-up of `warmup` steps.
pub fn scheduled_lr(step: usize, total_steps: usize, warmup: usize, base_lr: f64) -> f64 {
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total_steps - warmup, base_lr)
}

/// SGD with heavy-ball momentum and decoupled-from-bias weight decay:
/// `v <- mu * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamStore) -> Self {
        Sgd { velocity: params.entries().iter().map(|e| Tensor::zeros(e.value.raw_dim())).collect() }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64, cfg: &OptimizerConfig) {
        for ((entry, v), g) in params.entries_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let wd = if entry.decay { cfg.weight_decay } else { 0.0 };
            match g {
                Some(g) => ndarray::Zip::from(&mut *v).and(g).and(&entry.value).for_each(|v, &g, &p| *v = cfg.momentum * *v + (g + wd * p)),
                None => ndarray::Zip::from(&mut *v).and(&entry.value).for_each(|v, &p| *v = cfg.momentum * *v + wd * p),
            }
            entry.value.zip_mut_with(v, |p, &v| *p -= lr * v);
        }
    }
}

/// Everything that determines a training trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub ssl: SslConfig,
    /// `None` trains the plain method.
    pub affine: Option<AffineModuleConfig>,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    pub seed: u64,
}

impl RunSpec {
    pub fn validate(&self) -> Result<()> {
        self.ssl.validate()?;
        if let Some(a) = &self.affine {
            a.validate(self.ssl.method)?;
        }
        self.optimizer.validate()?;
        self.augmentation.validate()
    }

    pub fn build_model(&self) -> Result<Model> {
        let regressor = self.affine.as_ref().map(|a| a.regressor_spec(self.ssl.encoder.output_dim(), self.ssl.projector.output));
        Model::new(&self.ssl, regressor, self.seed)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub trial: usize,
    pub seed: u64,
    pub epoch: usize,
    /// Step within the epoch.
    pub step: usize,
    pub global_step: usize,
    pub l_ssl: f64,
    pub l_affine: Option<f64>,
    pub total: f64,
    pub lr: f64,
    /// Wall-clock time of the step; the only field that varies between replays.
    pub wall_ms: f64,
}

impl MetricsRecord {
    /// The record with its timing zeroed, for replay comparisons.
    pub fn without_timing(&self) -> MetricsRecord {
        MetricsRecord { wall_ms: 0.0, ..self.clone() }
    }
}

/// Model plus optimiser state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt: Sgd,
}

impl TrainState {
    pub fn new(spec: &RunSpec) -> Result<Self> {
        spec.validate()?;
        let model = spec.build_model()?;
        let opt = Sgd::new(&model.state.params);
        Ok(TrainState { model, opt })
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { online: self.model.state.clone(), target: self.model.target.as_ref().map(|t| t.state.clone()), momentum: self.opt.velocity.clone() }
    }

    pub fn restore(&mut self, snap: Snapshot) {
        self.model.state = snap.online;
        if let (Some(t), Some(s)) = (self.model.target.as_mut(), snap.target) {
            t.state = s;
        }
        self.opt.velocity = snap.momentum;
    }
}

/// Position of a step in the run, used to key its random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepIndex {
    pub epoch: usize,
    pub step: usize,
    pub global_step: usize,
}

fn non_finite(at: StepIndex, detail: String) -> Error {
    Error::NonFinite { epoch: at.epoch, step: at.step, detail }
}

/// One gradient update on `batch`.
pub fn train_step(state: &mut TrainState, spec: &RunSpec, batch: &ImageBatch, at: StepIndex, lr: f64, trial: usize) -> Result<MetricsRecord> {
    let started = Instant::now();
    let (x1, x2) = make_views(batch, &spec.augmentation, spec.seed, at.epoch as u64)?;
    let affine_views = match &spec.affine {
        Some(cfg) => {
            let mut out = Vec::new();
            for (v, x) in [&x1, &x2].into_iter().enumerate().take(cfg.views.count()) {
                let mut rng = stream(spec.seed, &[purpose::AFFINE, at.global_step as u64, v as u64]);
                out.push(affine::make_affine_view(x, cfg, &mut rng)?);
            }
            out
        }
        None => Vec::new(),
    };

    let model = &mut state.model;
    let tape = Tape::new();
    let params = model.state.params.bind(&tape);
    let tparams = model.target.as_ref().map(|t| t.state.params.bind_frozen(&tape));
    let (l_ssl, l_aff, total) = {
        let mut ctx = Ctx { tape: &tape, params: &params, buffers: &mut model.state.buffers, train: true };
        let mut tctx = match (model.target.as_mut(), tparams.as_ref()) {
            (Some(t), Some(p)) => Some(Ctx { tape: &tape, params: p, buffers: &mut t.state.buffers, train: true }),
            _ => None,
        };
        let constant = |b: &ImageBatch| tape.constant(b.data.clone().into_dyn());
        let views = Views {
            x1: constant(&x1),
            x2: constant(&x2),
            x1a: affine_views.first().map(|v| constant(&v.images)),
            x2a: affine_views.get(1).map(|v| constant(&v.images)),
        };
        let source = spec.affine.as_ref().map(|a| a.source).unwrap_or_default();
        let bundle = forward_bundle(model.config.method, &model.nets, &mut ctx, tctx.as_mut(), &views, source)?;
        let l_ssl = ssl_loss(&model.config, &bundle)?;
        match &spec.affine {
            Some(cfg) => {
                let regressor = model.nets.regressor.as_ref().ok_or_else(|| Error::contract("affine run without a regressor"))?;
                let terms = affine_views
                    .iter()
                    .enumerate()
                    .map(|(v, av)| affine::branch_loss(&mut ctx, regressor, &bundle, v + 1, &av.targets, cfg))
                    .collect::<Result<Vec<_>>>()?;
                let total = affine::combined_loss(l_ssl, &terms, cfg.beta1, cfg.beta2(model.config.method));
                let mean = terms.iter().map(|t| t.item()).sum::<f64>() / terms.len() as f64;
                (l_ssl, Some(mean), total)
            }
            None => (l_ssl, None, l_ssl),
        }
    };
    let (ls, lt) = (l_ssl.item(), total.item());
    if !ls.is_finite() || !lt.is_finite() || l_aff.is_some_and(|a| !a.is_finite()) {
        return Err(non_finite(at, format!("l_ssl={ls} l_affine={l_aff:?} total={lt}")));
    }
    let mut grads = tape.backward(total);
    let mut grads: Vec<Option<Tensor>> = params.iter().map(|p| grads.take(*p)).collect();
    if let Some(limit) = spec.optimizer.grad_clip {
        let norm = grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > limit {
            let scale = limit / norm;
            grads.iter_mut().flatten().for_each(|g| g.mapv_inplace(|v| v * scale));
        }
    }
    state.opt.step(&mut model.state.params, &grads, lr, &spec.optimizer);
    if let Some(t) = model.target.as_mut() {
        t.update(&model.state.params)?;
    }
    Ok(MetricsRecord {
        schema: METRICS_SCHEMA,
        trial,
        seed: spec.seed,
        epoch: at.epoch,
        step: at.step,
        global_step: at.global_step,
        l_ssl: ls,
        l_affine: l_aff,
        total: lt,
        lr,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Steps per epoch: full batches only, or a single partial batch when the dataset is
/// smaller than one batch.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    if n == 0 {
        0
    } else {
        (n / batch_size).max(1)
    }
}

/// Item order of `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream(seed, &[purpose::SHUFFLE, epoch as u64]));
    idx
}

pub struct FitOptions<'a> {
    pub out_dir: PathBuf,
    pub trial: usize,
    pub config_hash: String,
    /// Save a checkpoint every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Continue from the newest checkpoint in `out_dir` if there is one.
    pub resume: bool,
    /// Stop after this many completed epochs (simulates an interruption).
    pub stop_after: Option<usize>,
    /// Called after every completed epoch with the epoch count and the current model.
    pub on_epoch: Option<&'a mut dyn FnMut(usize, &Model) -> Result<()>>,
}

impl FitOptions<'_> {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        FitOptions { out_dir: out_dir.into(), trial: 0, config_hash: String::new(), checkpoint_every: 1, resume: false, stop_after: None, on_epoch: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutput {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub epochs_completed: usize,
}

pub const METRICS_FILE: &str = "metrics.ndjson";

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch:04}.ckpt"))
}

/// Newest checkpoint in a run directory.
pub fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    let entries = std::fs::read_dir(dir.join("checkpoints")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let epoch = name.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((epoch, e.path()))
        })
        .max_by_key(|(e, _)| *e)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path)?;
    BufReader::new(file)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect()
}

fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut tmp = tempfile::NamedTempFile::new_in(path.parent().unwrap_or(Path::new(".")))?;
    for r in records {
        writeln!(tmp, "{}", serde_json::to_string(r)?)?;
    }
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Trains for `spec.optimizer.epochs` epochs on `data`.
pub fn fit(spec: &RunSpec, data: &Dataset, mut opts: FitOptions<'_>) -> Result<FitOutput> {
    let mut state = TrainState::new(spec)?;
    if data.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    std::fs::create_dir_all(&opts.out_dir)?;
    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let cfg = &spec.optimizer;
    let steps = steps_per_epoch(data.len(), cfg.batch_size);
    let total_steps = steps * cfg.epochs;
    let warmup = steps * cfg.warmup_epochs;
    if warmup >= total_steps && warmup > 0 {
        return Err(Error::config("warm-up must be shorter than training"));
    }

    let mut start_epoch = 0;
    let mut last_ckpt = None;
    if opts.resume {
        if let Some((epoch, path)) = latest_checkpoint(&opts.out_dir) {
            let (header, snap) = checkpoint::load(&path, &state.snapshot())?;
            if !opts.config_hash.is_empty() && header.config_hash != opts.config_hash {
                return Err(Error::Checkpoint(format!("{} was written by a different configuration", path.display())));
            }
            state.restore(snap);
            start_epoch = epoch;
            last_ckpt = Some(path);
            // Drop records of steps the checkpoint does not include.
            let kept: Vec<MetricsRecord> = match read_metrics(&metrics_path) {
                Ok(r) => r.into_iter().filter(|r| r.epoch < epoch).collect(),
                Err(_) => Vec::new(),
            };
            write_metrics(&metrics_path, &kept)?;
            log::info!("resuming {} from epoch {epoch}", opts.out_dir.display());
        }
    }
    if start_epoch == 0 {
        File::create(&metrics_path)?;
    }
    let mut sink = OpenOptions::new().append(true).open(&metrics_path)?;

    let mut completed = start_epoch;
    for epoch in start_epoch..cfg.epochs {
        if opts.stop_after.is_some_and(|s| completed >= s) {
            break;
        }
        let order = epoch_order(data.len(), spec.seed, epoch);
        for step in 0..steps {
            let take = cfg.batch_size.min(data.len());
            let idx = &order[step * take..(step + 1) * take];
            let batch = data.batch(idx);
            let global_step = epoch * steps + step;
            let lr = scheduled_lr(global_step, total_steps, warmup, cfg.lr);
            let at = StepIndex { epoch, step, global_step };
            let record = match train_step(&mut state, spec, &batch, at, lr, opts.trial) {
                Ok(r) => r,
                Err(e) => {
                    let diag = serde_json::json!({ "error": e.to_string(), "epoch": epoch, "step": step, "global_step": global_step });
                    std::fs::write(opts.out_dir.join("failure.json"), serde_json::to_vec_pretty(&diag)?)?;
                    return Err(e);
                }
            };
            writeln!(sink, "{}", serde_json::to_string(&record)?)?;
        }
        sink.flush()?;
        completed = epoch + 1;
        if completed % opts.checkpoint_every.max(1) == 0 || completed == cfg.epochs {
            let header = CheckpointHeader {
                config_hash: opts.config_hash.clone(),
                method: spec.ssl.method.to_string(),
                epoch: completed,
                global_step: completed * steps,
                ema_tau: state.model.target.as_ref().map(|t| t.tau),
                tensors: vec![],
            };
            let path = checkpoint_path(&opts.out_dir, completed);
            checkpoint::save(&path, &header, &state.snapshot())?;
            last_ckpt = Some(path);
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(completed, &state.model)?;
        }
    }
    let checkpoint = match last_ckpt {
        Some(p) => p,
        None => {
            let header = CheckpointHeader {
                config_hash: opts.config_hash.clone(),
                method: spec.ssl.method.to_string(),
                epoch: completed,
                global_step: completed * steps,
                ema_tau: state.model.target.as_ref().map(|t| t.tau),
                tensors: vec![],
            };
            let path = checkpoint_path(&opts.out_dir, completed);
            checkpoint::save(&path, &header, &state.snapshot())?;
            path
        }
    };
    Ok(FitOutput { checkpoint, metrics: metrics_path, epochs_completed: completed })
}

/// Restores a model from a checkpoint written for `spec`.
pub fn load_model(spec: &RunSpec, path: &Path) -> Result<(CheckpointHeader, Model)> {
    let mut state = TrainState::new(spec)?;
    let (header, snap) = checkpoint::load(path, &state.snapshot())?;
    state.restore(snap);
    Ok((header, state.model))
}

/// Mean of `values` over a trailing window.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window.max(1));
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Per-parameter view of a store, for comparisons.
pub fn param_values(store: &ParamStore) -> Vec<Array2<f64>> {
    store
        .entries()
        .iter()
        .map(|e| {
            let n = e.value.len();
            e.value.as_standard_layout().into_owned().into_shape_with_order((1, n)).unwrap()
        })
        .collect()
}

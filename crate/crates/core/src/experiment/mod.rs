//! Declarative experiment configuration, the ablation grid runner, and result rendering.

mod grid;
mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affine::AffineModuleConfig;
use crate::data::DatasetId;
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::geometry::ParamRanges;
use crate::nn::HeadSpec;
use crate::ssl::{EncoderSpec, SslConfig};
use crate::train::{OptimizerConfig, RunSpec};
use crate::views::AugmentationConfig;

pub use grid::{
    cell_dir, expand_grid, read_store, run_cells, run_grid, variant_label, Cell, CellFailure, CellRecord, CellStatus, ComponentsAxis, GridAxes, GridOptions,
    GridReport, GridSpec, StoredCell, CELL_FILE, DONE_FILE, PROBES_FILE,
};
pub use report::{
    export_curves, format_cell, import_curves, percent_of_max, render_curves, render_tables, CurvePoint, PercentTable, Report, ResultsTable,
    TableCell, TableRow,
};

/// What to pretrain on and what to probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetId,
    /// Side length every image is resized to; the pretraining dataset's native size if unset.
    #[serde(default)]
    pub resolution: Option<usize>,
    /// Pretraining subset size.
    #[serde(default)]
    pub train_limit: Option<usize>,
    /// Datasets for linear evaluation; the pretraining dataset if empty.
    #[serde(default)]
    pub eval: Vec<DatasetId>,
}

impl DataConfig {
    pub fn resolution(&self) -> usize {
        self.resolution.unwrap_or_else(|| self.dataset.native_resolution())
    }

    pub fn eval_datasets(&self) -> Vec<DatasetId> {
        if self.eval.is_empty() {
            vec![self.dataset]
        } else {
            self.eval.clone()
        }
    }
}

/// One experiment: a method, optionally with the affine module, trained under each seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub ssl: SslConfig,
    /// Absent for the plain method.
    #[serde(default)]
    pub affine: Option<AffineModuleConfig>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Probe every this many epochs; the final epoch is always probed.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_eval_every() -> usize {
    10
}

pub const PROFILES: [&str; 2] = ["smoke", "paper"];

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    /// Built-in profiles: `smoke` (desk scale) and `paper` (the published pretraining setup).
    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "smoke" => Ok(Self::smoke()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown profile `{other}` (expected one of {PROFILES:?})"))),
        }
    }

    /// 2,000 CIFAR10 images, a four-block conv-net, 5 epochs at batch 64, 2 seeds.
    pub fn smoke() -> Self {
        ExperimentConfig {
            name: "smoke".into(),
            ssl: SslConfig::new(crate::ssl::Method::SimClr, EncoderSpec::conv_net(&[32, 64, 128, 256])),
            affine: Some(AffineModuleConfig::default()),
            optimizer: OptimizerConfig { batch_size: 64, epochs: 5, ..OptimizerConfig::default() },
            augmentation: AugmentationConfig::default(),
            data: DataConfig { dataset: DatasetId::Cifar10, resolution: Some(32), train_limit: Some(2000), eval: vec![DatasetId::Cifar10] },
            probe: ProbeConfig { train_limit: Some(2000), eval_limit: Some(1000), ..ProbeConfig::default() },
            seeds: vec![0, 1],
            eval_every: default_eval_every(),
            out_dir: None,
        }
    }

    /// ResNet50 on Tiny ImageNet for 100 epochs at lr 0.03, weight decay 4e-4, batch 256,
    /// 512/128 heads and a 512/6 affine head, probed on CIFAR10, CIFAR100 and Caltech101
    /// over 5 trials.
    pub fn paper() -> Self {
        ExperimentConfig {
            name: "paper".into(),
            ssl: SslConfig::new(crate::ssl::Method::SimClr, EncoderSpec::resnet50()),
            affine: Some(AffineModuleConfig { ranges: ParamRanges::PAPER, regressor_hidden: 512, ..AffineModuleConfig::default() }),
            optimizer: OptimizerConfig { lr: 0.03, weight_decay: 4e-4, batch_size: 256, epochs: 100, ..OptimizerConfig::default() },
            augmentation: AugmentationConfig::default(),
            data: DataConfig {
                dataset: DatasetId::TinyImagenet,
                resolution: None,
                train_limit: None,
                eval: vec![DatasetId::Cifar10, DatasetId::Cifar100, DatasetId::Caltech101],
            },
            probe: ProbeConfig { trials: 5, ..ProbeConfig::default() },
            seeds: vec![0],
            eval_every: 10,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be at least 1"));
        }
        let resolution = self.data.resolution();
        if resolution < self.ssl.encoder.min_resolution() {
            return Err(Error::config(format!("resolution {resolution} is below the encoder minimum {}", self.ssl.encoder.min_resolution())));
        }
        self.probe.validate()?;
        for seed in &self.seeds {
            self.run_spec(*seed).validate()?;
        }
        Ok(())
    }

    pub fn run_spec(&self, seed: u64) -> RunSpec {
        RunSpec {
            ssl: self.ssl.clone(),
            affine: self.affine.clone(),
            optimizer: self.optimizer.clone(),
            augmentation: self.augmentation.clone(),
            seed,
        }
    }

    /// Semantic content as JSON with defaults resolved; names and paths are left out.
    pub fn canonical(&self) -> serde_json::Value {
        let mut cfg = self.clone();
        cfg.name.clear();
        cfg.out_dir = None;
        if let Some(a) = cfg.affine.as_mut() {
            a.beta2 = Some(a.beta2(cfg.ssl.method));
        }
        if cfg.data.resolution.is_none() {
            cfg.data.resolution = Some(cfg.data.resolution());
        }
        if cfg.data.eval.is_empty() {
            cfg.data.eval = cfg.data.eval_datasets();
        }
        if cfg.ssl.method != crate::ssl::Method::Byol {
            cfg.ssl.predictor = HeadSpec { hidden: 0, output: 0, batch_norm: false };
            cfg.ssl.ema_tau = 0.0;
        }
        let mut value = serde_json::to_value(&cfg).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("name");
            obj.remove("out_dir");
        }
        value
    }

    /// Hex SHA-256 of the canonical JSON. Object keys are emitted sorted, so the hash does
    /// not depend on the order of keys in the source file.
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&sort_keys(self.canonical())).expect("json");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn sort_keys(v: serde_json::Value) -> serde_json::Value {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: std::collections::BTreeMap<String, serde_json::Value> = map.into_iter().map(|(k, v)| (k, sort_keys(v))).collect();
            serde_json::Value::Object(sorted.into_iter().collect())
        }
        serde_json::Value::Array(items) => serde_json::Value::Array(items.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::Aggregation;
    use crate::ssl::Method;

    const SAMPLE: &str = r#"
name = "demo"
seeds = [3]

[ssl]
method = "byol"
encoder = { arch = "conv_net", widths = [8, 16] }

[affine]
aggregation = "concat"
components = ["rotation", "scale"]

[optimizer]
lr = 0.05
epochs = 2
batch_size = 16

[data]
dataset = "synthetic"
train_limit = 64
"#;

    #[test]
    fn parses_and_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.ssl.method, Method::Byol);
        let a = cfg.affine.as_ref().unwrap();
        assert_eq!(a.aggregation, Aggregation::Concatenation);
        assert_eq!(a.components.active_count(), 2);
        assert_eq!(cfg.optimizer.weight_decay, 4e-4);
        assert_eq!(cfg.eval_every, 10);
        assert_eq!(cfg.data.eval_datasets(), vec![DatasetId::Synthetic]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let texts = [
            format!("bogus = 1\n{SAMPLE}"),
            SAMPLE.replace("lr = 0.05", "learning_rate = 0.05"),
            SAMPLE.replace("aggregation = \"concat\"", "aggregation = \"concat\"\nwidth = 3"),
        ];
        for text in texts {
            assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
        }
    }

    #[test]
    fn hash_ignores_formatting_and_paths() {
        let a = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let reordered = r#"
seeds = [3]
[data]
train_limit = 64
dataset = "synthetic"
[optimizer]
batch_size = 16
epochs = 2
lr = 5e-2
[affine]
components = ["scale", "rotation"]
aggregation = "concatenation"
[ssl]
encoder = { widths = [8, 16], arch = "conv_net" }
method = "byol"
"#;
        let mut b = ExperimentConfig::from_toml(reordered).unwrap();
        b.out_dir = Some("elsewhere".into());
        assert_eq!(a.config_hash(), b.config_hash());
        // An explicit value equal to the default is the same experiment.
        b.affine.as_mut().unwrap().beta2 = Some(1.0);
        assert_eq!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn hash_tracks_meaningful_fields() {
        let base = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let h = base.config_hash();
        let mut variants = Vec::new();
        let mut c = base.clone();
        c.optimizer.lr = 0.051;
        variants.push(c);
        let mut c = base.clone();
        c.seeds = vec![4];
        variants.push(c);
        let mut c = base.clone();
        c.affine.as_mut().unwrap().bounded = true;
        variants.push(c);
        let mut c = base.clone();
        c.affine = None;
        variants.push(c);
        let mut c = base.clone();
        c.ssl.method = Method::SimClr;
        variants.push(c);
        let mut c = base.clone();
        c.augmentation.flip = false;
        variants.push(c);
        let mut c = base.clone();
        c.probe.reg = 0.5;
        variants.push(c);
        for v in variants {
            assert_ne!(v.config_hash(), h);
        }
    }

    #[test]
    fn profiles_round_trip_through_toml() {
        for name in PROFILES {
            let cfg = ExperimentConfig::profile(name).unwrap();
            cfg.validate().unwrap();
            let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.config_hash(), cfg.config_hash());
        }
        assert!(matches!(ExperimentConfig::profile("huge"), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_values_fail_before_compute() {
        let bad = SAMPLE.replace("lr = 0.05", "lr = -1.0");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SAMPLE.replace("seeds = [3]", "seeds = []");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
        let bad = SAMPLE.replace("method = \"byol\"", "method = \"moco\"");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config(_))));
    }
}

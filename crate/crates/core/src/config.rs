//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{SbmParams, SplitSpec};
use crate::error::{Error, Result};
use crate::gnn::{DgmDefaults, LayerSpec, NetworkSpec, Preset};
use crate::product::ManifoldSignature;
use crate::training::{ModelSetup, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// JSON manifest `{name, nodes_file, edges_file, masks_file?, num_classes}`.
    Manifest { path: PathBuf },
    Tsv {
        nodes_file: PathBuf,
        edges_file: PathBuf,
        #[serde(default)]
        masks_file: Option<PathBuf>,
        #[serde(default)]
        name: Option<String>,
    },
    Pointcloud { file: PathBuf, label_column: String },
    Sbm {
        params: SbmParams,
        #[serde(default)]
        seed: u64,
    },
}

fn default_signature() -> String {
    "EHS".into()
}
fn default_dim() -> usize {
    4
}
fn default_k() -> usize {
    7
}
fn default_one() -> f64 {
    1.0
}
fn default_usize_one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Named architecture, `gcn_ddgm` when neither this nor `layers` is set.
    #[serde(default)]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
    #[serde(default = "default_signature")]
    pub signature: String,
    /// Dimension for components written without one, e.g. `EHS`.
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_one")]
    pub temperature_init: f64,
    #[serde(default = "default_one")]
    pub graph_loss_weight: f64,
    /// Threads used by each top-k reduction.
    #[serde(default = "default_usize_one")]
    pub workers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: None,
            layers: None,
            signature: default_signature(),
            dim: default_dim(),
            k: default_k(),
            deterministic: false,
            temperature_init: 1.0,
            graph_loss_weight: 1.0,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "OptimizerConfig::default_lr")]
    pub lr: f64,
    #[serde(default = "OptimizerConfig::default_wd")]
    pub weight_decay: f64,
    #[serde(default = "OptimizerConfig::default_epochs")]
    pub epochs: usize,
}

impl OptimizerConfig {
    fn default_lr() -> f64 {
        1e-2
    }
    fn default_wd() -> f64 {
        1e-4
    }
    fn default_epochs() -> usize {
        1500
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: Self::default_lr(),
            weight_decay: Self::default_wd(),
            epochs: Self::default_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "OutputConfig::default_dir")]
    pub dir: PathBuf,
    #[serde(default = "OutputConfig::default_every")]
    pub snapshot_every: usize,
}

impl OutputConfig {
    fn default_dir() -> PathBuf {
        PathBuf::from("runs")
    }
    fn default_every() -> usize {
        100
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: Self::default_dir(),
            snapshot_every: Self::default_every(),
        }
    }
}

fn default_seeds() -> usize {
    10
}

fn default_split() -> SplitSpec {
    SplitSpec::Fractions {
        train: 0.6,
        val: 0.2,
        test: 0.2,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    /// Used when the dataset carries no masks; the split seed is the run seed.
    #[serde(default = "default_split")]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Number of seeds; seeds are `0..seeds`.
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default)]
    pub outputs: OutputConfig,
    /// Directory relative dataset paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn check(&self) -> Result<()> {
        let m = &self.model;
        if m.k == 0 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if m.preset.is_some() && m.layers.is_some() {
            return Err(Error::Config("model takes `preset` or `layers`, not both".into()));
        }
        if self.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) || self.optimizer.weight_decay < 0.0 {
            return Err(Error::Config("optimizer needs lr > 0 and weight_decay >= 0".into()));
        }
        self.signature()?;
        Ok(())
    }

    pub fn signature(&self) -> Result<ManifoldSignature> {
        ManifoldSignature::parse(&self.model.signature, self.model.dim)
            .map_err(|e| Error::Config(format!("model.signature: {e}")))
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).collect()
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.optimizer.lr,
            weight_decay: self.optimizer.weight_decay,
            epochs: self.optimizer.epochs,
            graph_loss_weight: self.model.graph_loss_weight,
            snapshot_every: self.outputs.snapshot_every,
        }
    }

    pub fn model_setup(&self, num_classes: usize) -> Result<ModelSetup> {
        let signature = self.signature()?;
        let layers = match (&self.model.layers, self.model.preset) {
            (Some(layers), _) => layers.clone(),
            (None, p) => p.unwrap_or(Preset::GcnDdgm).layers(
                num_classes,
                signature.len(),
                signature.tangent_dim(),
            ),
        };
        Ok(ModelSetup {
            spec: NetworkSpec { layers },
            defaults: DgmDefaults {
                k: self.model.k,
                signature,
                deterministic: self.model.deterministic,
                temperature_init: self.model.temperature_init,
                workers: self.model.workers.max(1),
            },
        })
    }
}

//! Run configuration (TOML).
//!
//! ```toml
//! network = "toy_resnet"            # built-in name, a path, or an inline table
//! accelerators = "diana"            # diana | ops | ops-shutdown | path
//! objective = "latency"
//! lambdas = [0.0, 1e-6, 1e-5, 1e-4, 1e-3]
//! seeds = [0]
//! out = "runs/demo"
//!
//! [dataset.synthetic]
//! classes = 10
//! samples = 5000
//!
//! [pretrain]
//! epochs = 15
//! optimizer = { kind = "sgd", lr = 0.05, momentum = 0.9, weight_decay = 1e-4 }
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cost::{diana, ops_proportional, AcceleratorSet, Objective};
use crate::data::{gen_synthetic, load_dataset, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::finetune::{storage_bits, FinetuneConfig};
use crate::graph::{Graph, NetworkSpec};
use crate::reorder::ReorderOptions;
use crate::search::SearchConfig;
use crate::tensor::OptimizerConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NetworkRef {
    /// Built-in toy network name or path to a network TOML.
    Named(String),
    Inline(NetworkSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Directory written by `gen-data`.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { path: None, synthetic: Some(SyntheticSpec::new(10, 5000, 0)) }
    }
}

fn default_pretrain() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 32,
        optimizer: OptimizerConfig::Sgd { lr: 0.05, momentum: 0.9, weight_decay: 1e-4 },
        patience: 20,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub network: NetworkRef,
    pub accelerators: String,
    pub objective: Objective,
    pub lambdas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub pretrain: TrainConfig,
    pub search: SearchConfig,
    pub finetune: FinetuneConfig,
    pub reorder: ReorderOptions,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkRef::Named("toy_resnet".into()),
            accelerators: "diana".into(),
            objective: Objective::Latency,
            lambdas: vec![0.0, 1e-6, 1e-5, 1e-4, 1e-3],
            seeds: vec![0],
            out: PathBuf::from("runs"),
            dataset: DatasetConfig::default(),
            pretrain: default_pretrain(),
            search: SearchConfig { epochs: 10, ..SearchConfig::default() },
            finetune: FinetuneConfig::default(),
            reorder: ReorderOptions::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<RunConfig> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.graph()?;
        let accs = self.accelerator_set()?;
        storage_bits(&accs)?;
        if self.lambdas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("`lambdas` and `seeds` must be non-empty".into()));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Config(format!("lambda must be finite and non-negative, got {l}")));
        }
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::Config("dataset needs exactly one of `path` or `synthetic`".into()))
            }
            _ => {}
        }
        for (name, b) in [
            ("pretrain", self.pretrain.batch_size),
            ("search", self.search.batch_size),
            ("finetune", self.finetune.batch_size),
        ] {
            if b == 0 {
                return Err(Error::Config(format!("{name}.batch_size must be positive")));
            }
        }
        Ok(())
    }

    pub fn graph(&self) -> Result<Graph> {
        match &self.network {
            NetworkRef::Inline(spec) => Graph::from_spec(spec),
            NetworkRef::Named(n) => {
                let p = self.resolve(Path::new(n));
                if n.ends_with(".toml") || p.is_file() {
                    Graph::load(&p)
                } else {
                    Graph::named(n)
                }
            }
        }
    }

    pub fn accelerator_set(&self) -> Result<AcceleratorSet> {
        match self.accelerators.as_str() {
            "diana" => Ok(diana()),
            "ops" => Ok(ops_proportional(false)),
            "ops-shutdown" => Ok(ops_proportional(true)),
            path => AcceleratorSet::load(&self.resolve(Path::new(path))),
        }
    }

    pub fn dataset(&self) -> Result<Dataset> {
        match (&self.dataset.path, &self.dataset.synthetic) {
            (Some(p), _) => load_dataset(&self.resolve(p)),
            (None, Some(s)) => gen_synthetic(s),
            (None, None) => Err(Error::Config("no dataset configured".into())),
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::from_toml("", Path::new(".")).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("lamdbas = [1.0]", Path::new(".")).is_err());
        assert!(RunConfig::from_toml("[search]\nepoch = 3", Path::new(".")).is_err());
    }

    #[test]
    fn inline_network_and_round_trip() {
        let text = r#"
            accelerators = "ops"
            objective = "energy"
            [network]
            name = "tiny"
            input = [1, 8, 8]
            classes = 4
            [[network.layer]]
            name = "c1"
            op = "conv"
            out = 4
            kernel = 3
            padding = 1
            relu = true
            [[network.layer]]
            name = "p"
            op = "gap"
            [[network.layer]]
            name = "fc"
            op = "fc"
            out = 4
        "#;
        let cfg = RunConfig::from_toml(text, Path::new(".")).unwrap();
        assert_eq!(cfg.graph().unwrap().layers().len(), 2);
        let again = RunConfig::from_toml(&cfg.to_toml(), Path::new(".")).unwrap();
        assert_eq!(again.network, cfg.network);
        assert_eq!(again.objective, Objective::Energy);
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::from_toml("lambdas = [-1.0]", Path::new(".")).is_err());
        assert!(RunConfig::from_toml("network = \"nope\"", Path::new(".")).is_err());
        assert!(RunConfig::from_toml("[dataset]\npath = \"x\"\n[dataset.synthetic]\nclasses = 2\nsamples = 10", Path::new(".")).is_err());
    }
}

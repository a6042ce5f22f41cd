//! Experiment configuration (TOML or JSON) and plan construction.
//!
//! ```toml
//! [[datasets]]
//! id = "vkitti"
//! role = "synthetic_under_test"
//! format = "kitti_txt"
//! annotations = "data/vkitti/label_2"
//! images = "data/vkitti/image_2"        # optional
//! aliases = { van = "car" }             # optional
//!
//! [splits]
//! dir = "splits"            # default "splits"
//! seed = 0                  # default 0
//! train_size = "auto"       # or an integer
//! test_fraction = 0.2       # default 0.2
//!
//! [runner]
//! train = "python train.py --data {train_manifest} --out {workdir} --seed {seed}"
//! eval = "python eval.py --weights {model_artifact} --data {test_manifest} --out {workdir}"
//! timeout_seconds = 3600
//! metric_name = "ap50"
//!
//! [execution]
//! max_parallel_cells = 1
//! parallel_training = false
//! keep_going = false
//! cache_dir = "cache"
//! matrix_out = "matrix.json"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};

use super::{OrchestratorError, Result, RunnerSpec};
use crate::harmonize::{
    validate_manifests, DatasetManifest, PrepOptions, SplitManifest, TrainSize,
};

/// Environment variable overriding `execution.cache_dir`.
pub const CACHE_DIR_ENV: &str = "GCV_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub datasets: Vec<DatasetManifest>,
    #[serde(default)]
    pub splits: SplitsConfig,
    pub runner: RunnerSpec,
    #[serde(default)]
    pub execution: ExecutionConfig,
    /// Directory relative paths were resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsConfig {
    #[serde(default = "default_splits_dir")]
    pub dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, deserialize_with = "train_size_setting")]
    pub train_size: TrainSize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl Default for SplitsConfig {
    fn default() -> Self {
        Self {
            dir: default_splits_dir(),
            seed: 0,
            train_size: TrainSize::Auto,
            test_fraction: default_test_fraction(),
        }
    }
}

fn default_splits_dir() -> PathBuf {
    PathBuf::from("splits")
}

fn default_test_fraction() -> f64 {
    0.2
}

fn train_size_setting<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainSize, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Setting {
        Count(usize),
        Keyword(String),
        Tagged(TrainSize),
    }
    match Setting::deserialize(d)? {
        Setting::Count(n) => Ok(TrainSize::Exact(n)),
        Setting::Keyword(k) if k == "auto" => Ok(TrainSize::Auto),
        Setting::Keyword(k) => Err(serde::de::Error::custom(format!(
            "train_size must be \"auto\" or a count, got \"{k}\""
        ))),
        Setting::Tagged(t) => Ok(t),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionConfig {
    #[serde(default = "one")]
    pub max_parallel_cells: usize,
    #[serde(default)]
    pub parallel_training: bool,
    #[serde(default)]
    pub keep_going: bool,
    #[serde(default = "default_cache_dir")]
    pub cache_dir: PathBuf,
    #[serde(default = "default_matrix_out")]
    pub matrix_out: PathBuf,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            max_parallel_cells: 1,
            parallel_training: false,
            keep_going: false,
            cache_dir: default_cache_dir(),
            matrix_out: default_matrix_out(),
        }
    }
}

fn one() -> usize {
    1
}

fn default_cache_dir() -> PathBuf {
    PathBuf::from("cache")
}

fn default_matrix_out() -> PathBuf {
    PathBuf::from("matrix.json")
}

fn config_error(field: impl Into<String>, message: impl Into<String>) -> OrchestratorError {
    OrchestratorError::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Parses TOML, or JSON when the file ends in `.json`, then resolves
    /// relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error("<file>", format!("cannot read {}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let base = if base.as_os_str().is_empty() {
            PathBuf::from(".")
        } else {
            base
        };
        let is_json = path.extension().is_some_and(|e| e == "json");
        Self::parse(&text, is_json, &base)
    }

    pub fn parse(text: &str, json: bool, base_dir: &Path) -> Result<Self> {
        let mut config: Self = if json {
            let mut de = serde_json::Deserializer::from_str(text);
            serde_path_to_error::deserialize(&mut de)
                .map_err(|e| config_error(e.path().to_string(), e.inner().to_string()))?
        } else {
            let de = toml::Deserializer::new(text);
            serde_path_to_error::deserialize(de)
                .map_err(|e| config_error(e.path().to_string(), e.inner().message().to_string()))?
        };
        let base = std::path::absolute(base_dir).unwrap_or_else(|_| base_dir.to_path_buf());
        config.rebase(&base);
        config.validate()?;
        Ok(config)
    }

    fn rebase(&mut self, base: &Path) {
        for d in &mut self.datasets {
            d.rebase(base);
        }
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.splits.dir);
        join(&mut self.execution.cache_dir);
        join(&mut self.execution.matrix_out);
        self.base_dir = base.to_path_buf();
    }

    pub fn validate(&self) -> Result<()> {
        validate_manifests(&self.datasets).map_err(|e| config_error("datasets", e.to_string()))?;
        let f = self.splits.test_fraction;
        if !(f.is_finite() && f > 0.0 && f <= 1.0) {
            return Err(config_error("splits.test_fraction", "must be in (0, 1]"));
        }
        if self.execution.max_parallel_cells == 0 {
            return Err(config_error(
                "execution.max_parallel_cells",
                "must be positive",
            ));
        }
        self.runner.validate()
    }

    /// Declaration order with the synthetic dataset moved to the front.
    pub fn ordered_datasets(&self) -> Vec<DatasetManifest> {
        let mut ordered: Vec<_> = self
            .datasets
            .iter()
            .filter(|d| d.is_synthetic())
            .cloned()
            .collect();
        ordered.extend(self.datasets.iter().filter(|d| !d.is_synthetic()).cloned());
        ordered
    }

    pub fn prep_options(&self) -> PrepOptions {
        PrepOptions {
            train_size: self.splits.train_size,
            test_fraction: self.splits.test_fraction,
            seed: self.splits.seed,
            out_dir: self.splits.dir.clone(),
        }
    }

    pub fn split_path(&self, dataset_id: &str) -> PathBuf {
        self.splits.dir.join(SplitManifest::file_name(dataset_id))
    }

    /// Cache root, honouring the environment override.
    pub fn cache_dir(&self) -> PathBuf {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => {
                let dir = PathBuf::from(dir);
                if dir.is_relative() {
                    self.base_dir.join(dir)
                } else {
                    dir
                }
            }
            _ => self.execution.cache_dir.clone(),
        }
    }
}

/// A split manifest as loaded for execution.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedSplit {
    pub path: PathBuf,
    pub manifest: SplitManifest,
    /// Raw bytes of the manifest file; they feed the cache fingerprints.
    pub bytes: Vec<u8>,
}

/// Everything `execute` needs, validated.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    /// Synthetic dataset first, then references in declaration order.
    pub manifests: Vec<DatasetManifest>,
    pub splits: BTreeMap<String, PlannedSplit>,
    pub runner: RunnerSpec,
    pub seed: u64,
    pub max_parallel_cells: usize,
    pub parallel_training: bool,
    pub keep_going: bool,
    pub cache_dir: PathBuf,
    /// Working directory for runner processes.
    pub base_dir: PathBuf,
    /// Extra placeholders available to runner templates, e.g. `{gcv}`.
    pub template_vars: BTreeMap<String, String>,
}

impl ExperimentPlan {
    pub fn dataset_ids(&self) -> Vec<String> {
        self.manifests
            .iter()
            .map(|m| m.dataset_id.clone())
            .collect()
    }

    /// One training job per dataset.
    pub fn train_jobs(&self) -> Vec<String> {
        self.dataset_ids()
    }

    /// Every (train, test) pair, row-major.
    pub fn cells(&self) -> Vec<(String, String)> {
        let ids = self.dataset_ids();
        ids.iter()
            .flat_map(|t| ids.iter().map(move |e| (t.clone(), e.clone())))
            .collect()
    }

    pub fn with_template_var(mut self, name: &str, value: &str) -> Self {
        self.template_vars
            .insert(name.to_string(), value.to_string());
        self
    }
}

/// Validates the config against the split manifests written by prep.
pub fn plan(config: &ExperimentConfig) -> Result<ExperimentPlan> {
    config.validate()?;
    let manifests = config.ordered_datasets();
    let mut splits = BTreeMap::new();
    let mut label_sets = BTreeSet::new();
    let mut train_sizes = BTreeSet::new();
    for m in &manifests {
        let path = config.split_path(&m.dataset_id);
        let bytes = match std::fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(OrchestratorError::MissingSplit(m.dataset_id.clone()))
            }
            Err(e) => return Err(OrchestratorError::Cache { path, source: e }),
        };
        let manifest: SplitManifest = serde_json::from_slice(&bytes).map_err(|e| {
            config_error(
                format!("splits.{}", m.dataset_id),
                format!("{}: {e}", path.display()),
            )
        })?;
        if manifest.dataset_id != m.dataset_id {
            return Err(config_error(
                format!("splits.{}", m.dataset_id),
                format!(
                    "{} describes dataset '{}'",
                    path.display(),
                    manifest.dataset_id
                ),
            ));
        }
        if manifest.seed != config.splits.seed {
            log::warn!(
                "{}: split manifest was prepared with seed {} but the config says {}; rerun prep",
                m.dataset_id,
                manifest.seed,
                config.splits.seed
            );
        }
        label_sets.insert(manifest.shared_labels.clone());
        train_sizes.insert(manifest.train_count);
        splits.insert(
            m.dataset_id.clone(),
            PlannedSplit {
                path,
                manifest,
                bytes,
            },
        );
    }
    if label_sets.len() > 1 || train_sizes.len() > 1 {
        return Err(config_error(
            "splits",
            "split manifests come from different prep runs (labels or train sizes differ); rerun prep",
        ));
    }
    Ok(ExperimentPlan {
        manifests,
        splits,
        runner: config.runner.clone(),
        seed: config.splits.seed,
        max_parallel_cells: config.execution.max_parallel_cells,
        parallel_training: config.execution.parallel_training,
        keep_going: config.execution.keep_going,
        cache_dir: config.cache_dir(),
        base_dir: config.base_dir.clone(),
        template_vars: BTreeMap::new(),
    })
}

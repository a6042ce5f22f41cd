//! Seconds-scale stand-ins for real datasets and detectors.
//!
//! A toy domain is a mixture of isotropic 2-D Gaussians, one per class. The
//! toy learner is a nearest-centroid classifier and its metric is accuracy.
//! Generated datasets use the same interchange files and split manifests as
//! real ones, and the learner speaks the ordinary runner protocol, so the
//! orchestrator treats it like any external trainer.
//!
//! On disk a generated domain is a directory holding
//!
//! ```text
//! annotations.jsonl   interchange records, one per sample (dummy 1x1 box)
//! features.csv        id,label,x,y
//! domain.json         the generating spec
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;
use crate::harmonize::{AnnotationFormat, AnnotationRecord, BBox, HarmonizeError, SplitManifest};

pub const METRIC_NAME: &str = "toy_accuracy";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const FEATURES_FILE: &str = "features.csv";
pub const MODEL_FILE: &str = "model.json";

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid toy domain: {0}")]
    InvalidSpec(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] HarmonizeError),
    #[error("{}:{line}: {reason}", path.display())]
    Features {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("sample '{0}' is listed in the split but absent from the features file")]
    UnknownSample(String),
    #[error("training split is empty")]
    EmptyTraining,
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = ToyError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ToyError + '_ {
    move |source| ToyError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyClass {
    pub name: String,
    pub mean: [f64; 2],
    /// Standard deviation per axis.
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDomainSpec {
    pub classes: Vec<ToyClass>,
    pub priors: Vec<f64>,
    pub sample_count: usize,
    pub seed: u64,
    #[serde(default)]
    pub mean_offset: [f64; 2],
    #[serde(default = "one")]
    pub spread_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ToyDomainSpec {
    /// Two classes, `separation` apart on the x axis, unit spread, equal priors.
    pub fn two_class(separation: f64, sample_count: usize, seed: u64) -> Self {
        Self {
            classes: vec![
                ToyClass {
                    name: "car".into(),
                    mean: [0.0, 0.0],
                    spread: 1.0,
                },
                ToyClass {
                    name: "person".into(),
                    mean: [separation, 0.0],
                    spread: 1.0,
                },
            ],
            priors: vec![0.5, 0.5],
            sample_count,
            seed,
            mean_offset: [0.0, 0.0],
            spread_scale: 1.0,
        }
    }

    pub fn with_offset(mut self, offset: [f64; 2]) -> Self {
        self.mean_offset = offset;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(ToyError::InvalidSpec(m));
        if self.classes.is_empty() {
            return invalid("at least one class is required".into());
        }
        if self.priors.len() != self.classes.len() {
            return invalid(format!(
                "{} priors for {} classes",
                self.priors.len(),
                self.classes.len()
            ));
        }
        if self.priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return invalid("priors must be finite and non-negative".into());
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return invalid(format!("priors sum to {total}, expected 1"));
        }
        for class in &self.classes {
            if class.name.trim().is_empty() {
                return invalid("class names must be non-empty".into());
            }
            if !(class.spread.is_finite() && class.spread > 0.0) {
                return invalid(format!("class '{}' needs spread > 0", class.name));
            }
        }
        if !(self.spread_scale.is_finite() && self.spread_scale > 0.0) {
            return invalid("spread_scale must be > 0".into());
        }
        if let Some((class, &n)) = self
            .classes
            .iter()
            .zip(&allocate(&self.priors, self.sample_count))
            .find(|(_, &n)| n < 2)
        {
            return invalid(format!(
                "class '{}' receives {n} sample(s); at least 2 are required",
                class.name
            ));
        }
        Ok(())
    }
}

/// Largest-remainder allocation of `total` samples over `priors`. Ties in
/// the fractional part go to the lower class index.
pub fn allocate(priors: &[f64], total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = priors.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub id: String,
    pub label: String,
    pub features: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub spec: ToyDomainSpec,
    pub samples: Vec<ToySample>,
}

pub fn generate_toy_dataset(spec: &ToyDomainSpec) -> Result<ToyDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = allocate(&spec.priors, spec.sample_count);
    let mut samples = Vec::with_capacity(spec.sample_count);
    for (class, &count) in spec.classes.iter().zip(&counts) {
        let sigma = class.spread * spec.spread_scale;
        for _ in 0..count {
            let mut features = [0.0; 2];
            for (axis, slot) in features.iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *slot = class.mean[axis] + spec.mean_offset[axis] + sigma * z;
            }
            samples.push(ToySample {
                id: format!("s{:06}", samples.len()),
                label: class.name.trim().to_lowercase(),
                features,
            });
        }
    }
    Ok(ToyDataset {
        spec: spec.clone(),
        samples,
    })
}

impl ToyDataset {
    pub fn records(&self) -> Vec<AnnotationRecord> {
        let unit = BBox::new(0.0, 0.0, 1.0, 1.0).expect("unit box is valid");
        self.samples
            .iter()
            .map(|s| AnnotationRecord {
                image_id: s.id.clone(),
                category: s.label.clone(),
                bbox: unit,
                source_format: AnnotationFormat::Interchange,
            })
            .collect()
    }

    fn features_csv(&self) -> String {
        let mut out = String::from("id,label,x,y\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                s.id, s.label, s.features[0], s.features[1]
            );
        }
        out
    }

    /// Writes the three domain files into `dir`; returns the annotations path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut jsonl = Vec::new();
        for record in self.records() {
            serde_json::to_writer(&mut jsonl, &record).expect("records always serialize");
            jsonl.push(b'\n');
        }
        let annotations = dir.join(ANNOTATIONS_FILE);
        write_atomic(&annotations, &jsonl).map_err(io_err(&annotations))?;
        let features = dir.join(FEATURES_FILE);
        write_atomic(&features, self.features_csv().as_bytes()).map_err(io_err(&features))?;
        let spec = dir.join("domain.json");
        let mut spec_bytes = serde_json::to_vec_pretty(&self.spec).expect("spec serializes");
        spec_bytes.push(b'\n');
        write_atomic(&spec, &spec_bytes).map_err(io_err(&spec))?;
        Ok(annotations)
    }
}

/// Features file belonging to a split manifest's annotation source.
pub fn features_path(manifest: &SplitManifest) -> PathBuf {
    manifest.annotation_source.with_file_name(FEATURES_FILE)
}

pub fn read_features(path: &Path) -> Result<BTreeMap<String, ToySample>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| ToyError::Features {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: reason.into(),
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(bad("expected id,label,x,y"));
        }
        let x: f64 = fields[2].parse().map_err(|_| bad("x is not a number"))?;
        let y: f64 = fields[3].parse().map_err(|_| bad("y is not a number"))?;
        out.insert(
            fields[0].to_string(),
            ToySample {
                id: fields[0].to_string(),
                label: fields[1].to_string(),
                features: [x, y],
            },
        );
    }
    Ok(out)
}

/// Nearest-centroid classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub centroids: BTreeMap<String, [f64; 2]>,
}

impl ToyModel {
    pub fn fit<'a>(samples: impl IntoIterator<Item = &'a ToySample>) -> Result<Self> {
        let mut sums: BTreeMap<String, ([f64; 2], usize)> = BTreeMap::new();
        for s in samples {
            let entry = sums.entry(s.label.clone()).or_insert(([0.0, 0.0], 0));
            entry.0[0] += s.features[0];
            entry.0[1] += s.features[1];
            entry.1 += 1;
        }
        if sums.is_empty() {
            return Err(ToyError::EmptyTraining);
        }
        let centroids = sums
            .into_iter()
            .map(|(label, (sum, n))| (label, [sum[0] / n as f64, sum[1] / n as f64]))
            .collect();
        Ok(Self { centroids })
    }

    /// Closest centroid; ties resolve to the lexicographically first label.
    pub fn predict(&self, features: [f64; 2]) -> &str {
        let mut best: Option<(&str, f64)> = None;
        for (label, c) in &self.centroids {
            let d = (features[0] - c[0]).powi(2) + (features[1] - c[1]).powi(2);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((label, d));
            }
        }
        best.map(|(l, _)| l).unwrap_or_default()
    }

    pub fn accuracy<'a>(&self, samples: impl IntoIterator<Item = &'a ToySample>) -> f64 {
        let (mut hits, mut total) = (0usize, 0usize);
        for s in samples {
            total += 1;
            if self.predict(s.features) == s.label {
                hits += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}

fn select<'a>(
    features: &'a BTreeMap<String, ToySample>,
    ids: &[String],
) -> Result<Vec<&'a ToySample>> {
    ids.iter()
        .map(|id| {
            features
                .get(id)
                .ok_or_else(|| ToyError::UnknownSample(id.clone()))
        })
        .collect()
}

/// Runner `train` role: fits on the manifest's training ids and writes
/// `model.json` into `workdir`.
pub fn runner_train(train_manifest: &Path, workdir: &Path) -> Result<PathBuf> {
    let manifest = SplitManifest::read(train_manifest)?;
    let features = read_features(&features_path(&manifest))?;
    let model = ToyModel::fit(select(&features, &manifest.train_ids)?)?;
    let path = workdir.join(MODEL_FILE);
    let mut bytes = serde_json::to_vec_pretty(&model).expect("model serializes");
    bytes.push(b'\n');
    write_atomic(&path, &bytes).map_err(io_err(&path))?;
    Ok(path)
}

/// Runner `eval` role: accuracy of the model in `model_artifact` (a
/// directory holding `model.json`, or the file itself) on the manifest's
/// test ids.
pub fn runner_eval(model_artifact: &Path, test_manifest: &Path) -> Result<f64> {
    let model_path = if model_artifact.is_dir() {
        model_artifact.join(MODEL_FILE)
    } else {
        model_artifact.to_path_buf()
    };
    let text = fs::read_to_string(&model_path).map_err(io_err(&model_path))?;
    let model: ToyModel = serde_json::from_str(&text).map_err(|source| ToyError::Json {
        path: model_path.clone(),
        source,
    })?;
    let manifest = SplitManifest::read(test_manifest)?;
    let features = read_features(&features_path(&manifest))?;
    Ok(model.accuracy(select(&features, &manifest.test_ids)?))
}

/// The protocol's final stdout line for an eval result.
pub fn protocol_line(value: f64) -> String {
    serde_json::json!({ "metric_name": METRIC_NAME, "value": value }).to_string()
}

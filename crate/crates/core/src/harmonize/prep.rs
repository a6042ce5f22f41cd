use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::parse::{parse_annotations, parse_yolo, write_interchange, Parsed, YoloSidecars};
use super::split::{make_splits, training_pool, SplitManifest, TrainSize};
use super::{
    filter_to_shared, flatten_groups, intersect_label_spaces, AnnotationFormat, HarmonizeError,
    ImageGroups, LabelAliases, LabelSpace, Result,
};
use crate::fsutil::write_atomic;

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "webp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    SyntheticUnderTest,
    Reference,
}

/// Where one dataset lives and how to read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(alias = "id")]
    pub dataset_id: String,
    pub role: DatasetRole,
    pub format: AnnotationFormat,
    #[serde(alias = "annotations")]
    pub annotation_source: PathBuf,
    /// When set, annotated images missing from this directory are dropped.
    #[serde(default, alias = "images", skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    #[serde(
        default,
        alias = "aliases",
        skip_serializing_if = "LabelAliases::is_empty"
    )]
    pub label_aliases: LabelAliases,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yolo_class_map: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yolo_image_sizes: Option<PathBuf>,
}

impl DatasetManifest {
    pub fn is_synthetic(&self) -> bool {
        self.role == DatasetRole::SyntheticUnderTest
    }

    /// Resolves relative paths against `base`.
    pub fn rebase(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.annotation_source);
        for p in [
            &mut self.image_dir,
            &mut self.yolo_class_map,
            &mut self.yolo_image_sizes,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    pub fn load(&self) -> Result<Parsed> {
        match (self.format, &self.yolo_class_map, &self.yolo_image_sizes) {
            (AnnotationFormat::YoloTxt, class_map, sizes)
                if class_map.is_some() || sizes.is_some() =>
            {
                let default_dir = if self.annotation_source.is_dir() {
                    self.annotation_source.clone()
                } else {
                    self.annotation_source
                        .parent()
                        .map(Path::to_path_buf)
                        .unwrap_or_default()
                };
                let defaults = YoloSidecars::in_dir(&default_dir);
                let sidecars = YoloSidecars {
                    class_map: class_map.clone().unwrap_or(defaults.class_map),
                    image_sizes: sizes.clone().unwrap_or(defaults.image_sizes),
                };
                parse_yolo(&self.annotation_source, &sidecars, &self.label_aliases)
            }
            _ => parse_annotations(self.format, &self.annotation_source, &self.label_aliases),
        }
    }
}

/// Checks the experiment-level manifest invariants.
pub fn validate_manifests(manifests: &[DatasetManifest]) -> Result<()> {
    let invalid = |msg: String| Err(HarmonizeError::InvalidManifests(msg));
    if manifests.len() < 2 {
        return invalid(format!(
            "need the synthetic dataset and at least one reference, got {} dataset(s)",
            manifests.len()
        ));
    }
    let synthetic = manifests.iter().filter(|m| m.is_synthetic()).count();
    if synthetic != 1 {
        return invalid(format!(
            "exactly one dataset must have role synthetic_under_test, found {synthetic}"
        ));
    }
    let mut seen = BTreeSet::new();
    for m in manifests {
        let id = m.dataset_id.as_str();
        let safe = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
            && !id.starts_with('.');
        if !safe {
            return invalid(format!(
                "dataset id '{id}' must be non-empty and use only [A-Za-z0-9_.-]"
            ));
        }
        if !seen.insert(id) {
            return invalid(format!("duplicate dataset id '{id}'"));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepOptions {
    pub train_size: TrainSize,
    pub test_fraction: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct PrepOutcome {
    pub shared_labels: LabelSpace,
    /// Written manifests, in input order.
    pub manifests: Vec<(PathBuf, SplitManifest)>,
}

fn image_on_disk(image_dir: &Path, image_id: &str) -> bool {
    let direct = image_dir.join(image_id);
    if direct.is_file() {
        return true;
    }
    IMAGE_EXTENSIONS
        .iter()
        .any(|ext| image_dir.join(format!("{image_id}.{ext}")).is_file())
}

struct Loaded {
    parsed: Parsed,
    missing: Vec<String>,
}

fn load_dataset(manifest: &DatasetManifest) -> Result<Loaded> {
    let mut parsed = manifest.load()?;
    let mut missing = Vec::new();
    if let Some(dir) = &manifest.image_dir {
        let ids: BTreeSet<String> = parsed.records.iter().map(|r| r.image_id.clone()).collect();
        missing = ids
            .into_iter()
            .filter(|id| !image_on_disk(dir, id))
            .collect();
        if !missing.is_empty() {
            warn!(
                "{}: dropping {} annotated image(s) missing under {}",
                manifest.dataset_id,
                missing.len(),
                dir.display()
            );
            let gone: BTreeSet<&str> = missing.iter().map(String::as_str).collect();
            parsed
                .records
                .retain(|r| !gone.contains(r.image_id.as_str()));
        }
    }
    if parsed.degenerate_dropped > 0 {
        warn!(
            "{}: skipped {} degenerate box(es)",
            manifest.dataset_id, parsed.degenerate_dropped
        );
    }
    Ok(Loaded { parsed, missing })
}

/// Runs the whole preparation pipeline and writes one split manifest plus
/// one filtered interchange file per dataset into `opts.out_dir`.
pub fn prepare(manifests: &[DatasetManifest], opts: &PrepOptions) -> Result<PrepOutcome> {
    validate_manifests(manifests)?;
    let loaded = manifests
        .iter()
        .map(load_dataset)
        .collect::<Result<Vec<_>>>()?;

    let spaces: Vec<LabelSpace> = loaded
        .iter()
        .map(|l| LabelSpace::from_records(&l.parsed.records))
        .collect();
    let shared = intersect_label_spaces(&spaces)?;
    info!("shared labels: {shared}");

    let filtered: BTreeMap<String, ImageGroups> = manifests
        .iter()
        .zip(&loaded)
        .map(|(m, l)| {
            (
                m.dataset_id.clone(),
                filter_to_shared(&l.parsed.records, &shared),
            )
        })
        .collect();
    let splits = make_splits(
        &filtered,
        opts.train_size,
        opts.test_fraction,
        opts.seed,
        &shared,
    )?;

    std::fs::create_dir_all(&opts.out_dir).map_err(|source| HarmonizeError::Unwritable {
        path: opts.out_dir.clone(),
        source,
    })?;

    let mut written = Vec::with_capacity(manifests.len());
    for (manifest, load) in manifests.iter().zip(&loaded) {
        let id = &manifest.dataset_id;
        let groups = &filtered[id];
        let split = &splits[id];

        let records_path = opts.out_dir.join(format!("{id}.records.jsonl"));
        write_interchange(&records_path, &flatten_groups(groups))?;

        let doc = SplitManifest {
            dataset_id: id.clone(),
            role: manifest.role,
            format: manifest.format,
            annotation_source: manifest.annotation_source.clone(),
            image_dir: manifest.image_dir.clone(),
            records: records_path,
            seed: opts.seed,
            test_fraction: opts.test_fraction,
            shared_labels: shared.clone(),
            retained_images: groups.len(),
            train_pool: training_pool(groups.len(), opts.test_fraction),
            train_count: split.train_ids.len(),
            test_count: split.test_ids.len(),
            dropped_missing_images: load.missing.clone(),
            degenerate_boxes_dropped: load.parsed.degenerate_dropped,
            train_ids: split.train_ids.clone(),
            test_ids: split.test_ids.clone(),
        };
        let path = opts.out_dir.join(SplitManifest::file_name(id));
        write_atomic(&path, &doc.to_bytes()).map_err(|source| HarmonizeError::Unwritable {
            path: path.clone(),
            source,
        })?;
        info!(
            "{id}: {} retained, {} train, {} test",
            doc.retained_images, doc.train_count, doc.test_count
        );
        written.push((path, doc));
    }
    Ok(PrepOutcome {
        shared_labels: shared,
        manifests: written,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;
    use tempfile::TempDir;

    fn kitti_manifest(
        dir: &Path,
        id: &str,
        role: DatasetRole,
        lines: &[(&str, &str)],
    ) -> DatasetManifest {
        let labels = dir.join(id);
        fs::create_dir_all(&labels).unwrap();
        for (image, label) in lines {
            fs::write(
                labels.join(format!("{image}.txt")),
                format!("{label} 0 0 0 10 10 50 50 1 1 1 0 0 0 0\n"),
            )
            .unwrap();
        }
        DatasetManifest {
            dataset_id: id.into(),
            role,
            format: AnnotationFormat::KittiTxt,
            annotation_source: labels,
            image_dir: None,
            label_aliases: LabelAliases::new(),
            yolo_class_map: None,
            yolo_image_sizes: None,
        }
    }

    #[test]
    fn manifest_validation() {
        let dir = TempDir::new().unwrap();
        let syn = kitti_manifest(dir.path(), "syn", DatasetRole::SyntheticUnderTest, &[]);
        let reference = kitti_manifest(dir.path(), "ref", DatasetRole::Reference, &[]);
        assert!(validate_manifests(&[syn.clone(), reference.clone()]).is_ok());
        assert!(validate_manifests(std::slice::from_ref(&syn)).is_err());
        assert!(validate_manifests(&[reference.clone(), reference.clone()]).is_err());
        assert!(validate_manifests(&[syn.clone(), syn.clone()]).is_err());
        let mut bad = reference;
        bad.dataset_id = "../x".into();
        assert!(validate_manifests(&[syn, bad]).is_err());
    }

    #[test]
    fn missing_images_are_dropped_at_prep() {
        let dir = TempDir::new().unwrap();
        let lines = [("a", "Car"), ("b", "Car"), ("c", "Car"), ("d", "Car")];
        let mut syn = kitti_manifest(dir.path(), "syn", DatasetRole::SyntheticUnderTest, &lines);
        let images = dir.path().join("syn_images");
        fs::create_dir_all(&images).unwrap();
        for id in ["a", "b", "c"] {
            fs::write(images.join(format!("{id}.png")), b"").unwrap();
        }
        syn.image_dir = Some(images);
        let reference = kitti_manifest(dir.path(), "ref", DatasetRole::Reference, &lines);
        let opts = PrepOptions {
            train_size: TrainSize::Auto,
            test_fraction: 0.5,
            seed: 1,
            out_dir: dir.path().join("splits"),
        };
        let outcome = prepare(&[syn, reference], &opts).unwrap();
        let (_, syn_doc) = &outcome.manifests[0];
        assert_eq!(syn_doc.dropped_missing_images, vec!["d".to_string()]);
        assert_eq!(syn_doc.retained_images, 3);
        assert_eq!(syn_doc.train_count, 2);
        assert_eq!(outcome.manifests[1].1.train_count, 2);
    }

    #[test]
    fn disjoint_labels_fail_with_empty_intersection() {
        let dir = TempDir::new().unwrap();
        let syn = kitti_manifest(
            dir.path(),
            "syn",
            DatasetRole::SyntheticUnderTest,
            &[("a", "Car"), ("b", "Car")],
        );
        let reference = kitti_manifest(
            dir.path(),
            "ref",
            DatasetRole::Reference,
            &[("a", "Person"), ("b", "Person")],
        );
        let opts = PrepOptions {
            train_size: TrainSize::Auto,
            test_fraction: 0.2,
            seed: 0,
            out_dir: dir.path().join("splits"),
        };
        assert!(matches!(
            prepare(&[syn, reference], &opts),
            Err(HarmonizeError::EmptyIntersection(_))
        ));
    }
}

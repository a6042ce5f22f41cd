//! Deterministic train/test splitting.
//!
//! Image ids are sorted lexicographically (byte order) and then shuffled
//! with a Fisher-Yates pass driven by SplitMix64:
//!
//! ```text
//! state  <- state + 0x9E3779B97F4A7C15            (wrapping)
//! z      <- state
//! z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (wrapping)
//! z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB  (wrapping)
//! output <- z ^ (z >> 31)
//! ```
//!
//! The generator starts from `state = seed`. For `i` from `n - 1` down to
//! `1`, the swap partner is `j = (next() * (i + 1)) >> 64` computed in
//! 128-bit arithmetic, and ids `i` and `j` are exchanged. The first
//! `train_size` shuffled ids form the training split and the next
//! `ceil(test_fraction * train_size)` form the test split. Any
//! implementation following these steps produces the same splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationFormat, DatasetRole, HarmonizeError, ImageGroups, LabelSpace, Result};

/// SplitMix64 pseudo-random generator.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform index in `0..bound` by multiply-shift.
    pub fn below(&mut self, bound: usize) -> usize {
        ((u128::from(self.next_u64()) * bound as u128) >> 64) as usize
    }
}

/// Fisher-Yates shuffle as documented at module level.
pub fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for i in (1..items.len()).rev() {
        let j = rng.below(i + 1);
        items.swap(i, j);
    }
}

/// Requested training-set size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainSize {
    /// Smallest training pool across the datasets.
    #[default]
    Auto,
    Exact(usize),
}

fn test_count(train: usize, test_fraction: f64) -> usize {
    (test_fraction * train as f64).ceil() as usize
}

/// Largest training size that still leaves room for a full test split
/// out of `retained` images.
pub fn training_pool(retained: usize, test_fraction: f64) -> usize {
    (0..=retained)
        .rev()
        .find(|&t| t + test_count(t, test_fraction) <= retained)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HarmonizedSplit {
    pub dataset_id: String,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub seed: u64,
    pub shared_labels: LabelSpace,
}

/// Splits every dataset with the same training size.
pub fn make_splits(
    datasets: &BTreeMap<String, ImageGroups>,
    train_size: TrainSize,
    test_fraction: f64,
    seed: u64,
    shared_labels: &LabelSpace,
) -> Result<BTreeMap<String, HarmonizedSplit>> {
    if !(test_fraction.is_finite() && test_fraction > 0.0 && test_fraction <= 1.0) {
        return Err(HarmonizeError::InvalidTestFraction(test_fraction));
    }
    for (id, groups) in datasets {
        if groups.len() < 2 {
            return Err(HarmonizeError::TooFewImages {
                dataset_id: id.clone(),
                available: groups.len(),
            });
        }
    }
    let pools: BTreeMap<&String, usize> = datasets
        .iter()
        .map(|(id, groups)| (id, training_pool(groups.len(), test_fraction)))
        .collect();

    let train = match train_size {
        TrainSize::Exact(n) => {
            if let Some((id, &pool)) = pools.iter().find(|(_, &pool)| n > pool) {
                return Err(HarmonizeError::InsufficientSamples {
                    dataset_id: (*id).clone(),
                    needed: n,
                    available: pool,
                });
            }
            n
        }
        TrainSize::Auto => pools.values().copied().min().unwrap_or(0),
    };

    Ok(datasets
        .iter()
        .map(|(id, groups)| {
            // BTreeMap keys are already in lexicographic order.
            let mut ids: Vec<String> = groups.keys().cloned().collect();
            shuffle(&mut ids, seed);
            let test = test_count(train, test_fraction).min(ids.len() - train);
            let test_ids = ids[train..train + test].to_vec();
            ids.truncate(train);
            let split = HarmonizedSplit {
                dataset_id: id.clone(),
                train_ids: ids,
                test_ids,
                seed,
                shared_labels: shared_labels.clone(),
            };
            (id.clone(), split)
        })
        .collect())
}

/// On-disk split contract consumed by the orchestrator and by runners.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset_id: String,
    pub role: DatasetRole,
    pub format: AnnotationFormat,
    pub annotation_source: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_dir: Option<PathBuf>,
    /// Interchange file holding only shared-category annotations of the
    /// retained images.
    pub records: PathBuf,
    pub seed: u64,
    pub test_fraction: f64,
    pub shared_labels: LabelSpace,
    /// Images left after filtering, before the train/test carve-out.
    pub retained_images: usize,
    /// Largest training size this dataset alone could support.
    pub train_pool: usize,
    pub train_count: usize,
    pub test_count: usize,
    #[serde(default)]
    pub dropped_missing_images: Vec<String>,
    #[serde(default)]
    pub degenerate_boxes_dropped: usize,
    pub train_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

impl SplitManifest {
    pub fn split(&self) -> HarmonizedSplit {
        HarmonizedSplit {
            dataset_id: self.dataset_id.clone(),
            train_ids: self.train_ids.clone(),
            test_ids: self.test_ids.clone(),
            seed: self.seed,
            shared_labels: self.shared_labels.clone(),
        }
    }

    /// Canonical serialized bytes (pretty JSON, trailing newline).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest always serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| HarmonizeError::Unreadable {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|source| HarmonizeError::SplitManifest {
            path: path.to_path_buf(),
            source,
        })
    }

    /// File name used for a dataset's manifest inside the splits directory.
    pub fn file_name(dataset_id: &str) -> String {
        format!("{dataset_id}.split.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harmonize::{AnnotationRecord, BBox};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn splitmix_reference_outputs() {
        // Reference sequence for seed 0.
        let mut rng = SplitMix64::new(0);
        assert_eq!(rng.next_u64(), 0xE220_A839_7B1D_CDAF);
        assert_eq!(rng.next_u64(), 0x6E78_9E6A_A1B9_65F4);
        assert_eq!(rng.next_u64(), 0x06C4_5D18_8009_454F);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut v: Vec<u32> = (0..100).collect();
        shuffle(&mut v, 42);
        assert_ne!(v, (0..100).collect::<Vec<_>>());
        v.sort();
        assert_eq!(v, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn pool_arithmetic() {
        assert_eq!(training_pool(4, 0.5), 2);
        assert_eq!(training_pool(2, 0.2), 1);
        assert_eq!(training_pool(10, 0.2), 8);
        assert_eq!(training_pool(9250, 0.25), 7400);
        assert_eq!(training_pool(1, 0.2), 0);
    }

    fn groups(prefix: &str, n: usize) -> ImageGroups {
        (0..n)
            .map(|i| {
                let id = format!("{prefix}{i:05}");
                let rec = AnnotationRecord {
                    image_id: id.clone(),
                    category: "car".into(),
                    bbox: BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
                    source_format: AnnotationFormat::Interchange,
                };
                (id, vec![rec])
            })
            .collect()
    }

    fn shared() -> LabelSpace {
        ["car"].iter().collect()
    }

    #[test]
    fn four_images_two_train_one_test() {
        let data = BTreeMap::from([("d".to_string(), groups("i", 4))]);
        let splits = make_splits(&data, TrainSize::Exact(2), 0.5, 0, &shared()).unwrap();
        let s = &splits["d"];
        assert_eq!(s.train_ids.len(), 2);
        assert_eq!(s.test_ids.len(), 1);
        assert!(s.train_ids.iter().all(|id| !s.test_ids.contains(id)));
        let again = make_splits(&data, TrainSize::Exact(2), 0.5, 0, &shared()).unwrap();
        assert_eq!(splits, again);
    }

    #[test]
    fn oversized_request_is_insufficient() {
        let data = BTreeMap::from([("kitti".to_string(), groups("k", 8750))]);
        match make_splits(&data, TrainSize::Exact(7400), 0.2, 0, &shared()) {
            Err(HarmonizeError::InsufficientSamples {
                dataset_id,
                needed,
                available,
            }) => {
                assert_eq!(dataset_id, "kitti");
                assert_eq!(needed, 7400);
                assert_eq!(available, 7291);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn auto_uses_smallest_pool() {
        let data = BTreeMap::from([
            ("a".to_string(), groups("a", 50)),
            ("b".to_string(), groups("b", 13)),
        ]);
        let splits = make_splits(&data, TrainSize::Auto, 0.2, 9, &shared()).unwrap();
        assert_eq!(splits["a"].train_ids.len(), 10);
        assert_eq!(splits["b"].train_ids.len(), 10);
        assert_eq!(splits["a"].test_ids.len(), 2);
    }

    #[test]
    fn rejects_bad_inputs() {
        let data = BTreeMap::from([("a".to_string(), groups("a", 1))]);
        assert!(matches!(
            make_splits(&data, TrainSize::Auto, 0.2, 0, &shared()),
            Err(HarmonizeError::TooFewImages { .. })
        ));
        let data = BTreeMap::from([("a".to_string(), groups("a", 5))]);
        for f in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(
                make_splits(&data, TrainSize::Auto, f, 0, &shared()),
                Err(HarmonizeError::InvalidTestFraction(_))
            ));
        }
    }

    proptest! {
        #[test]
        fn split_invariants(
            sizes in proptest::collection::vec(2usize..60, 1..5),
            f in 0.05f64..1.0,
            seed in any::<u64>(),
        ) {
            let data: BTreeMap<String, ImageGroups> = sizes
                .iter()
                .enumerate()
                .map(|(i, &n)| (format!("d{i}"), groups(&format!("x{i}_"), n)))
                .collect();
            let splits = make_splits(&data, TrainSize::Auto, f, seed, &shared()).unwrap();
            let train_len = splits.values().next().unwrap().train_ids.len();
            for (id, s) in &splits {
                prop_assert_eq!(s.train_ids.len(), train_len);
                let train: BTreeSet<_> = s.train_ids.iter().collect();
                prop_assert!(s.test_ids.iter().all(|t| !train.contains(t)));
                prop_assert!(!s.test_ids.is_empty());
                prop_assert!(s.train_ids.iter().chain(&s.test_ids).all(|t| data[id].contains_key(t)));
            }
            let again = make_splits(&data, TrainSize::Auto, f, seed, &shared()).unwrap();
            prop_assert_eq!(splits, again);
        }
    }
}

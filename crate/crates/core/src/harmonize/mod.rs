//! Dataset preparation: annotation parsing, label-space harmonization,
//! filtering to shared categories and deterministic equal-size splits.
//!
//! The flow for one experiment is
//!
//! ```text
//! parse_annotations ──► LabelSpace per dataset ──► intersect_label_spaces
//!                                                        │
//!        filter_to_shared ◄──────────────────────────────┘
//!               │
//!          make_splits ──► one split manifest per dataset
//! ```

mod parse;
mod prep;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{
    parse_annotations, parse_yolo, read_interchange, write_interchange, Parsed, YoloSidecars,
    DEFAULT_YOLO_CLASS_MAP, DEFAULT_YOLO_IMAGE_SIZES,
};
pub use prep::{
    prepare, validate_manifests, DatasetManifest, DatasetRole, PrepOptions, PrepOutcome,
};
pub use split::{
    make_splits, shuffle, training_pool, HarmonizedSplit, SplitManifest, SplitMix64, TrainSize,
};

#[derive(Debug, Error)]
pub enum HarmonizeError {
    #[error("{}:{line}: {reason}", file.display())]
    MalformedLine {
        file: PathBuf,
        /// 1-based; 0 refers to the document as a whole.
        line: usize,
        reason: String,
    },
    #[error("{}: no dimension entry for image '{image_id}'", file.display())]
    UnknownImageDimension { file: PathBuf, image_id: String },
    #[error("cannot read {}: {source}", path.display())]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {}: {source}", path.display())]
    Unwritable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label spaces share no category: {}", describe_spaces(.0))]
    EmptyIntersection(Vec<LabelSpace>),
    #[error("need at least two label spaces to intersect, got {0}")]
    TooFewLabelSpaces(usize),
    #[error(
        "dataset '{dataset_id}' needs {needed} training images but only {available} are available"
    )]
    InsufficientSamples {
        dataset_id: String,
        needed: usize,
        available: usize,
    },
    #[error("dataset '{dataset_id}' retains {available} image(s) after filtering; at least 2 are required")]
    TooFewImages {
        dataset_id: String,
        available: usize,
    },
    #[error("test fraction must be finite and in (0, 1], got {0}")]
    InvalidTestFraction(f64),
    #[error("invalid dataset manifests: {0}")]
    InvalidManifests(String),
    #[error("split manifest {}: {source}", path.display())]
    SplitManifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn describe_spaces(spaces: &[LabelSpace]) -> String {
    spaces
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" vs ")
}

pub type Result<T, E = HarmonizeError> = std::result::Result<T, E>;

/// Supported annotation encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationFormat {
    /// One whitespace-delimited text file per image; type in field 1,
    /// pixel box in fields 5-8.
    KittiTxt,
    /// A single COCO-style JSON document.
    CocoJson,
    /// One text file per image with normalized `class cx cy w h` rows,
    /// plus a class map and an image dimension index.
    YoloTxt,
    /// The tool's own JSON-lines record stream.
    Interchange,
}

impl fmt::Display for AnnotationFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnnotationFormat::KittiTxt => "kitti_txt",
            AnnotationFormat::CocoJson => "coco_json",
            AnnotationFormat::YoloTxt => "yolo_txt",
            AnnotationFormat::Interchange => "interchange",
        })
    }
}

/// Axis-aligned box in absolute pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    /// Returns `None` for non-finite or zero/negative-area boxes.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Option<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        (finite && x_min < x_max && y_min < y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Converts a normalized center/size box to absolute corners.
    pub fn from_normalized_center(
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        image_width: f64,
        image_height: f64,
    ) -> Option<Self> {
        let (center_x, center_y) = (cx * image_width, cy * image_height);
        let (half_w, half_h) = (w * image_width / 2.0, h * image_height / 2.0);
        Self::new(
            center_x - half_w,
            center_y - half_h,
            center_x + half_w,
            center_y + half_h,
        )
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x_min: v[0],
            y_min: v[1],
            x_max: v[2],
            y_max: v[3],
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

/// One object instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    /// Canonical label: trimmed, lowercase, alias-resolved.
    pub category: String,
    pub bbox: BBox,
    pub source_format: AnnotationFormat,
}

/// Lowercase + trim.
pub fn canonical_label(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// Explicit raw-label → canonical-label mapping supplied by the user.
///
/// Keys and values are stored canonicalized, so `"Van" → "Car"` matches a
/// raw `" van"` and yields `"car"`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct LabelAliases(BTreeMap<String, String>);

impl LabelAliases {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, raw: &str, canonical: &str) {
        self.0
            .insert(canonical_label(raw), canonical_label(canonical));
    }

    /// Canonicalizes `raw` and resolves it through the alias table.
    pub fn resolve(&self, raw: &str) -> String {
        let label = canonical_label(raw);
        match self.0.get(&label) {
            Some(target) => target.clone(),
            None => label,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<BTreeMap<String, String>> for LabelAliases {
    fn from(map: BTreeMap<String, String>) -> Self {
        let mut aliases = Self::new();
        for (raw, canonical) in &map {
            aliases.insert(raw, canonical);
        }
        aliases
    }
}

impl From<LabelAliases> for BTreeMap<String, String> {
    fn from(a: LabelAliases) -> Self {
        a.0
    }
}

impl<'a> FromIterator<(&'a str, &'a str)> for LabelAliases {
    fn from_iter<I: IntoIterator<Item = (&'a str, &'a str)>>(iter: I) -> Self {
        let mut aliases = Self::new();
        for (raw, canonical) in iter {
            aliases.insert(raw, canonical);
        }
        aliases
    }
}

/// Sorted set of canonical labels.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelSpace(BTreeSet<String>);

impl LabelSpace {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a AnnotationRecord>) -> Self {
        Self(records.into_iter().map(|r| r.category.clone()).collect())
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.contains(label)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl<S: AsRef<str>> FromIterator<S> for LabelSpace {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        Self(
            iter.into_iter()
                .map(|s| canonical_label(s.as_ref()))
                .collect(),
        )
    }
}

impl fmt::Display for LabelSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, label) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            f.write_str(label)?;
        }
        write!(f, "}}")
    }
}

/// Shared categories across all `spaces`.
pub fn intersect_label_spaces(spaces: &[LabelSpace]) -> Result<LabelSpace> {
    if spaces.len() < 2 {
        return Err(HarmonizeError::TooFewLabelSpaces(spaces.len()));
    }
    let mut shared = spaces[0].0.clone();
    for space in &spaces[1..] {
        shared.retain(|label| space.0.contains(label));
    }
    if shared.is_empty() {
        return Err(HarmonizeError::EmptyIntersection(spaces.to_vec()));
    }
    Ok(LabelSpace(shared))
}

/// Annotations grouped by image id, images in lexicographic order.
pub type ImageGroups = BTreeMap<String, Vec<AnnotationRecord>>;

/// Drops records outside `shared`, then drops images left with no records.
pub fn filter_to_shared(records: &[AnnotationRecord], shared: &LabelSpace) -> ImageGroups {
    let mut groups = ImageGroups::new();
    for record in records.iter().filter(|r| shared.contains(&r.category)) {
        groups
            .entry(record.image_id.clone())
            .or_default()
            .push(record.clone());
    }
    groups
}

/// Flattens groups back into a record sequence (image order, then record order).
pub fn flatten_groups(groups: &ImageGroups) -> Vec<AnnotationRecord> {
    groups.values().flatten().cloned().collect()
}

//! Readers for KITTI-style, COCO-style and YOLO-style annotations, plus the
//! JSON-lines interchange stream used between pipeline stages.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{AnnotationFormat, AnnotationRecord, BBox, HarmonizeError, LabelAliases, Result};

/// Default class map file name inside a YOLO label directory.
pub const DEFAULT_YOLO_CLASS_MAP: &str = "classes.txt";
/// Default image dimension index inside a YOLO label directory.
pub const DEFAULT_YOLO_IMAGE_SIZES: &str = "image_sizes.txt";

/// Records read from one source.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parsed {
    pub records: Vec<AnnotationRecord>,
    /// Zero-area or non-finite boxes skipped while reading.
    pub degenerate_dropped: usize,
}

impl Parsed {
    fn push(&mut self, record: Option<AnnotationRecord>) {
        match record {
            Some(r) => self.records.push(r),
            None => self.degenerate_dropped += 1,
        }
    }
}

/// Side files a YOLO label directory needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct YoloSidecars {
    /// One class name per line; line index is the class id.
    pub class_map: PathBuf,
    /// `image_id width height` per line.
    pub image_sizes: PathBuf,
}

impl YoloSidecars {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            class_map: dir.join(DEFAULT_YOLO_CLASS_MAP),
            image_sizes: dir.join(DEFAULT_YOLO_IMAGE_SIZES),
        }
    }
}

/// Parses `source` as `format`.
///
/// KITTI and YOLO sources may be a single label file or a directory of
/// `*.txt` label files; the image id is the file stem. YOLO sidecars are
/// looked up next to the labels under their default names; use
/// [`parse_yolo`] to point elsewhere.
pub fn parse_annotations(
    format: AnnotationFormat,
    source: &Path,
    aliases: &LabelAliases,
) -> Result<Parsed> {
    match format {
        AnnotationFormat::KittiTxt => parse_kitti(source, aliases),
        AnnotationFormat::CocoJson => parse_coco(source, aliases),
        AnnotationFormat::YoloTxt => {
            let dir = if source.is_dir() {
                source
            } else {
                source.parent().unwrap_or(Path::new("."))
            };
            parse_yolo(source, &YoloSidecars::in_dir(dir), aliases)
        }
        AnnotationFormat::Interchange => {
            let mut records = read_interchange(source)?;
            for r in &mut records {
                r.category = aliases.resolve(&r.category);
            }
            check_categories(source, &records)?;
            Ok(Parsed {
                records,
                degenerate_dropped: 0,
            })
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| HarmonizeError::Unreadable {
        path: path.to_path_buf(),
        source,
    })
}

fn malformed(file: &Path, line: usize, reason: impl Into<String>) -> HarmonizeError {
    HarmonizeError::MalformedLine {
        file: file.to_path_buf(),
        line,
        reason: reason.into(),
    }
}

/// Label files of a per-image source, sorted by path. `skip` names are
/// excluded (sidecars living in the same directory).
fn label_files(source: &Path, skip: &[&Path]) -> Result<Vec<PathBuf>> {
    let meta = fs::metadata(source).map_err(|e| HarmonizeError::Unreadable {
        path: source.to_path_buf(),
        source: e,
    })?;
    if meta.is_file() {
        return Ok(vec![source.to_path_buf()]);
    }
    let entries = fs::read_dir(source).map_err(|e| HarmonizeError::Unreadable {
        path: source.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| HarmonizeError::Unreadable {
                path: source.to_path_buf(),
                source: e,
            })?
            .path();
        let is_txt = path.extension().is_some_and(|ext| ext == "txt");
        if is_txt && path.is_file() && !skip.iter().any(|s| *s == path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn image_id_of(label_file: &Path) -> String {
    label_file
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn parse_number(file: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| malformed(file, line, format!("{what}: '{field}' is not a number")))
}

fn resolve_category(aliases: &LabelAliases, raw: &str, file: &Path, line: usize) -> Result<String> {
    let category = aliases.resolve(raw);
    if category.is_empty() {
        return Err(malformed(file, line, "empty category"));
    }
    Ok(category)
}

// KITTI object label layout (1-based fields): 1 type, 2 truncated,
// 3 occluded, 4 alpha, 5-8 bbox left/top/right/bottom, 9-11 dimensions,
// 12-14 location, 15 rotation_y, optional 16 score.
fn parse_kitti(source: &Path, aliases: &LabelAliases) -> Result<Parsed> {
    let mut out = Parsed::default();
    for file in label_files(source, &[])? {
        let image_id = image_id_of(&file);
        let text = read_text(&file)?;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() < 8 {
                return Err(malformed(
                    &file,
                    line_no,
                    format!("expected at least 8 fields, found {}", fields.len()),
                ));
            }
            let category = resolve_category(aliases, fields[0], &file, line_no)?;
            let mut coords = [0.0; 4];
            for (slot, field) in coords.iter_mut().zip(&fields[4..8]) {
                *slot = parse_number(&file, line_no, field, "bbox")?;
            }
            out.push(
                BBox::new(coords[0], coords[1], coords[2], coords[3]).map(|bbox| {
                    AnnotationRecord {
                        image_id: image_id.clone(),
                        category,
                        bbox,
                        source_format: AnnotationFormat::KittiTxt,
                    }
                }),
            );
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct CocoDocument {
    #[serde(default)]
    images: Vec<CocoImage>,
    #[serde(default)]
    annotations: Vec<CocoAnnotation>,
    #[serde(default)]
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    // Read so the document is validated; boxes are already absolute.
    #[allow(dead_code)]
    width: f64,
    #[allow(dead_code)]
    height: f64,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// COCO `file_name` minus its extension, keeping any sub-directory part.
fn coco_image_id(file_name: &str) -> String {
    let path = Path::new(file_name);
    match path.extension() {
        Some(_) => path.with_extension("").to_string_lossy().into_owned(),
        None => file_name.to_string(),
    }
}

fn parse_coco(source: &Path, aliases: &LabelAliases) -> Result<Parsed> {
    let text = read_text(source)?;
    if text.trim().is_empty() {
        return Ok(Parsed::default());
    }
    let doc: CocoDocument =
        serde_json::from_str(&text).map_err(|e| malformed(source, e.line(), e.to_string()))?;

    let mut images = HashMap::new();
    for image in &doc.images {
        if images
            .insert(image.id, coco_image_id(&image.file_name))
            .is_some()
        {
            return Err(malformed(
                source,
                0,
                format!("duplicate image id {}", image.id),
            ));
        }
    }
    let mut categories = HashMap::new();
    for category in &doc.categories {
        let name = resolve_category(aliases, &category.name, source, 0)?;
        categories.insert(category.id, name);
    }

    let mut out = Parsed::default();
    for ann in &doc.annotations {
        let image_id = images.get(&ann.image_id).ok_or_else(|| {
            malformed(
                source,
                0,
                format!("annotation references unknown image {}", ann.image_id),
            )
        })?;
        let category = categories.get(&ann.category_id).ok_or_else(|| {
            malformed(
                source,
                0,
                format!("annotation references unknown category {}", ann.category_id),
            )
        })?;
        let [x, y, w, h] = ann.bbox;
        out.push(BBox::new(x, y, x + w, y + h).map(|bbox| AnnotationRecord {
            image_id: image_id.clone(),
            category: category.clone(),
            bbox,
            source_format: AnnotationFormat::CocoJson,
        }));
    }
    Ok(out)
}

fn meaningful_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn read_class_map(path: &Path) -> Result<Vec<String>> {
    let text = read_text(path)?;
    let mut names = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let name = line.trim();
        if name.is_empty() {
            // Trailing blank lines are common; interior blanks would shift ids.
            if text.lines().skip(idx).all(|l| l.trim().is_empty()) {
                break;
            }
            return Err(malformed(path, idx + 1, "blank class name"));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

fn read_image_sizes(path: &Path) -> Result<BTreeMap<String, (f64, f64)>> {
    let text = read_text(path)?;
    let mut sizes = BTreeMap::new();
    for (line_no, line) in meaningful_lines(&text) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(malformed(path, line_no, "expected 'image_id width height'"));
        }
        let width = parse_number(path, line_no, fields[1], "width")?;
        let height = parse_number(path, line_no, fields[2], "height")?;
        if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
            return Err(malformed(
                path,
                line_no,
                "image dimensions must be positive",
            ));
        }
        sizes.insert(fields[0].to_string(), (width, height));
    }
    Ok(sizes)
}

/// Parses YOLO labels with explicit sidecar locations.
pub fn parse_yolo(
    source: &Path,
    sidecars: &YoloSidecars,
    aliases: &LabelAliases,
) -> Result<Parsed> {
    let files = label_files(source, &[&sidecars.class_map, &sidecars.image_sizes])?;
    let mut out = Parsed::default();
    if files.is_empty() {
        return Ok(out);
    }
    let classes = read_class_map(&sidecars.class_map)?;
    let sizes = read_image_sizes(&sidecars.image_sizes)?;

    for file in files {
        let image_id = image_id_of(&file);
        let text = read_text(&file)?;
        let mut dims = None;
        for (line_no, line) in meaningful_lines(&text) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() < 5 {
                return Err(malformed(
                    &file,
                    line_no,
                    format!(
                        "expected 'class cx cy w h', found {} field(s)",
                        fields.len()
                    ),
                ));
            }
            let class_id: usize = fields[0].parse().map_err(|_| {
                malformed(
                    &file,
                    line_no,
                    format!("class id '{}' is not an integer", fields[0]),
                )
            })?;
            let raw = classes.get(class_id).ok_or_else(|| {
                malformed(
                    &file,
                    line_no,
                    format!(
                        "class id {class_id} outside class map of {} entries",
                        classes.len()
                    ),
                )
            })?;
            let category = resolve_category(aliases, raw, &file, line_no)?;
            let mut v = [0.0; 4];
            for (slot, field) in v.iter_mut().zip(&fields[1..5]) {
                *slot = parse_number(&file, line_no, field, "box")?;
            }
            let (width, height) = match dims {
                Some(d) => d,
                None => {
                    let d = *sizes.get(&image_id).ok_or_else(|| {
                        HarmonizeError::UnknownImageDimension {
                            file: sidecars.image_sizes.clone(),
                            image_id: image_id.clone(),
                        }
                    })?;
                    dims = Some(d);
                    d
                }
            };
            out.push(
                BBox::from_normalized_center(v[0], v[1], v[2], v[3], width, height).map(|bbox| {
                    AnnotationRecord {
                        image_id: image_id.clone(),
                        category,
                        bbox,
                        source_format: AnnotationFormat::YoloTxt,
                    }
                }),
            );
        }
    }
    Ok(out)
}

fn check_categories(source: &Path, records: &[AnnotationRecord]) -> Result<()> {
    match records.iter().position(|r| r.category.is_empty()) {
        Some(i) => Err(malformed(source, i + 1, "empty category")),
        None => Ok(()),
    }
}

/// Reads the JSON-lines interchange stream (one record per line).
pub fn read_interchange(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord =
            serde_json::from_str(line).map_err(|e| malformed(path, idx + 1, e.to_string()))?;
        if BBox::new(
            record.bbox.x_min,
            record.bbox.y_min,
            record.bbox.x_max,
            record.bbox.y_max,
        )
        .is_none()
        {
            return Err(malformed(path, idx + 1, "degenerate bbox"));
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as JSON lines; float fields use the shortest
/// representation that parses back to the same value.
pub fn write_interchange(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).expect("records always serialize");
        buf.push(b'\n');
    }
    let write = || -> std::io::Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(&buf)?;
        file.sync_all()
    };
    write().map_err(|source| HarmonizeError::Unwritable {
        path: path.to_path_buf(),
        source,
    })
}

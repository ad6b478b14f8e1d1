//! COCO ingestion, pseudo-label corpus files, instruction-pair export and
//! predicate statistics.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::domain::{
    BBox, DomainError, ImageRecord, ObjectInstance, RelationshipTriplet, SceneGraph,
};
use crate::graph::render_graphs;
use crate::jsonfmt;
use crate::prompt::{render_rendered, PromptTemplate, RenderedRecord};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("schema error in {path}{}: {reason}", line.map(|l| format!(" line {l}")).unwrap_or_default())]
    SchemaError {
        path: String,
        line: Option<usize>,
        reason: String,
    },
    #[error("annotation {annotation} references unknown category id {category_id}")]
    DanglingCategoryId { annotation: usize, category_id: i64 },
    #[error("annotation {annotation} references unknown image id {image_id}")]
    DanglingImageId { annotation: usize, image_id: String },
    #[error("entry for image {image_id} was produced with template {found}, expected {expected}")]
    TemplateMismatch {
        image_id: String,
        found: String,
        expected: String,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// COCO ingestion

#[derive(Debug, Clone, Deserialize, PartialEq, Eq, Hash)]
#[serde(untagged)]
enum CocoId {
    Int(i64),
    Str(String),
}

impl CocoId {
    fn as_string(&self) -> String {
        match self {
            CocoId::Int(i) => i.to_string(),
            CocoId::Str(s) => s.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Debug, Deserialize)]
struct CocoImage {
    id: CocoId,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: Option<String>,
}

#[derive(Debug, Deserialize)]
struct CocoAnnotation {
    image_id: CocoId,
    category_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    score: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct CocoCategory {
    id: i64,
    name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutput {
    /// One record per image, in file order.
    pub records: Vec<ImageRecord>,
    /// Images with fewer than two objects; kept but unusable for relations.
    pub few_objects: Vec<String>,
    pub clamped_boxes: usize,
    pub dropped_boxes: usize,
}

impl IngestOutput {
    /// Records with at least two objects.
    pub fn usable(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.objects().len() >= 2)
    }
}

pub fn ingest_coco(path: &Path) -> Result<IngestOutput, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    ingest_coco_str(&text, &path.display().to_string())
}

/// Converts `xywh` boxes to `xyxy`, clamps them to the image and numbers
/// objects `1..k` per image in annotation order.
pub fn ingest_coco_str(text: &str, origin: &str) -> Result<IngestOutput, DatasetError> {
    let schema = |reason: String| DatasetError::SchemaError {
        path: origin.to_string(),
        line: None,
        reason,
    };
    let de = &mut serde_json::Deserializer::from_str(text);
    let coco: CocoFile = serde_path_to_error::deserialize(de).map_err(|e| schema(e.to_string()))?;

    let categories: HashMap<i64, &str> = coco
        .categories
        .iter()
        .map(|c| (c.id, c.name.as_str()))
        .collect();
    let mut per_image: IndexMap<String, Vec<&CocoAnnotation>> = IndexMap::new();
    for img in &coco.images {
        per_image.insert(img.id.as_string(), Vec::new());
    }
    for (i, ann) in coco.annotations.iter().enumerate() {
        if !categories.contains_key(&ann.category_id) {
            return Err(DatasetError::DanglingCategoryId {
                annotation: i,
                category_id: ann.category_id,
            });
        }
        let id = ann.image_id.as_string();
        per_image
            .get_mut(&id)
            .ok_or(DatasetError::DanglingImageId {
                annotation: i,
                image_id: id.clone(),
            })?
            .push(ann);
    }

    let mut out = IngestOutput {
        records: Vec::with_capacity(coco.images.len()),
        few_objects: Vec::new(),
        clamped_boxes: 0,
        dropped_boxes: 0,
    };
    for img in &coco.images {
        let id = img.id.as_string();
        let (w, h) = (img.width as f64, img.height as f64);
        let mut objects = Vec::new();
        for ann in &per_image[&id] {
            let [x, y, bw, bh] = ann.bbox;
            let raw = [x, y, x + bw, y + bh];
            let clamped = [
                raw[0].clamp(0.0, w),
                raw[1].clamp(0.0, h),
                raw[2].clamp(0.0, w),
                raw[3].clamp(0.0, h),
            ];
            let Ok(bbox) = BBox::try_from(clamped) else {
                warn!(image_id = %id, bbox = ?ann.bbox, "dropping box with no area inside the image");
                out.dropped_boxes += 1;
                continue;
            };
            if clamped != raw {
                warn!(image_id = %id, bbox = ?ann.bbox, "clamped box to image bounds");
                out.clamped_boxes += 1;
            }
            let name = categories[&ann.category_id];
            let obj = ObjectInstance::new(name, objects.len() as u32 + 1, bbox)
                .map_err(|e| schema(format!("category {name:?}: {e}")))?
                .with_score(ann.score);
            objects.push(obj);
        }
        if objects.len() < 2 {
            out.few_objects.push(id.clone());
        }
        let record = ImageRecord::new(id, img.width, img.height, objects)
            .map_err(|e| schema(e.to_string()))?
            .with_file_name(img.file_name.clone());
        out.records.push(record);
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct CocoCaptionsFile {
    annotations: Vec<CocoCaption>,
}

#[derive(Debug, Deserialize)]
struct CocoCaption {
    image_id: CocoId,
    caption: String,
}

/// First caption per image from a COCO Captions annotation file.
pub fn load_coco_captions(path: &Path) -> Result<HashMap<String, String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: CocoCaptionsFile =
        serde_json::from_str(&text).map_err(|e| DatasetError::SchemaError {
            path: path.display().to_string(),
            line: None,
            reason: e.to_string(),
        })?;
    let mut map = HashMap::new();
    for c in file.annotations {
        let text = c.caption.trim();
        if !text.is_empty() {
            map.entry(c.image_id.as_string())
                .or_insert_with(|| text.to_string());
        }
    }
    Ok(map)
}

// ---------------------------------------------------------------------------
// JSONL files

pub fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for item in items {
        writeln!(w, "{}", jsonfmt::to_string(item).expect("serializable")).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let de = &mut serde_json::Deserializer::from_str(&line);
        let item = serde_path_to_error::deserialize(de).map_err(|e| DatasetError::SchemaError {
            path: path.display().to_string(),
            line: Some(i + 1),
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Append-only single writer for a JSONL file.
pub struct JsonlAppender {
    writer: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlAppender {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            writer: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn append<T: Serialize>(&mut self, item: &T) -> Result<(), DatasetError> {
        let line = jsonfmt::to_string(item).expect("serializable");
        writeln!(self.writer, "{line}").map_err(io_err(&self.path))?;
        // flushed per line so an interrupted run keeps complete lines only
        self.writer.flush().map_err(io_err(&self.path))
    }
}

pub fn write_records(records: &[ImageRecord], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(records, path)
}

pub fn read_records(path: &Path) -> Result<Vec<ImageRecord>, DatasetError> {
    read_jsonl(path)
}

// ---------------------------------------------------------------------------
// Pseudo-labels

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub template_id: String,
    pub template_checksum: String,
    pub model_name: String,
    pub timestamp: String,
    pub rejected_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelEntry {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<String>,
    pub captions: IndexMap<String, String>,
    pub relationships: Vec<RelationshipTriplet>,
    pub provenance: Provenance,
}

impl PseudoLabelEntry {
    /// `relationships` must come from `graph::validate` against `record`.
    pub fn new(record: &RenderedRecord, accepted: &SceneGraph, provenance: Provenance) -> Self {
        Self {
            image_id: record.image_id.clone(),
            width: record.width,
            height: record.height,
            objects: record.objects.clone(),
            captions: record.captions.clone(),
            relationships: accepted.triplets.clone(),
            provenance,
        }
    }

    pub fn rendered_record(&self) -> RenderedRecord {
        RenderedRecord {
            image_id: self.image_id.clone(),
            width: self.width,
            height: self.height,
            objects: self.objects.clone(),
            captions: self.captions.clone(),
        }
    }

    pub fn scene_graph(&self) -> SceneGraph {
        SceneGraph {
            image_id: self.image_id.clone(),
            triplets: self.relationships.clone(),
        }
    }
}

pub fn write_pseudo_labels(entries: &[PseudoLabelEntry], path: &Path) -> Result<(), DatasetError> {
    write_jsonl(entries, path)
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelEntry>, DatasetError> {
    read_jsonl(path)
}

// ---------------------------------------------------------------------------
// Instruction pairs

/// Alpaca-style record: prompt in `instruction`, empty `input`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

impl InstructionPair {
    pub fn from_entry(
        entry: &PseudoLabelEntry,
        template: &PromptTemplate,
    ) -> Result<Self, DatasetError> {
        if entry.provenance.template_checksum != template.checksum() {
            return Err(DatasetError::TemplateMismatch {
                image_id: entry.image_id.clone(),
                found: entry.provenance.template_checksum.clone(),
                expected: template.checksum().to_string(),
            });
        }
        Ok(Self {
            instruction: template.render_user(&render_rendered(&[entry.rendered_record()])),
            input: String::new(),
            output: render_graphs(&[entry.scene_graph()]),
        })
    }
}

pub fn export_instruction_pairs(
    entries: &[PseudoLabelEntry],
    template: &PromptTemplate,
    path: &Path,
) -> Result<usize, DatasetError> {
    let pairs = entries
        .iter()
        .map(|e| InstructionPair::from_entry(e, template))
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&pairs, path)?;
    Ok(pairs.len())
}

pub fn read_instruction_pairs(path: &Path) -> Result<Vec<InstructionPair>, DatasetError> {
    read_jsonl(path)
}

// ---------------------------------------------------------------------------
// Predicate statistics

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredicateHistogram {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredicateRow {
    pub predicate: String,
    pub count: u64,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub total: u64,
    pub distinct: usize,
    pub images: usize,
    pub head: Vec<PredicateRow>,
    pub tail: Vec<PredicateRow>,
}

pub fn predicate_stats(entries: &[PseudoLabelEntry]) -> PredicateHistogram {
    let mut h = PredicateHistogram::default();
    for t in entries.iter().flat_map(|e| &e.relationships) {
        *h.counts.entry(t.relation.clone()).or_default() += 1;
        h.total += 1;
    }
    h
}

impl PredicateHistogram {
    /// Predicates by descending count, ties by name.
    pub fn ranked(&self) -> Vec<(&str, u64)> {
        let mut v: Vec<(&str, u64)> = self.counts.iter().map(|(k, &c)| (k.as_str(), c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }

    fn row(&self, (p, c): (&str, u64)) -> PredicateRow {
        PredicateRow {
            predicate: p.to_string(),
            count: c,
            share: if self.total == 0 {
                0.0
            } else {
                c as f64 / self.total as f64
            },
        }
    }

    pub fn head(&self, k: usize) -> Vec<PredicateRow> {
        self.ranked()
            .into_iter()
            .take(k)
            .map(|e| self.row(e))
            .collect()
    }

    /// The `k` rarest predicates, rarest first.
    pub fn tail(&self, k: usize) -> Vec<PredicateRow> {
        let mut v: Vec<(&str, u64)> = self.counts.iter().map(|(k, &c)| (k.as_str(), c)).collect();
        v.sort_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(b.0)));
        v.into_iter().take(k).map(|e| self.row(e)).collect()
    }

    pub fn report(&self, k: usize, images: usize) -> StatsReport {
        StatsReport {
            total: self.total,
            distinct: self.counts.len(),
            images,
            head: self.head(k),
            tail: self.tail(k),
        }
    }
}

impl StatsReport {
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "images: {}  triplets: {}  predicates: {}\n",
            self.images, self.total, self.distinct
        );
        for (title, rows) in [("head", &self.head), ("tail", &self.tail)] {
            let width = rows
                .iter()
                .map(|r| r.predicate.len())
                .max()
                .unwrap_or(0)
                .max("predicate".len());
            out.push_str(&format!("\n{title}-{}\n", rows.len()));
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>7}\n",
                "predicate", "count", "share"
            ));
            for r in rows {
                out.push_str(&format!(
                    "{:<width$}  {:>8}  {:>6.2}%\n",
                    r.predicate,
                    r.count,
                    r.share * 100.0
                ));
            }
        }
        out
    }
}

impl From<DomainError> for DatasetError {
    fn from(e: DomainError) -> Self {
        DatasetError::SchemaError {
            path: String::new(),
            line: None,
            reason: e.to_string(),
        }
    }
}

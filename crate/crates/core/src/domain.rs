//! Domain values shared by every pipeline stage.
//!
//! All types here are validated at construction and immutable afterwards, so
//! they can be shared freely between worker threads.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error(
        "invalid box {0:?}: coordinates must be finite, non-negative with x1 < x2 and y1 < y2"
    )]
    InvalidBox([f64; 4]),
    #[error("invalid category {0:?}")]
    InvalidCategory(String),
    #[error("object index must be positive")]
    ZeroIndex,
    #[error("image id must be non-empty")]
    EmptyImageId,
    #[error("image dimensions must be positive, got {width}x{height}")]
    InvalidDimensions { width: u32, height: u32 },
    #[error("object {key} box exceeds image bounds {width}x{height}")]
    OutOfBounds {
        key: String,
        width: u32,
        height: u32,
    },
    #[error("duplicate object key {0}")]
    DuplicateObject(String),
    #[error("unknown object key {0:?}")]
    UnknownObjectKey(String),
    #[error("caption key must contain at least one region")]
    EmptyCaptionKey,
    #[error("caption key lists `global` more than once")]
    RepeatedGlobal,
    #[error("duplicate caption key {0}")]
    DuplicateCaptionKey(String),
    #[error("caption text for {0} is empty")]
    EmptyCaption(String),
    #[error("malformed caption key {key:?}: {reason}")]
    MalformedCaptionKey { key: String, reason: String },
    #[error("triplet source and target are both {0}")]
    SelfLoop(String),
    #[error("triplet relation is empty")]
    EmptyRelation,
    #[error("confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("duplicate triplet ({0}, {1}, {2})")]
    DuplicateTriplet(String, String, String),
}

/// Axis-aligned box in `xyxy` pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, DomainError> {
        let coords = [x1, y1, x2, y2];
        let ok = coords.iter().all(|c| c.is_finite() && *c >= 0.0) && x1 < x2 && y1 < y2;
        if !ok {
            return Err(DomainError::InvalidBox(coords));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Integer rendering, rounding halves up.
    pub fn rounded(&self) -> [i64; 4] {
        self.coords().map(round_half_up)
    }

    /// Renders as `[x1, y1, x2, y2]` with integer coordinates.
    pub fn render(&self) -> String {
        let [a, b, c, d] = self.rounded();
        format!("[{a}, {b}, {c}, {d}]")
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = DomainError;

    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

pub(crate) fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// A localized object: `category.index` plus its box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ObjectWire", into = "ObjectWire")]
pub struct ObjectInstance {
    category: String,
    index: u32,
    bbox: BBox,
    score: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ObjectWire {
    category: String,
    index: u32,
    #[serde(rename = "box")]
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl TryFrom<ObjectWire> for ObjectInstance {
    type Error = DomainError;

    fn try_from(w: ObjectWire) -> Result<Self, Self::Error> {
        let obj = ObjectInstance::new(w.category, w.index, w.bbox)?;
        Ok(obj.with_score(w.score))
    }
}

impl From<ObjectInstance> for ObjectWire {
    fn from(o: ObjectInstance) -> Self {
        ObjectWire {
            category: o.category,
            index: o.index,
            bbox: o.bbox,
            score: o.score,
        }
    }
}

impl ObjectInstance {
    /// Category is trimmed and lowercased before validation.
    pub fn new(category: impl AsRef<str>, index: u32, bbox: BBox) -> Result<Self, DomainError> {
        let category = category.as_ref().trim().to_lowercase();
        if category.is_empty() || category.contains(['.', ':', '[', ']']) {
            return Err(DomainError::InvalidCategory(category));
        }
        if index == 0 {
            return Err(DomainError::ZeroIndex);
        }
        Ok(Self {
            category,
            index,
            bbox,
            score: None,
        })
    }

    /// Attaches a detector score. It is carried through serialization only.
    pub fn with_score(mut self, score: Option<f64>) -> Self {
        self.score = score;
        self
    }

    pub fn category(&self) -> &str {
        &self.category
    }
    pub fn index(&self) -> u32 {
        self.index
    }
    pub fn bbox(&self) -> &BBox {
        &self.bbox
    }
    pub fn score(&self) -> Option<f64> {
        self.score
    }

    pub fn key(&self) -> String {
        render_object_key(self)
    }
}

/// `<category>.<index>`, e.g. `tie.1`.
pub fn render_object_key(obj: &ObjectInstance) -> String {
    format!("{}.{}", obj.category, obj.index)
}

/// Lowercase and trim a key as produced by an LLM.
pub fn normalize_key(key: &str) -> String {
    key.trim().to_lowercase()
}

/// Resolves a (possibly sloppily cased) object key against one image's objects.
pub fn parse_object_key<'a>(
    key: &str,
    objects: &'a [ObjectInstance],
) -> Result<&'a ObjectInstance, DomainError> {
    let wanted = normalize_key(key);
    objects
        .iter()
        .find(|o| o.key() == wanted)
        .ok_or(DomainError::UnknownObjectKey(key.to_string()))
}

/// One captioned region: the whole image or the union hull of an object pair.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Global,
    Union(ObjectInstance, ObjectInstance),
}

impl Region {
    pub fn is_global(&self) -> bool {
        matches!(self, Region::Global)
    }

    /// `global` or `Union(tie.1:[...], tie.2:[...])`.
    pub fn render(&self) -> String {
        match self {
            Region::Global => "global".to_string(),
            Region::Union(a, b) => {
                format!(
                    "Union({}, {})",
                    render_object_entry(a),
                    render_object_entry(b)
                )
            }
        }
    }
}

/// `<key>:[x1, y1, x2, y2]`.
pub fn render_object_entry(obj: &ObjectInstance) -> String {
    format!("{}:{}", obj.key(), obj.bbox.render())
}

/// Regions sharing one caption text.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionKey {
    regions: Vec<Region>,
}

impl CaptionKey {
    pub fn new(regions: Vec<Region>) -> Result<Self, DomainError> {
        if regions.is_empty() {
            return Err(DomainError::EmptyCaptionKey);
        }
        if regions.iter().filter(|r| r.is_global()).count() > 1 {
            return Err(DomainError::RepeatedGlobal);
        }
        Ok(Self { regions })
    }

    pub fn single(region: Region) -> Self {
        Self {
            regions: vec![region],
        }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn has_global(&self) -> bool {
        self.regions.iter().any(Region::is_global)
    }

    pub fn render(&self) -> String {
        self.regions
            .iter()
            .map(Region::render)
            .collect::<Vec<_>>()
            .join(" ; ")
    }

    /// Parses the rendered form back, resolving object keys against `objects`.
    /// Box text inside `Union(...)` is not compared with the objects' boxes.
    pub fn parse(text: &str, objects: &[ObjectInstance]) -> Result<Self, DomainError> {
        let malformed = |reason: &str| DomainError::MalformedCaptionKey {
            key: text.to_string(),
            reason: reason.to_string(),
        };
        let mut regions = Vec::new();
        let mut rest = text.trim();
        loop {
            if let Some(after) = rest.strip_prefix("global") {
                regions.push(Region::Global);
                rest = after;
            } else if let Some(after) = rest.strip_prefix("Union(") {
                let (first, after) =
                    parse_entry_key(after).ok_or_else(|| malformed("bad first entry"))?;
                let after = after
                    .trim_start()
                    .strip_prefix(',')
                    .ok_or_else(|| malformed("expected ','"))?;
                let (second, after) =
                    parse_entry_key(after).ok_or_else(|| malformed("bad second entry"))?;
                let after = after
                    .trim_start()
                    .strip_prefix(')')
                    .ok_or_else(|| malformed("expected ')'"))?;
                let a = parse_object_key(first, objects)?.clone();
                let b = parse_object_key(second, objects)?.clone();
                regions.push(Region::Union(a, b));
                rest = after;
            } else {
                return Err(malformed("expected `global` or `Union(`"));
            }
            let trimmed = rest.trim_start();
            if trimmed.is_empty() {
                break;
            }
            rest = trimmed
                .strip_prefix(';')
                .ok_or_else(|| malformed("expected ';' between regions"))?
                .trim_start();
        }
        CaptionKey::new(regions)
    }
}

/// Reads `key:[...]`, returning the key and the remainder after `]`.
pub(crate) fn parse_entry_key(s: &str) -> Option<(&str, &str)> {
    let colon = s.find(':')?;
    let key = s[..colon].trim();
    let after = s[colon + 1..].trim_start().strip_prefix('[')?;
    let close = after.find(']')?;
    Some((key, &after[close + 1..]))
}

/// Ordered caption map of one image.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CaptionSet {
    entries: Vec<(CaptionKey, String)>,
}

impl CaptionSet {
    pub fn new(entries: Vec<(CaptionKey, String)>) -> Result<Self, DomainError> {
        let mut seen = HashSet::new();
        for (key, text) in &entries {
            let rendered = key.render();
            if text.trim().is_empty() {
                return Err(DomainError::EmptyCaption(rendered));
            }
            if !seen.insert(rendered.clone()) {
                return Err(DomainError::DuplicateCaptionKey(rendered));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(CaptionKey, String)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Total number of regions across all keys.
    pub fn region_count(&self) -> usize {
        self.entries.iter().map(|(k, _)| k.regions().len()).sum()
    }
}

/// Textual stand-in for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    image_id: String,
    width: u32,
    height: u32,
    objects: Vec<ObjectInstance>,
    captions: CaptionSet,
    file_name: Option<String>,
}

impl ImageRecord {
    pub fn new(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        objects: Vec<ObjectInstance>,
    ) -> Result<Self, DomainError> {
        let image_id = image_id.into();
        if image_id.trim().is_empty() {
            return Err(DomainError::EmptyImageId);
        }
        if width == 0 || height == 0 {
            return Err(DomainError::InvalidDimensions { width, height });
        }
        let mut keys = HashSet::new();
        for o in &objects {
            if o.bbox.x2 > width as f64 || o.bbox.y2 > height as f64 {
                return Err(DomainError::OutOfBounds {
                    key: o.key(),
                    width,
                    height,
                });
            }
            if !keys.insert(o.key()) {
                return Err(DomainError::DuplicateObject(o.key()));
            }
        }
        Ok(Self {
            image_id,
            width,
            height,
            objects,
            captions: CaptionSet::default(),
            file_name: None,
        })
    }

    pub fn with_captions(mut self, captions: CaptionSet) -> Self {
        self.captions = captions;
        self
    }

    pub fn with_file_name(mut self, file_name: Option<String>) -> Self {
        self.file_name = file_name;
        self
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn objects(&self) -> &[ObjectInstance] {
        &self.objects
    }
    pub fn captions(&self) -> &CaptionSet {
        &self.captions
    }
    pub fn file_name(&self) -> Option<&str> {
        self.file_name.as_deref()
    }

    pub fn find_object(&self, key: &str) -> Result<&ObjectInstance, DomainError> {
        parse_object_key(key, &self.objects)
    }
}

/// Serialized form of [`ImageRecord`]: captions as a rendered-key map.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageRecordWire {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    pub objects: Vec<ObjectInstance>,
    #[serde(default)]
    pub captions: indexmap::IndexMap<String, String>,
}

impl From<&ImageRecord> for ImageRecordWire {
    fn from(r: &ImageRecord) -> Self {
        ImageRecordWire {
            image_id: r.image_id.clone(),
            width: r.width,
            height: r.height,
            file_name: r.file_name.clone(),
            objects: r.objects.clone(),
            captions: r
                .captions
                .entries()
                .iter()
                .map(|(k, t)| (k.render(), t.clone()))
                .collect(),
        }
    }
}

impl TryFrom<ImageRecordWire> for ImageRecord {
    type Error = DomainError;

    fn try_from(w: ImageRecordWire) -> Result<Self, Self::Error> {
        let record = ImageRecord::new(w.image_id, w.width, w.height, w.objects)?;
        let entries = w
            .captions
            .into_iter()
            .map(|(k, t)| Ok((CaptionKey::parse(&k, &record.objects)?, t)))
            .collect::<Result<Vec<_>, DomainError>>()?;
        let captions = CaptionSet::new(entries)?;
        Ok(record.with_captions(captions).with_file_name(w.file_name))
    }
}

impl Serialize for ImageRecord {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ImageRecordWire::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ImageRecord {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = ImageRecordWire::deserialize(d)?;
        ImageRecord::try_from(wire).map_err(serde::de::Error::custom)
    }
}

/// `(source, relation, target)` over object keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipTriplet {
    pub source: String,
    pub target: String,
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl RelationshipTriplet {
    /// Checked constructor; the relation is normalized with [`normalize_predicate`].
    pub fn new(
        source: impl Into<String>,
        relation: impl AsRef<str>,
        target: impl Into<String>,
    ) -> Result<Self, DomainError> {
        let t = Self {
            source: source.into(),
            target: target.into(),
            relation: normalize_predicate(relation.as_ref()),
            confidence: None,
        };
        t.check()?;
        Ok(t)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Result<Self, DomainError> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(DomainError::InvalidConfidence(confidence));
        }
        self.confidence = Some(confidence);
        Ok(self)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        if normalize_key(&self.source) == normalize_key(&self.target) {
            return Err(DomainError::SelfLoop(self.source.clone()));
        }
        if self.relation.trim().is_empty() {
            return Err(DomainError::EmptyRelation);
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(DomainError::InvalidConfidence(c));
            }
        }
        Ok(())
    }

    pub fn triple(&self) -> (&str, &str, &str) {
        (&self.source, &self.relation, &self.target)
    }
}

impl fmt::Display for RelationshipTriplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.source, self.relation, self.target)
    }
}

/// Lowercase, trim and collapse inner whitespace. No synonym folding.
pub fn normalize_predicate(relation: &str) -> String {
    relation
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relationship list for one image. Parsed graphs may hold invalid triplets
/// until they pass `graph::validate`; see [`SceneGraph::check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    #[serde(rename = "relationships")]
    pub triplets: Vec<RelationshipTriplet>,
}

impl SceneGraph {
    pub fn new(
        image_id: impl Into<String>,
        triplets: Vec<RelationshipTriplet>,
    ) -> Result<Self, DomainError> {
        let sg = Self {
            image_id: image_id.into(),
            triplets,
        };
        sg.check()?;
        Ok(sg)
    }

    pub fn check(&self) -> Result<(), DomainError> {
        if self.image_id.trim().is_empty() {
            return Err(DomainError::EmptyImageId);
        }
        let mut seen = HashSet::new();
        for t in &self.triplets {
            t.check()?;
            if !seen.insert(t.triple()) {
                return Err(DomainError::DuplicateTriplet(
                    t.source.clone(),
                    t.relation.clone(),
                    t.target.clone(),
                ));
            }
        }
        Ok(())
    }
}

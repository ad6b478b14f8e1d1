//! Serialization of image records into the model input block and assembly
//! of the system + user chat prompt.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{render_object_entry, ImageRecord};
use crate::jsonfmt;

pub const INPUT_PLACEHOLDER: &str = "{Input}";
pub const DEFAULT_TEMPLATE_ID: &str = "sgg-v1";
pub const DEFAULT_BATCH_CAP: usize = 4;

const BUILTIN: &[(&str, &str, &str)] = &[(
    "sgg-v1",
    include_str!("../assets/templates/sgg-v1.system.txt"),
    include_str!("../assets/templates/sgg-v1.user.txt"),
)];

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("image {0} has no captions")]
    MissingCaptions(String),
    #[error("batch of {size} images exceeds cap {cap}")]
    BatchTooLarge { size: usize, cap: usize },
    #[error("prompt batch is empty")]
    EmptyBatch,
    #[error("image {0} appears twice in one batch")]
    DuplicateImage(String),
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {id}: {reason}")]
    InvalidTemplate { id: String, reason: String },
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub messages: Vec<ChatMessage>,
    pub image_ids: Vec<String>,
    pub template_checksum: String,
    /// The rendered input block substituted into the user template.
    pub input: String,
}

impl PromptBundle {
    pub fn system(&self) -> &str {
        &self.messages[0].content
    }

    pub fn user(&self) -> &str {
        &self.messages[1].content
    }
}

/// System text and user template with an `{Input}` placeholder.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplate {
    id: String,
    system: String,
    user_prefix: String,
    user_suffix: String,
    checksum: String,
}

impl PromptTemplate {
    pub fn new(id: impl Into<String>, system: &str, user: &str) -> Result<Self, PromptError> {
        let id = id.into();
        let invalid = |reason: &str| PromptError::InvalidTemplate {
            id: id.clone(),
            reason: reason.to_string(),
        };
        let system = strip_final_newline(system);
        let user = strip_final_newline(user);
        if system.trim().is_empty() {
            return Err(invalid("system text is empty"));
        }
        if user.matches(INPUT_PLACEHOLDER).count() != 1 {
            return Err(invalid("user template must contain exactly one {Input}"));
        }
        let (prefix, suffix) = user
            .split_once(INPUT_PLACEHOLDER)
            .expect("placeholder present");
        let mut h = Sha256::new();
        h.update((system.len() as u64).to_le_bytes());
        h.update(system.as_bytes());
        h.update(user.as_bytes());
        let checksum = hex(&h.finalize());
        Ok(Self {
            id,
            system: system.to_string(),
            user_prefix: prefix.to_string(),
            user_suffix: suffix.to_string(),
            checksum,
        })
    }

    pub fn builtin(id: &str) -> Result<Self, PromptError> {
        let (_, system, user) = BUILTIN
            .iter()
            .find(|(name, _, _)| *name == id)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))?;
        Self::new(id, system, user)
    }

    /// Loads `<dir>/<id>.system.txt` and `<dir>/<id>.user.txt`.
    pub fn load(dir: &Path, id: &str) -> Result<Self, PromptError> {
        let read = |suffix: &str| {
            let path = dir.join(format!("{id}.{suffix}.txt"));
            fs::read_to_string(&path).map_err(|source| PromptError::Io {
                path: path.display().to_string(),
                source,
            })
        };
        Self::new(id, &read("system")?, &read("user")?)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    /// Hex SHA-256 over the system text and raw user template.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn render_user(&self, input: &str) -> String {
        format!("{}{}{}", self.user_prefix, input, self.user_suffix)
    }
}

fn strip_final_newline(s: &str) -> &str {
    s.strip_suffix('\n')
        .map(|s| s.strip_suffix('\r').unwrap_or(s))
        .unwrap_or(s)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// An image record reduced to the strings the model sees. Field order is the
/// serialized key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<String>,
    pub captions: IndexMap<String, String>,
}

impl RenderedRecord {
    pub fn from_record(record: &ImageRecord) -> Result<Self, PromptError> {
        if record.captions().is_empty() {
            return Err(PromptError::MissingCaptions(record.image_id().to_string()));
        }
        Ok(Self {
            image_id: record.image_id().to_string(),
            width: record.width(),
            height: record.height(),
            objects: record.objects().iter().map(render_object_entry).collect(),
            captions: record
                .captions()
                .entries()
                .iter()
                .map(|(k, t)| (render_caption_key(k), t.clone()))
                .collect(),
        })
    }
}

pub use crate::domain::render_object_entry as render_entry;

pub fn render_caption_key(key: &crate::domain::CaptionKey) -> String {
    key.render()
}

/// JSON input block: a bare object for one record, a list otherwise.
pub fn render_input(records: &[ImageRecord]) -> Result<String, PromptError> {
    let rendered = records
        .iter()
        .map(RenderedRecord::from_record)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(render_rendered(&rendered))
}

pub fn render_rendered(records: &[RenderedRecord]) -> String {
    let out = match records {
        [single] => jsonfmt::to_string(single),
        many => jsonfmt::to_string(many),
    };
    out.expect("rendered records serialize")
}

pub fn build_prompt(
    records: &[ImageRecord],
    template: &PromptTemplate,
    batch_cap: usize,
) -> Result<PromptBundle, PromptError> {
    if records.is_empty() {
        return Err(PromptError::EmptyBatch);
    }
    if records.len() > batch_cap {
        return Err(PromptError::BatchTooLarge {
            size: records.len(),
            cap: batch_cap,
        });
    }
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.image_id()) {
            return Err(PromptError::DuplicateImage(r.image_id().to_string()));
        }
    }
    let input = render_input(records)?;
    Ok(bundle_from_input(
        template,
        input,
        records.iter().map(|r| r.image_id().to_string()).collect(),
    ))
}

pub(crate) fn bundle_from_input(
    template: &PromptTemplate,
    input: String,
    image_ids: Vec<String>,
) -> PromptBundle {
    PromptBundle {
        messages: vec![
            ChatMessage {
                role: Role::System,
                content: template.system().to_string(),
            },
            ChatMessage {
                role: Role::User,
                content: template.render_user(&input),
            },
        ],
        image_ids,
        template_checksum: template.checksum().to_string(),
        input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{img395890_record, obj};
    use crate::domain::{CaptionKey, CaptionSet, Region};

    fn captioned(record: ImageRecord, text: &str) -> ImageRecord {
        let set = CaptionSet::new(vec![(CaptionKey::single(Region::Global), text.into())]).unwrap();
        record.with_captions(set)
    }

    #[test]
    fn object_entries() {
        assert_eq!(
            render_entry(&obj("tie", 1, [217., 409., 233., 436.])),
            "tie.1:[217, 409, 233, 436]"
        );
        assert_eq!(
            render_entry(&obj("person", 3, [119., 289., 300., 523.])),
            "person.3:[119, 289, 300, 523]"
        );
        assert_eq!(
            render_entry(&obj("a", 1, [1.4, 1.5, 3., 3.])),
            "a.1:[1, 2, 3, 3]"
        );
    }

    #[test]
    fn caption_keys() {
        let t1 = obj("tie", 1, [217., 409., 233., 436.]);
        let t2 = obj("tie", 2, [212., 409., 233., 507.]);
        let k = CaptionKey::single(Region::Union(t1, t2));
        assert_eq!(
            render_caption_key(&k),
            "Union(tie.1:[217, 409, 233, 436], tie.2:[212, 409, 233, 507])"
        );
        assert_eq!(
            render_caption_key(&CaptionKey::single(Region::Global)),
            "global"
        );
    }

    #[test]
    fn missing_captions() {
        assert!(matches!(
            render_input(&[img395890_record()]),
            Err(PromptError::MissingCaptions(_))
        ));
    }

    #[test]
    fn single_bare_multiple_list() {
        let a = captioned(img395890_record(), "x");
        let one = render_input(std::slice::from_ref(&a)).unwrap();
        assert!(one.starts_with(
            "{\"image_id\": \"395890\", \"width\": 480, \"height\": 640, \"objects\": ["
        ));
        let b = captioned(ImageRecord::new("7", 5, 5, vec![]).unwrap(), "y");
        let two = render_input(&[a, b]).unwrap();
        assert!(two.starts_with("[{") && two.ends_with("}]"));
        assert!(two.contains("}, {"));
    }

    #[test]
    fn prompt_shape() {
        let t = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let b = build_prompt(&[captioned(img395890_record(), "x")], &t, 4).unwrap();
        assert_eq!(b.messages.len(), 2);
        assert_eq!(b.messages[0].role, Role::System);
        assert!(b
            .system()
            .starts_with("You are a helpful AI visual assistant."));
        assert!(b
            .user()
            .starts_with("Extract relationship triplets from image data"));
        assert!(b.user().contains("3. Maintain logical consistency"));
        assert!(b.user().ends_with("### Output:"));
        let input_at = b.user().find(&b.input).unwrap();
        assert!(input_at < b.user().rfind("### Output:").unwrap());
        assert_eq!(b.image_ids, vec!["395890"]);
        assert_eq!(b.template_checksum.len(), 64);
    }

    #[test]
    fn batch_limits() {
        let t = PromptTemplate::builtin(DEFAULT_TEMPLATE_ID).unwrap();
        let r = captioned(img395890_record(), "x");
        assert!(matches!(
            build_prompt(&[], &t, 4),
            Err(PromptError::EmptyBatch)
        ));
        assert!(matches!(
            build_prompt(&[r.clone(), r.clone()], &t, 4),
            Err(PromptError::DuplicateImage(_))
        ));
        assert!(matches!(
            build_prompt(&[r.clone(), r], &t, 1),
            Err(PromptError::BatchTooLarge { size: 2, cap: 1 })
        ));
    }

    #[test]
    fn template_validation_and_checksum() {
        assert!(PromptTemplate::new("t", "sys", "no placeholder").is_err());
        assert!(PromptTemplate::new("t", "sys", "{Input}{Input}").is_err());
        assert!(PromptTemplate::new("t", " ", "{Input}").is_err());
        let a = PromptTemplate::new("t", "sys", "in: {Input}\n").unwrap();
        let b = PromptTemplate::new("t", "sys", "in: {Input}!").unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.render_user("X"), "in: X");
        assert!(matches!(
            PromptTemplate::builtin("nope"),
            Err(PromptError::UnknownTemplate(_))
        ));
    }

    #[test]
    fn loads_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("mine.system.txt"), "sys\n").unwrap();
        std::fs::write(dir.path().join("mine.user.txt"), "go {Input} now\n").unwrap();
        let t = PromptTemplate::load(dir.path(), "mine").unwrap();
        assert_eq!(t.system(), "sys");
        assert_eq!(t.render_user("x"), "go x now");
        assert!(PromptTemplate::load(dir.path(), "other").is_err());
    }
}

//! Turning raw completions into validated scene graphs.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{normalize_predicate, ImageRecord, RelationshipTriplet, SceneGraph};
use crate::jsonfmt;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("no parseable JSON value in completion")]
    MalformedJson,
    #[error("schema mismatch at {path}: {reason}")]
    SchemaMismatch { path: String, reason: String },
    #[error("scene graph is for image {graph} but record is {record}")]
    ImageIdMismatch { graph: String, record: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundRole {
    Source,
    Target,
}

/// At most `max_partners` distinct partners per object in `bound_role` for
/// `predicate`. `(wearing, target, 1)` means a thing is worn by one wearer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusivityRule {
    pub predicate: String,
    pub bound_role: BoundRole,
    pub max_partners: usize,
}

impl ExclusivityRule {
    pub fn new(predicate: &str, bound_role: BoundRole, max_partners: usize) -> Option<Self> {
        let predicate = normalize_predicate(predicate);
        if predicate.is_empty() || max_partners == 0 {
            return None;
        }
        Some(Self {
            predicate,
            bound_role,
            max_partners,
        })
    }
}

/// One rider per riding subject, one wearer per worn object.
pub fn default_rules() -> Vec<ExclusivityRule> {
    vec![
        ExclusivityRule::new("riding", BoundRole::Source, 1).expect("valid rule"),
        ExclusivityRule::new("wearing", BoundRole::Target, 1).expect("valid rule"),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RejectReason {
    UnknownObject,
    SelfLoop,
    Duplicate,
    ExclusivityViolation,
    EmptyRelation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub accepted: SceneGraph,
    pub rejected: Vec<(RelationshipTriplet, RejectReason)>,
}

/// Finds the first JSON value embedded in `text`, tolerating code fences,
/// surrounding prose and trailing commas. Objects and arrays of objects are
/// preferred over other bracketed values.
pub fn extract_json_value(text: &str) -> Option<Value> {
    let mut fallback = None;
    let mut resume = 0;
    for (start, ch) in text.char_indices() {
        if start < resume || (ch != '{' && ch != '[') {
            continue;
        }
        let Some(end) = balanced_end(text, start) else {
            continue;
        };
        let candidate = strip_trailing_commas(&text[start..end]);
        let Ok(value) = serde_json::from_str::<Value>(&candidate) else {
            continue;
        };
        // values nested inside a parsed one are not candidates
        resume = end;
        let preferred = match &value {
            Value::Object(_) => true,
            Value::Array(items) => items.iter().all(Value::is_object),
            _ => false,
        };
        if preferred {
            return Some(value);
        }
        fallback.get_or_insert(value);
    }
    fallback
}

/// Byte offset just past the bracket closing the one at `start`.
fn balanced_end(text: &str, start: usize) -> Option<usize> {
    let mut stack = Vec::new();
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in text[start..].char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' | '[' => stack.push(ch),
            '}' | ']' => {
                let open = stack.pop()?;
                if (open == '{') != (ch == '}') {
                    return None;
                }
                if stack.is_empty() {
                    return Some(start + i + 1);
                }
            }
            _ => {}
        }
    }
    None
}

fn strip_trailing_commas(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut in_str = false;
    let mut escaped = false;
    let chars: Vec<char> = s.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            out.push(ch);
            continue;
        }
        if ch == '"' {
            in_str = true;
        }
        if ch == ',' {
            let next = chars[i + 1..].iter().find(|c| !c.is_whitespace());
            if matches!(next, Some(']') | Some('}')) {
                continue;
            }
        }
        out.push(ch);
    }
    out
}

fn mismatch(path: &str, reason: &str) -> GraphError {
    GraphError::SchemaMismatch {
        path: path.to_string(),
        reason: reason.to_string(),
    }
}

fn string_field<'a>(
    obj: &'a serde_json::Map<String, Value>,
    field: &str,
    path: &str,
) -> Result<&'a str, GraphError> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(mismatch(&format!("{path}.{field}"), "expected a string")),
        None => Err(mismatch(&format!("{path}.{field}"), "missing field")),
    }
}

pub fn parse_response(text: &str) -> Result<Vec<SceneGraph>, GraphError> {
    let value = extract_json_value(text).ok_or(GraphError::MalformedJson)?;
    let (items, root_is_list) = match value {
        Value::Array(items) => (items, true),
        v @ Value::Object(_) => (vec![v], false),
        _ => return Err(mismatch("$", "expected an object or a list of objects")),
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            let path = if root_is_list {
                format!("$[{i}]")
            } else {
                "$".to_string()
            };
            parse_graph(item, &path)
        })
        .collect()
}

fn parse_graph(item: &Value, path: &str) -> Result<SceneGraph, GraphError> {
    let obj = item
        .as_object()
        .ok_or_else(|| mismatch(path, "expected an object"))?;
    let image_id = string_field(obj, "image_id", path)?.to_string();
    let rels_path = format!("{path}.relationships");
    let rels = match obj.get("relationships") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(mismatch(&rels_path, "expected a list")),
        None => return Err(mismatch(&rels_path, "missing field")),
    };
    let mut triplets = Vec::with_capacity(rels.len());
    for (j, rel) in rels.iter().enumerate() {
        let rpath = format!("{rels_path}[{j}]");
        let r = rel
            .as_object()
            .ok_or_else(|| mismatch(&rpath, "expected an object"))?;
        let confidence = match r.get("confidence") {
            None | Some(Value::Null) => None,
            Some(Value::Number(n)) => match n.as_f64() {
                Some(c) if (0.0..=1.0).contains(&c) => Some(c),
                _ => {
                    return Err(mismatch(
                        &format!("{rpath}.confidence"),
                        "expected a number in [0, 1]",
                    ))
                }
            },
            Some(_) => {
                return Err(mismatch(
                    &format!("{rpath}.confidence"),
                    "expected a number",
                ))
            }
        };
        triplets.push(RelationshipTriplet {
            source: string_field(r, "source", &rpath)?.trim().to_string(),
            target: string_field(r, "target", &rpath)?.trim().to_string(),
            relation: normalize_predicate(string_field(r, "relation", &rpath)?),
            confidence,
        });
    }
    Ok(SceneGraph { image_id, triplets })
}

/// Applies the validity requirements in listing order. Accepted triplets
/// carry canonical object keys; exclusivity conflicts keep the first one.
pub fn validate(
    sg: &SceneGraph,
    record: &ImageRecord,
    rules: &[ExclusivityRule],
) -> Result<ValidationReport, GraphError> {
    if sg.image_id.trim() != record.image_id() {
        return Err(GraphError::ImageIdMismatch {
            graph: sg.image_id.clone(),
            record: record.image_id().to_string(),
        });
    }
    let mut accepted: Vec<RelationshipTriplet> = Vec::new();
    let mut rejected = Vec::new();
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    // (rule index, bound object key) -> partner keys
    let mut partners: HashMap<(usize, String), HashSet<String>> = HashMap::new();

    for t in &sg.triplets {
        let resolved = record
            .find_object(&t.source)
            .and_then(|s| record.find_object(&t.target).map(|o| (s.key(), o.key())));
        let Ok((source, target)) = resolved else {
            rejected.push((t.clone(), RejectReason::UnknownObject));
            continue;
        };
        if source == target {
            rejected.push((t.clone(), RejectReason::SelfLoop));
            continue;
        }
        let relation = normalize_predicate(&t.relation);
        if relation.is_empty() {
            rejected.push((t.clone(), RejectReason::EmptyRelation));
            continue;
        }
        let triple = (source.clone(), relation.clone(), target.clone());
        if seen.contains(&triple) {
            rejected.push((t.clone(), RejectReason::Duplicate));
            continue;
        }
        let mut claims = Vec::new();
        let mut violates = false;
        for (ri, rule) in rules.iter().enumerate() {
            if rule.predicate != relation {
                continue;
            }
            let (bound, partner) = match rule.bound_role {
                BoundRole::Source => (&source, &target),
                BoundRole::Target => (&target, &source),
            };
            let set = partners.get(&(ri, bound.clone()));
            let already = set.is_some_and(|s| s.contains(partner));
            let count = set.map_or(0, HashSet::len);
            if !already && count >= rule.max_partners {
                violates = true;
                break;
            }
            claims.push(((ri, bound.clone()), partner.clone()));
        }
        if violates {
            rejected.push((t.clone(), RejectReason::ExclusivityViolation));
            continue;
        }
        for (slot, partner) in claims {
            partners.entry(slot).or_default().insert(partner);
        }
        seen.insert(triple);
        accepted.push(RelationshipTriplet {
            source,
            target,
            relation,
            confidence: t.confidence,
        });
    }
    Ok(ValidationReport {
        accepted: SceneGraph {
            image_id: record.image_id().to_string(),
            triplets: accepted,
        },
        rejected,
    })
}

/// Serializes graphs as a JSON list in the response shape `parse_response` reads.
pub fn render_graphs(graphs: &[SceneGraph]) -> String {
    jsonfmt::to_string(graphs).expect("scene graphs serialize")
}

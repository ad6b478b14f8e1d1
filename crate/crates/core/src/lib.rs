//! Scene-graph pseudo-label synthesis.
//!
//! Detection annotations are turned into region captions, serialized into a
//! fixed prompt, sent to a chat-completion model and parsed back into
//! validated scene graphs. The `eval` module scores predicted graphs against
//! ground truth with grounded triplet recall.

pub mod config;
pub mod dataset;
pub mod domain;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod jsonfmt;
pub mod llm;
pub mod narrate;
pub mod pipeline;
pub mod prompt;
pub mod retry;
pub mod roi;

pub use domain::{
    BBox, CaptionKey, CaptionSet, ImageRecord, ObjectInstance, Region, RelationshipTriplet,
    SceneGraph,
};

//! Region-of-interest selection: object pairs with overlapping boxes.
//!
//! Candidate pairs are enumerated in canonical order (first object precedes
//! the second in the record), shuffled with a seeded ChaCha8 stream and
//! truncated. The shuffle is a plain Fisher-Yates pass where each swap index
//! is drawn by rejection sampling over `next_u64`, so the output depends only
//! on the ChaCha8 keystream and is stable across platforms and crate versions.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::domain::{BBox, ObjectInstance, Region};
use crate::geometry::{iou, union_box};

pub const DEFAULT_MAX_ROIS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectPair {
    pub first: ObjectInstance,
    pub second: ObjectInstance,
    pub union: BBox,
}

impl ObjectPair {
    pub fn region(&self) -> Region {
        Region::Union(self.first.clone(), self.second.clone())
    }

    pub fn keys(&self) -> (String, String) {
        (self.first.key(), self.second.key())
    }
}

/// Index pairs `(i, j)`, `i < j`, whose boxes overlap with positive area.
fn candidate_indices(objects: &[ObjectInstance]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..objects.len() {
        for j in i + 1..objects.len() {
            if iou(objects[i].bbox(), objects[j].bbox()) > 0.0 {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn valid_pair_count(objects: &[ObjectInstance]) -> usize {
    candidate_indices(objects).len()
}

pub fn select_rois(objects: &[ObjectInstance], n_max: usize, seed: u64) -> Vec<ObjectPair> {
    let mut pairs = candidate_indices(objects);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle(&mut pairs, &mut rng);
    pairs.truncate(n_max);
    pairs
        .into_iter()
        .map(|(i, j)| {
            let (a, b) = (&objects[i], &objects[j]);
            ObjectPair {
                first: a.clone(),
                second: b.clone(),
                union: union_box(a.bbox(), b.bbox()),
            }
        })
        .collect()
}

fn shuffle<T>(items: &mut [T], rng: &mut impl RngCore) {
    for i in (1..items.len()).rev() {
        let j = uniform_below(rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

/// Unbiased draw from `0..bound` by rejecting the tail of the u64 range.
fn uniform_below(rng: &mut impl RngCore, bound: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let v = rng.next_u64();
        if v < zone {
            return v % bound;
        }
    }
}

/// Per-image seed: first 8 bytes (LE) of SHA-256(global_seed LE || image_id).
pub fn image_seed(global_seed: u64, image_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update(image_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#![allow(dead_code)]

use std::path::PathBuf;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sgsynth::dataset::{Provenance, PseudoLabelEntry};
use sgsynth::prompt::RenderedRecord;
use sgsynth::{
    BBox, CaptionKey, CaptionSet, ImageRecord, ObjectInstance, Region, RelationshipTriplet,
    SceneGraph,
};

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

pub fn fixture(name: &str) -> String {
    std::fs::read_to_string(fixtures_dir().join(name)).expect("fixture present")
}

pub fn bbox(c: [f64; 4]) -> BBox {
    BBox::new(c[0], c[1], c[2], c[3]).unwrap()
}

pub fn obj(cat: &str, idx: u32, c: [f64; 4]) -> ObjectInstance {
    ObjectInstance::new(cat, idx, bbox(c)).unwrap()
}

fn union(a: &ObjectInstance, b: &ObjectInstance) -> Region {
    Region::Union(a.clone(), b.clone())
}

fn captions(entries: Vec<(Vec<Region>, &str)>) -> CaptionSet {
    CaptionSet::new(
        entries
            .into_iter()
            .map(|(regions, text)| (CaptionKey::new(regions).unwrap(), text.to_string()))
            .collect(),
    )
    .unwrap()
}

/// Image 227884 with its three captions.
pub fn img227884_record() -> ImageRecord {
    let t1 = obj("tie", 1, [217., 409., 233., 436.]);
    let t2 = obj("tie", 2, [212., 409., 233., 507.]);
    let p3 = obj("person", 3, [119., 289., 300., 523.]);
    let caps = captions(vec![
        (vec![Region::Global], "a man wearing a suit"),
        (
            vec![union(&t1, &t2)],
            "a purple and black cat sitting on a window ledge",
        ),
        (
            vec![union(&t2, &p3), union(&t1, &p3)],
            "a man in a suit and tie sitting at a table with a laptop",
        ),
    ]);
    ImageRecord::new("227884", 444, 640, vec![t1, t2, p3])
        .unwrap()
        .with_captions(caps)
}

pub fn img395890_objects() -> Vec<ObjectInstance> {
    vec![
        obj("tie", 1, [269., 189., 293., 234.]),
        obj("person", 2, [224., 60., 480., 483.]),
        obj("book", 3, [257., 416., 368., 492.]),
        obj("book", 4, [246., 455., 375., 534.]),
        obj("book", 5, [228., 485., 391., 583.]),
        obj("person", 6, [57., 143., 254., 638.]),
    ]
}

/// Image 395890 with its seven caption keys in worked-example order.
pub fn img395890_record() -> ImageRecord {
    let o = img395890_objects();
    let (t1, p2, b3, b4, b5, p6) = (&o[0], &o[1], &o[2], &o[3], &o[4], &o[5]);
    let caps = captions(vec![
        (
            vec![union(p2, b3)],
            "a man and a woman standing next to a cake",
        ),
        (vec![union(b3, b4)], "a cake made of books"),
        (
            vec![union(b3, b5)],
            "a man standing next to a cake that is made of books",
        ),
        (vec![union(b4, b5)], "a cake made out of books"),
        (vec![union(b5, p6)], "a man and a woman"),
        (
            vec![union(b4, p6)],
            "a man and a woman standing in front of a cake",
        ),
        (
            vec![Region::Global, union(p2, p6), union(t1, p2), union(p2, b4)],
            "a man and woman standing next to a cake",
        ),
    ]);
    ImageRecord::new("395890", 480, 640, o.clone())
        .unwrap()
        .with_captions(caps)
}

/// The nine overlapping pairs of image 395890, worked out by hand.
pub fn img395890_pairs() -> Vec<(&'static str, &'static str)> {
    vec![
        ("tie.1", "person.2"),
        ("person.2", "book.3"),
        ("person.2", "book.4"),
        ("person.2", "person.6"),
        ("book.3", "book.4"),
        ("book.3", "book.5"),
        ("book.4", "book.5"),
        ("book.4", "person.6"),
        ("book.5", "person.6"),
    ]
}

// ---------------------------------------------------------------------------
// Unit-pixel rasterization oracle for integer boxes.

fn cells(b: [i64; 4]) -> impl Iterator<Item = (i64, i64)> {
    (b[0]..b[2]).flat_map(move |x| (b[1]..b[3]).map(move |y| (x, y)))
}

pub fn raster_area(b: [i64; 4]) -> u64 {
    cells(b).count() as u64
}

pub fn raster_intersection(a: [i64; 4], b: [i64; 4]) -> u64 {
    cells(a)
        .filter(|&(x, y)| x >= b[0] && x < b[2] && y >= b[1] && y < b[3])
        .count() as u64
}

pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let i = raster_intersection(a, b);
    let u = raster_area(a) + raster_area(b) - i;
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn random_int_box(rng: &mut ChaCha8Rng, w: i64, h: i64) -> [i64; 4] {
    let x1 = rng.gen_range(0..w - 1);
    let y1 = rng.gen_range(0..h - 1);
    let x2 = rng.gen_range(x1 + 1..=w);
    let y2 = rng.gen_range(y1 + 1..=h);
    [x1, y1, x2, y2]
}

const CATEGORIES: [&str; 6] = ["person", "tie", "book", "dog", "car", "traffic light"];
const PREDICATES: [&str; 7] = [
    "near",
    "on",
    "wearing",
    "holding",
    "riding",
    "next to",
    "in front of",
];

/// Up to `max_n` objects with random integer boxes inside a `w`×`h` image,
/// numbered 1..=n in order.
pub fn random_objects(rng: &mut ChaCha8Rng, max_n: usize, w: i64, h: i64) -> Vec<ObjectInstance> {
    let n = rng.gen_range(0..=max_n);
    (0..n)
        .map(|i| {
            let b = random_int_box(rng, w, h);
            let cat = CATEGORIES.choose(rng).unwrap();
            obj(cat, i as u32 + 1, b.map(|v| v as f64))
        })
        .collect()
}

fn random_text(rng: &mut ChaCha8Rng, salt: usize) -> String {
    const WORDS: [&str; 10] = [
        "a",
        "man",
        "\"quoted\"",
        "caf\u{e9}",
        "back\\slash",
        "tab\there",
        "cake",
        "\u{1f382}",
        "next",
        "to",
    ];
    let n = rng.gen_range(1..6);
    let mut words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let tag = format!("#{salt}");
    words.push(&tag);
    words.join(" ")
}

/// A valid pseudo-label entry with random objects, captions and relationships.
pub fn random_entry(rng: &mut ChaCha8Rng, image_id: &str) -> PseudoLabelEntry {
    let (w, h) = (rng.gen_range(10..800), rng.gen_range(10..800));
    let mut objects = random_objects(rng, 6, w, h);
    while objects.len() < 2 {
        objects = random_objects(rng, 6, w, h);
    }
    let mut cap_entries = vec![(vec![Region::Global], random_text(rng, 0))];
    for k in 0..rng.gen_range(0..4) {
        let a = rng.gen_range(0..objects.len());
        let mut b = rng.gen_range(0..objects.len());
        if a == b {
            b = (a + 1) % objects.len();
        }
        let region = Region::Union(objects[a].clone(), objects[b].clone());
        if cap_entries.iter().all(|(rs, _)| !rs.contains(&region)) {
            cap_entries.push((vec![region], random_text(rng, k + 1)));
        }
    }
    let set = CaptionSet::new(
        cap_entries
            .into_iter()
            .map(|(r, t)| (CaptionKey::new(r).unwrap(), t))
            .collect(),
    )
    .unwrap();
    let record = ImageRecord::new(image_id, w as u32, h as u32, objects.clone())
        .unwrap()
        .with_captions(set);

    let mut triplets: Vec<RelationshipTriplet> = Vec::new();
    for _ in 0..rng.gen_range(0..8) {
        let a = objects.choose(rng).unwrap().key();
        let b = objects.choose(rng).unwrap().key();
        let rel = PREDICATES.choose(rng).unwrap();
        let Ok(mut t) = RelationshipTriplet::new(a, rel, b) else {
            continue;
        };
        if rng.gen_bool(0.3) {
            t = t.with_confidence(rng.gen_range(0.0..=1.0)).unwrap();
        }
        if triplets.iter().all(|x| x.triple() != t.triple()) {
            triplets.push(t);
        }
    }
    let sg = SceneGraph::new(image_id, triplets).unwrap();
    let rendered = RenderedRecord::from_record(&record).unwrap();
    PseudoLabelEntry::new(
        &rendered,
        &sg,
        Provenance {
            template_id: "sgg-v1".into(),
            template_checksum: sgsynth::prompt::PromptTemplate::builtin("sgg-v1")
                .unwrap()
                .checksum()
                .to_string(),
            model_name: "gpt-4".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
            rejected_count: rng.gen_range(0..3),
        },
    )
}

pub fn random_corpus(rng: &mut ChaCha8Rng, max_images: usize) -> Vec<PseudoLabelEntry> {
    let n = rng.gen_range(0..=max_images);
    (0..n)
        .map(|i| random_entry(rng, &format!("{:06}", i * 7 + 1)))
        .collect()
}

/// A COCO-format detection file with `n` images of 2..=6 objects each.
pub fn toy_coco(rng: &mut ChaCha8Rng, n: usize) -> String {
    let categories: Vec<_> = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, c)| json!({"id": i + 1, "name": c}))
        .collect();
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    for i in 0..n {
        let (w, h) = (rng.gen_range(50..640), rng.gen_range(50..640));
        let id = 1000 + i;
        images
            .push(json!({"id": id, "width": w, "height": h, "file_name": format!("{id:012}.jpg")}));
        for _ in 0..rng.gen_range(2..=6) {
            let b = random_int_box(rng, w, h);
            annotations.push(json!({
                "id": annotations.len() + 1,
                "image_id": id,
                "category_id": rng.gen_range(1..=CATEGORIES.len()),
                "bbox": [b[0], b[1], b[2] - b[0], b[3] - b[1]],
            }));
        }
    }
    serde_json::to_string(
        &json!({"images": images, "annotations": annotations, "categories": categories}),
    )
    .unwrap()
}

/// Caption texts keyed by rendered key, in order.
pub fn caption_map(record: &ImageRecord) -> IndexMap<String, String> {
    record
        .captions()
        .entries()
        .iter()
        .map(|(k, t)| (k.render(), t.clone()))
        .collect()
}

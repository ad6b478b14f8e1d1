//! Holistic and region-specific narratives.
//!
//! One caption is requested for the whole image and one per selected object
//! pair (cropped to the pair's union box). Identical captions are then merged
//! into multi-region keys.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::domain::{BBox, CaptionKey, CaptionSet, ImageRecord, Region};
use crate::retry::{classify_status, AttemptClass, RetryPolicy};
use crate::roi::ObjectPair;

#[derive(Debug, Error)]
pub enum NarrateError {
    #[error("captioning service unavailable for {region} after {attempts} attempt(s): {reason}")]
    CaptionServiceUnavailable {
        region: String,
        attempts: u32,
        reason: String,
    },
    #[error("captioning service rejected request for {region} with status {status}: {body}")]
    CaptionRejected {
        region: String,
        status: u16,
        body: String,
    },
    #[error("crop {crop:?} has no area inside the {width}x{height} image")]
    DegenerateCrop {
        crop: [f64; 4],
        width: u32,
        height: u32,
    },
    #[error("invalid captioner endpoint: {0}")]
    InvalidEndpoint(String),
    #[error("no dataset caption for image {0}")]
    MissingDatasetCaption(String),
}

/// Error reported by a [`Captioner`] for one region.
#[derive(Debug, Clone, Error)]
pub enum CaptionError {
    #[error("unavailable after {attempts} attempt(s): {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

/// Wire body of a captioning request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRequest {
    pub image_uri: String,
    pub crop: Option<BBox>,
}

impl CaptionRequest {
    pub fn whole(image_uri: impl Into<String>) -> Self {
        Self {
            image_uri: image_uri.into(),
            crop: None,
        }
    }

    /// Crop request clamped to the image bounds.
    pub fn cropped(
        image_uri: impl Into<String>,
        crop: &BBox,
        width: u32,
        height: u32,
    ) -> Result<Self, NarrateError> {
        let (w, h) = (width as f64, height as f64);
        let clamped = BBox::new(
            crop.x1().clamp(0.0, w),
            crop.y1().clamp(0.0, h),
            crop.x2().clamp(0.0, w),
            crop.y2().clamp(0.0, h),
        )
        .map_err(|_| NarrateError::DegenerateCrop {
            crop: crop.coords(),
            width,
            height,
        })?;
        Ok(Self {
            image_uri: image_uri.into(),
            crop: Some(clamped),
        })
    }
}

#[derive(Debug, Deserialize)]
struct CaptionResponse {
    caption: String,
}

#[derive(Debug, Clone)]
pub struct CaptionerEndpoint {
    pub base_url: String,
    pub timeout: Duration,
    pub max_concurrency: usize,
    pub auth_token: Option<String>,
    pub retry: RetryPolicy,
}

impl Default for CaptionerEndpoint {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080".into(),
            timeout: Duration::from_secs(60),
            max_concurrency: 4,
            auth_token: None,
            retry: RetryPolicy::default(),
        }
    }
}

/// Which image/region a caption is being requested for.
#[derive(Debug, Clone)]
pub struct RegionContext<'a> {
    pub image_id: &'a str,
    pub region: &'a Region,
}

pub trait Captioner: Send + Sync {
    fn caption(
        &self,
        ctx: &RegionContext<'_>,
        request: &CaptionRequest,
    ) -> Result<String, CaptionError>;
}

/// HTTP client for `POST {base_url}/caption`.
pub struct HttpCaptioner {
    client: reqwest::blocking::Client,
    url: String,
    endpoint: CaptionerEndpoint,
}

impl HttpCaptioner {
    pub fn new(endpoint: CaptionerEndpoint) -> Result<Self, NarrateError> {
        if endpoint.max_concurrency == 0 {
            return Err(NarrateError::InvalidEndpoint(
                "max_concurrency must be >= 1".into(),
            ));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(endpoint.timeout)
            .build()
            .map_err(|e| NarrateError::InvalidEndpoint(e.to_string()))?;
        let url = format!("{}/caption", endpoint.base_url.trim_end_matches('/'));
        Ok(Self {
            client,
            url,
            endpoint,
        })
    }

    fn attempt(&self, request: &CaptionRequest) -> (AttemptClass, Result<String, String>, u16) {
        let mut builder = self.client.post(&self.url).json(request);
        if let Some(token) = &self.endpoint.auth_token {
            builder = builder.bearer_auth(token);
        }
        match builder.send() {
            Err(e) => (AttemptClass::Retryable, Err(e.to_string()), 0),
            Ok(resp) => {
                let status = resp.status().as_u16();
                let body = resp.text().unwrap_or_default();
                match classify_status(status) {
                    AttemptClass::Success => match serde_json::from_str::<CaptionResponse>(&body) {
                        Ok(r) => (AttemptClass::Success, Ok(r.caption), status),
                        Err(e) => (
                            AttemptClass::Fatal,
                            Err(format!("bad response body: {e}")),
                            status,
                        ),
                    },
                    class => (class, Err(body), status),
                }
            }
        }
    }
}

impl Captioner for HttpCaptioner {
    fn caption(
        &self,
        _ctx: &RegionContext<'_>,
        request: &CaptionRequest,
    ) -> Result<String, CaptionError> {
        let policy = self.endpoint.retry;
        let mut last = String::new();
        for attempt in 0..=policy.max_retries {
            let (class, result, status) = self.attempt(request);
            match (class, result) {
                (AttemptClass::Success, Ok(text)) => return Ok(text),
                (AttemptClass::Fatal, Err(body)) => {
                    return Err(CaptionError::Rejected { status, body })
                }
                (_, Err(reason)) => last = reason,
                (_, Ok(_)) => unreachable!("only successes carry text"),
            }
            if attempt < policy.max_retries {
                thread::sleep(policy.backoff(attempt));
            }
        }
        Err(CaptionError::Unavailable {
            attempts: policy.max_retries + 1,
            reason: last,
        })
    }
}

/// Deterministic offline captioner: `caption of <image_id>/<region>`.
#[derive(Debug, Default, Clone)]
pub struct MockCaptioner;

impl Captioner for MockCaptioner {
    fn caption(
        &self,
        ctx: &RegionContext<'_>,
        _request: &CaptionRequest,
    ) -> Result<String, CaptionError> {
        Ok(format!(
            "caption of {}/{}",
            ctx.image_id,
            ctx.region.render()
        ))
    }
}

/// Looks captions up by rendered region; unknown regions get an empty caption.
#[derive(Debug, Default, Clone)]
pub struct FixedCaptioner {
    pub captions: HashMap<String, String>,
}

impl Captioner for FixedCaptioner {
    fn caption(
        &self,
        ctx: &RegionContext<'_>,
        _request: &CaptionRequest,
    ) -> Result<String, CaptionError> {
        Ok(self
            .captions
            .get(&ctx.region.render())
            .cloned()
            .unwrap_or_default())
    }
}

/// Where the holistic caption comes from.
#[derive(Debug, Clone, Default)]
pub enum GlobalCaptionSource {
    #[default]
    Service,
    /// Pre-existing captions (e.g. COCO Captions) keyed by image id.
    Dataset(HashMap<String, String>),
}

#[derive(Debug, Clone)]
pub struct NarrateOptions {
    pub max_concurrency: usize,
    pub global_source: GlobalCaptionSource,
    /// Directory or URL prefix joined with each record's file name.
    pub image_root: Option<String>,
}

impl Default for NarrateOptions {
    fn default() -> Self {
        Self {
            max_concurrency: 4,
            global_source: GlobalCaptionSource::Service,
            image_root: None,
        }
    }
}

pub fn image_uri(record: &ImageRecord, image_root: Option<&str>) -> String {
    let name = record.file_name().unwrap_or(record.image_id());
    match image_root {
        Some(root) => format!("{}/{}", root.trim_end_matches('/'), name),
        None => name.to_string(),
    }
}

/// Merges regions whose trimmed captions are byte-identical. Keys appear in
/// order of first appearance; within a key `global` comes first, then the
/// other regions in input order. Blank texts are skipped.
pub fn group_by_caption(entries: Vec<(Region, String)>) -> CaptionSet {
    let mut order: Vec<(String, Vec<Region>)> = Vec::new();
    let mut slot: HashMap<String, usize> = HashMap::new();
    for (region, text) in entries {
        let text = text.trim().to_string();
        if text.is_empty() {
            continue;
        }
        match slot.get(&text) {
            Some(&i) => order[i].1.push(region),
            None => {
                slot.insert(text.clone(), order.len());
                order.push((text, vec![region]));
            }
        }
    }
    let grouped = order
        .into_iter()
        .map(|(text, mut regions)| {
            if let Some(pos) = regions.iter().position(Region::is_global) {
                let g = regions.remove(pos);
                regions.insert(0, g);
            }
            let key = CaptionKey::new(regions).expect("grouped regions are non-empty");
            (key, text)
        })
        .collect();
    CaptionSet::new(grouped).expect("grouped captions have distinct keys and texts")
}

struct Job<'a> {
    image: usize,
    region: Region,
    request: Option<CaptionRequest>,
    preset: Option<String>,
    record: &'a ImageRecord,
}

/// Narrates many images. Requests run on at most `opts.max_concurrency`
/// threads and results are reassembled in region order per image.
pub fn narrate_many(
    items: &[(ImageRecord, Vec<ObjectPair>)],
    captioner: &dyn Captioner,
    opts: &NarrateOptions,
) -> Vec<Result<CaptionSet, NarrateError>> {
    let mut results: Vec<Result<Vec<(Region, String)>, NarrateError>> =
        Vec::with_capacity(items.len());
    let mut jobs = Vec::new();
    for (i, (record, pairs)) in items.iter().enumerate() {
        match build_jobs(i, record, pairs, opts) {
            Ok(js) => {
                jobs.extend(js);
                results.push(Ok(Vec::new()));
            }
            Err(e) => results.push(Err(e)),
        }
    }

    let outcomes = run_bounded(&jobs, opts.max_concurrency.max(1), |job| {
        if let Some(text) = &job.preset {
            return Ok(text.clone());
        }
        let ctx = RegionContext {
            image_id: job.record.image_id(),
            region: &job.region,
        };
        captioner.caption(&ctx, job.request.as_ref().expect("request present"))
    });

    for (job, outcome) in jobs.iter().zip(outcomes) {
        let Ok(entries) = &mut results[job.image] else {
            continue;
        };
        let rendered = job.region.render();
        match outcome {
            Ok(text) if text.trim().is_empty() => {
                warn!(image_id = job.record.image_id(), region = %rendered, "empty caption; region dropped");
            }
            Ok(text) => entries.push((job.region.clone(), text)),
            Err(CaptionError::Unavailable { attempts, reason }) => {
                results[job.image] = Err(NarrateError::CaptionServiceUnavailable {
                    region: rendered,
                    attempts,
                    reason,
                })
            }
            Err(CaptionError::Rejected { status, body }) => {
                results[job.image] = Err(NarrateError::CaptionRejected {
                    region: rendered,
                    status,
                    body,
                })
            }
        }
    }
    results
        .into_iter()
        .map(|r| r.map(group_by_caption))
        .collect()
}

pub fn generate_narratives(
    record: &ImageRecord,
    pairs: &[ObjectPair],
    captioner: &dyn Captioner,
    opts: &NarrateOptions,
) -> Result<CaptionSet, NarrateError> {
    let items = [(record.clone(), pairs.to_vec())];
    narrate_many(&items, captioner, opts)
        .pop()
        .expect("one result per item")
}

fn build_jobs<'a>(
    image: usize,
    record: &'a ImageRecord,
    pairs: &[ObjectPair],
    opts: &NarrateOptions,
) -> Result<Vec<Job<'a>>, NarrateError> {
    let uri = image_uri(record, opts.image_root.as_deref());
    let global = match &opts.global_source {
        GlobalCaptionSource::Service => Job {
            image,
            region: Region::Global,
            request: Some(CaptionRequest::whole(uri.clone())),
            preset: None,
            record,
        },
        GlobalCaptionSource::Dataset(map) => Job {
            image,
            region: Region::Global,
            request: None,
            preset: Some(map.get(record.image_id()).cloned().ok_or_else(|| {
                NarrateError::MissingDatasetCaption(record.image_id().to_string())
            })?),
            record,
        },
    };
    let mut jobs = vec![global];
    for pair in pairs {
        let request =
            CaptionRequest::cropped(uri.clone(), &pair.union, record.width(), record.height())?;
        jobs.push(Job {
            image,
            region: pair.region(),
            request: Some(request),
            preset: None,
            record,
        });
    }
    Ok(jobs)
}

/// Maps `f` over `items` with at most `workers` calls in flight, preserving order.
pub(crate) fn run_bounded<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    thread::scope(|s| {
        for _ in 0..workers.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{img395890_objects, img395890_record, obj};
    use crate::roi::select_rois;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn union(a: usize, b: usize) -> Region {
        let o = img395890_objects();
        Region::Union(o[a].clone(), o[b].clone())
    }

    #[test]
    fn groups_img395890_merged_key() {
        let text = "a man and woman standing next to a cake";
        let set = group_by_caption(vec![
            (Region::Global, text.into()),
            (union(1, 5), text.into()),
            (union(0, 1), text.into()),
            (union(1, 3), text.into()),
        ]);
        assert_eq!(set.len(), 1);
        assert_eq!(
            set.entries()[0].0.render(),
            "global ; Union(person.2:[224, 60, 480, 483], person.6:[57, 143, 254, 638]) ; \
             Union(tie.1:[269, 189, 293, 234], person.2:[224, 60, 480, 483]) ; \
             Union(person.2:[224, 60, 480, 483], book.4:[246, 455, 375, 534])"
        );
    }

    #[test]
    fn grouping_identity_and_partial_merge() {
        let distinct = group_by_caption(vec![
            (Region::Global, "a".into()),
            (union(0, 1), "b".into()),
            (union(1, 2), "c".into()),
        ]);
        assert_eq!(distinct.len(), 3);
        assert!(distinct
            .entries()
            .iter()
            .all(|(k, _)| k.regions().len() == 1));

        let partial = group_by_caption(vec![
            (Region::Global, "g".into()),
            (union(0, 1), "same".into()),
            (union(1, 2), "same".into()),
        ]);
        assert_eq!(partial.len(), 2);
        assert_eq!(partial.entries()[1].0.regions().len(), 2);
    }

    #[test]
    fn global_moves_first_within_key() {
        let set = group_by_caption(vec![
            (union(0, 1), "x".into()),
            (Region::Global, "x".into()),
        ]);
        assert!(set.entries()[0].0.regions()[0].is_global());
    }

    #[test]
    fn grouping_is_idempotent() {
        let entries = vec![
            (Region::Global, "x".into()),
            (union(0, 1), "y".into()),
            (union(1, 2), "x".into()),
        ];
        let once = group_by_caption(entries);
        let flat: Vec<(Region, String)> = once
            .entries()
            .iter()
            .flat_map(|(k, t)| k.regions().iter().map(move |r| (r.clone(), t.clone())))
            .collect();
        assert_eq!(group_by_caption(flat), once);
        assert_eq!(once.region_count(), 3);
    }

    #[test]
    fn img395890_narratives() {
        let record = img395890_record();
        let pairs = select_rois(record.objects(), 15, 11);
        let cake = "a man and woman standing next to a cake";
        let mut captions: HashMap<String, String> = [
            (union(1, 2), "a man and a woman standing next to a cake"),
            (union(2, 3), "a cake made of books"),
            (
                union(2, 4),
                "a man standing next to a cake that is made of books",
            ),
            (union(3, 4), "a cake made out of books"),
            (union(4, 5), "a man and a woman"),
            (union(3, 5), "a man and a woman standing in front of a cake"),
            (union(1, 5), cake),
            (union(0, 1), cake),
            (union(1, 3), cake),
        ]
        .into_iter()
        .map(|(r, t)| (r.render(), t.to_string()))
        .collect();
        captions.insert("global".into(), cake.into());
        let set = generate_narratives(
            &record,
            &pairs,
            &FixedCaptioner { captions },
            &NarrateOptions::default(),
        )
        .unwrap();
        assert_eq!(set.len(), 7);
        assert_eq!(set.region_count(), 10);
        let merged = &set.entries()[0];
        assert_eq!(merged.1, cake);
        assert_eq!(merged.0.regions().len(), 4);
        assert!(merged.0.regions()[0].is_global());
    }

    #[test]
    fn zero_pairs_gives_global_only() {
        let set = generate_narratives(
            &img395890_record(),
            &[],
            &MockCaptioner,
            &NarrateOptions::default(),
        )
        .unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.entries()[0].1, "caption of 395890/global");
    }

    #[test]
    fn mock_never_merges() {
        let record = img395890_record();
        let pairs = select_rois(record.objects(), 16, 0);
        let set = generate_narratives(&record, &pairs, &MockCaptioner, &NarrateOptions::default())
            .unwrap();
        assert_eq!(set.len(), pairs.len() + 1);
        // Region order is preserved regardless of completion order.
        for (entry, pair) in set.entries()[1..].iter().zip(&pairs) {
            assert_eq!(entry.0.regions()[0], pair.region());
        }
    }

    struct Flaky;
    impl Captioner for Flaky {
        fn caption(
            &self,
            ctx: &RegionContext<'_>,
            _r: &CaptionRequest,
        ) -> Result<String, CaptionError> {
            if ctx.region.is_global() {
                Ok("   ".into())
            } else {
                Ok("region".into())
            }
        }
    }

    #[test]
    fn empty_caption_dropped() {
        let record = img395890_record();
        let pairs = select_rois(record.objects(), 2, 0);
        let set = generate_narratives(&record, &pairs, &Flaky, &NarrateOptions::default()).unwrap();
        assert_eq!(set.len(), 1);
        assert!(!set.entries()[0].0.has_global());
    }

    struct Down;
    impl Captioner for Down {
        fn caption(
            &self,
            _c: &RegionContext<'_>,
            _r: &CaptionRequest,
        ) -> Result<String, CaptionError> {
            Err(CaptionError::Unavailable {
                attempts: 4,
                reason: "503".into(),
            })
        }
    }

    #[test]
    fn service_failure_propagates() {
        let err = generate_narratives(&img395890_record(), &[], &Down, &NarrateOptions::default())
            .unwrap_err();
        assert!(matches!(
            err,
            NarrateError::CaptionServiceUnavailable { attempts: 4, .. }
        ));
    }

    #[test]
    fn dataset_global_source() {
        let opts = NarrateOptions {
            global_source: GlobalCaptionSource::Dataset(
                [("395890".to_string(), "from coco".to_string())].into(),
            ),
            ..Default::default()
        };
        let set = generate_narratives(&img395890_record(), &[], &Down, &opts).unwrap();
        assert_eq!(set.entries()[0].1, "from coco");
        let other = ImageRecord::new("1", 10, 10, vec![]).unwrap();
        assert!(matches!(
            generate_narratives(&other, &[], &Down, &opts),
            Err(NarrateError::MissingDatasetCaption(_))
        ));
    }

    #[test]
    fn crops_clamp_and_reject_degenerate() {
        let b = BBox::new(5., 5., 50., 50.).unwrap();
        let r = CaptionRequest::cropped("img", &b, 20, 30).unwrap();
        assert_eq!(r.crop.unwrap().coords(), [5., 5., 20., 30.]);
        let outside = BBox::new(25., 5., 50., 50.).unwrap();
        assert!(matches!(
            CaptionRequest::cropped("img", &outside, 20, 30),
            Err(NarrateError::DegenerateCrop { .. })
        ));
    }

    #[test]
    fn request_wire_shape() {
        let whole = serde_json::to_value(CaptionRequest::whole("a.jpg")).unwrap();
        assert_eq!(
            whole,
            serde_json::json!({"image_uri": "a.jpg", "crop": null})
        );
        let b = BBox::new(1., 2., 3., 4.).unwrap();
        let crop =
            serde_json::to_value(CaptionRequest::cropped("a.jpg", &b, 10, 10).unwrap()).unwrap();
        assert_eq!(crop["crop"], serde_json::json!([1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn image_uri_joins_root() {
        let r = img395890_record().with_file_name(Some("x.jpg".into()));
        assert_eq!(image_uri(&r, Some("/data/")), "/data/x.jpg");
        assert_eq!(image_uri(&img395890_record(), None), "395890");
    }

    #[test]
    fn bounded_runner_respects_limit() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..40).collect();
        let out = run_bounded(&items, 3, |&i| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            thread::sleep(Duration::from_millis(2));
            live.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, items.iter().map(|i| i * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn many_images_keep_their_own_regions() {
        let a = ImageRecord::new(
            "a",
            100,
            100,
            vec![
                obj("x", 1, [0., 0., 10., 10.]),
                obj("y", 2, [5., 5., 20., 20.]),
            ],
        )
        .unwrap();
        let b = ImageRecord::new("b", 100, 100, vec![]).unwrap();
        let pa = select_rois(a.objects(), 4, 0);
        let out = narrate_many(
            &[(a, pa), (b, vec![])],
            &MockCaptioner,
            &NarrateOptions {
                max_concurrency: 8,
                ..Default::default()
            },
        );
        assert_eq!(out[0].as_ref().unwrap().len(), 2);
        assert_eq!(
            out[1].as_ref().unwrap().entries()[0].1,
            "caption of b/global"
        );
    }
}

//! End-to-end synthesis: records -> narratives -> prompts -> completions ->
//! validated pseudo-label corpus.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;
use tracing::{info, warn};

use crate::config::{CaptionSource, ConfigError, PipelineConfig};
use crate::dataset::{
    export_instruction_pairs, ingest_coco, load_coco_captions, read_pseudo_labels, read_records,
    write_pseudo_labels, DatasetError, JsonlAppender, Provenance, PseudoLabelEntry,
};
use crate::domain::ImageRecord;
use crate::graph::{parse_response, validate, ExclusivityRule};
use crate::llm::LlmClient;
use crate::narrate::{
    narrate_many, run_bounded, Captioner, GlobalCaptionSource, NarrateError, NarrateOptions,
};
use crate::prompt::{build_prompt, PromptError, PromptTemplate, RenderedRecord};
use crate::roi::{image_seed, select_rois};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("no input: set paths.records or paths.annotations")]
    NoInput,
    #[error("no output: set paths.output_corpus")]
    NoOutput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Narrate,
    Prompt,
    Llm,
    Parse,
    Validate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub stage: Stage,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SynthSummary {
    pub images: usize,
    pub already_done: usize,
    pub written: usize,
    pub triplets: usize,
    pub rejected: usize,
    pub corpus_size: usize,
    pub instruction_pairs: Option<usize>,
    pub failures: Vec<ImageFailure>,
}

#[derive(Debug, Clone)]
pub struct SynthSettings {
    pub seed: u64,
    pub n_max_rois: usize,
    pub batch_size: usize,
    pub rules: Vec<ExclusivityRule>,
    pub narrate: NarrateOptions,
    pub output_corpus: PathBuf,
    pub instruction_pairs: Option<PathBuf>,
}

impl SynthSettings {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        Ok(Self {
            seed: cfg.seed,
            n_max_rois: cfg.n_max_rois,
            batch_size: cfg.batch_size,
            rules: cfg.rules(),
            narrate: narrate_options(cfg)?,
            output_corpus: cfg
                .paths
                .output_corpus
                .clone()
                .ok_or(PipelineError::NoOutput)?,
            instruction_pairs: cfg.paths.instruction_pairs.clone(),
        })
    }
}

/// Captioning options, loading dataset captions when configured.
pub fn narrate_options(cfg: &PipelineConfig) -> Result<NarrateOptions, PipelineError> {
    let global_source = match cfg.caption_source {
        CaptionSource::Service => GlobalCaptionSource::Service,
        CaptionSource::Dataset => {
            let path = cfg.paths.captions.as_ref().ok_or(PipelineError::NoInput)?;
            GlobalCaptionSource::Dataset(load_coco_captions(path)?)
        }
    };
    Ok(NarrateOptions {
        max_concurrency: cfg.captioner.max_concurrency,
        global_source,
        image_root: cfg.paths.image_root.clone(),
    })
}

/// Records from `paths.records` if set, else ingested from `paths.annotations`.
/// Images with fewer than two objects are dropped.
pub fn load_input_records(cfg: &PipelineConfig) -> Result<Vec<ImageRecord>, PipelineError> {
    let records = if let Some(path) = &cfg.paths.records {
        read_records(path)?
    } else if let Some(path) = &cfg.paths.annotations {
        let out = ingest_coco(path)?;
        if !out.few_objects.is_empty() || out.clamped_boxes > 0 || out.dropped_boxes > 0 {
            info!(
                few_objects = out.few_objects.len(),
                clamped = out.clamped_boxes,
                dropped = out.dropped_boxes,
                "ingest adjustments"
            );
        }
        out.records
    } else {
        return Err(PipelineError::NoInput);
    };
    Ok(records
        .into_iter()
        .filter(|r| r.objects().len() >= 2)
        .collect())
}

/// Attaches captions to records that have none. Records that already carry
/// captions pass through untouched.
pub fn narrate_records(
    records: Vec<ImageRecord>,
    captioner: &dyn Captioner,
    seed: u64,
    n_max_rois: usize,
    opts: &NarrateOptions,
) -> Vec<(String, Result<ImageRecord, NarrateError>)> {
    let mut out: Vec<(String, Option<Result<ImageRecord, NarrateError>>)> =
        Vec::with_capacity(records.len());
    let mut todo = Vec::new();
    let mut slots = Vec::new();
    for record in records {
        if record.captions().is_empty() {
            let pairs = select_rois(
                record.objects(),
                n_max_rois,
                image_seed(seed, record.image_id()),
            );
            slots.push(out.len());
            out.push((record.image_id().to_string(), None));
            todo.push((record, pairs));
        } else {
            out.push((record.image_id().to_string(), Some(Ok(record))));
        }
    }
    let results = narrate_many(&todo, captioner, opts);
    for ((slot, (record, _)), result) in slots.into_iter().zip(todo).zip(results) {
        out[slot].1 = Some(result.map(|captions| record.with_captions(captions)));
    }
    out.into_iter()
        .map(|(id, r)| (id, r.expect("every slot filled")))
        .collect()
}

struct BatchOutcome {
    entries: Vec<PseudoLabelEntry>,
    failures: Vec<ImageFailure>,
    rejected: usize,
}

fn fail_all(batch: &[ImageRecord], stage: Stage, reason: &str) -> BatchOutcome {
    BatchOutcome {
        entries: Vec::new(),
        failures: batch
            .iter()
            .map(|r| ImageFailure {
                image_id: r.image_id().to_string(),
                stage,
                reason: reason.to_string(),
            })
            .collect(),
        rejected: 0,
    }
}

fn run_batch(
    batch: &[ImageRecord],
    llm: &LlmClient,
    template: &PromptTemplate,
    rules: &[ExclusivityRule],
) -> BatchOutcome {
    let bundle = match build_prompt(batch, template, batch.len()) {
        Ok(b) => b,
        Err(e) => return fail_all(batch, Stage::Prompt, &e.to_string()),
    };
    let response = match llm.complete(&bundle) {
        Ok(r) => r,
        Err(e) => return fail_all(batch, Stage::Llm, &e.to_string()),
    };
    let graphs = match parse_response(&response.text) {
        Ok(g) => g,
        Err(e) => return fail_all(batch, Stage::Parse, &e.to_string()),
    };
    let mut outcome = BatchOutcome {
        entries: Vec::new(),
        failures: Vec::new(),
        rejected: 0,
    };
    for g in &graphs {
        if !batch.iter().any(|r| r.image_id() == g.image_id.trim()) {
            warn!(image_id = %g.image_id, "scene graph for an image outside the batch ignored");
        }
    }
    for record in batch {
        let Some(graph) = graphs
            .iter()
            .find(|g| g.image_id.trim() == record.image_id())
        else {
            outcome.failures.push(ImageFailure {
                image_id: record.image_id().to_string(),
                stage: Stage::Parse,
                reason: "response has no scene graph for this image".into(),
            });
            continue;
        };
        let report = match validate(graph, record, rules) {
            Ok(r) => r,
            Err(e) => {
                outcome.failures.push(ImageFailure {
                    image_id: record.image_id().to_string(),
                    stage: Stage::Validate,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        for (t, reason) in &report.rejected {
            warn!(image_id = record.image_id(), triplet = %t, ?reason, "triplet rejected");
        }
        let rendered = RenderedRecord::from_record(record).expect("batch records carry captions");
        outcome.rejected += report.rejected.len();
        outcome.entries.push(PseudoLabelEntry::new(
            &rendered,
            &report.accepted,
            Provenance {
                template_id: template.id().to_string(),
                template_checksum: template.checksum().to_string(),
                model_name: llm.endpoint().model_name.clone(),
                timestamp: response.received_at.clone(),
                rejected_count: report.rejected.len(),
            },
        ));
    }
    outcome
}

/// Runs the full pipeline over `records`, appending to the output corpus.
/// Images already present in the corpus are skipped, so an interrupted run
/// can be resumed. The corpus is rewritten sorted by image id at the end.
pub fn synth(
    records: Vec<ImageRecord>,
    captioner: &dyn Captioner,
    llm: &LlmClient,
    template: &PromptTemplate,
    settings: &SynthSettings,
) -> Result<SynthSummary, PipelineError> {
    let out = &settings.output_corpus;
    let done: HashSet<String> = if out.exists() {
        read_pseudo_labels(out)?
            .into_iter()
            .map(|e| e.image_id)
            .collect()
    } else {
        HashSet::new()
    };
    let mut summary = SynthSummary {
        images: records.len(),
        ..Default::default()
    };
    let mut seen = HashSet::new();
    let mut pending = Vec::new();
    for record in records {
        if !seen.insert(record.image_id().to_string()) {
            warn!(image_id = record.image_id(), "duplicate image id skipped");
            continue;
        }
        if done.contains(record.image_id()) {
            summary.already_done += 1;
        } else {
            pending.push(record);
        }
    }
    pending.sort_by(|a, b| a.image_id().cmp(b.image_id()));

    let mut ready = Vec::with_capacity(pending.len());
    for (image_id, result) in narrate_records(
        pending,
        captioner,
        settings.seed,
        settings.n_max_rois,
        &settings.narrate,
    ) {
        match result {
            Ok(r) if r.captions().is_empty() => summary.failures.push(ImageFailure {
                image_id: r.image_id().to_string(),
                stage: Stage::Narrate,
                reason: "no non-empty captions".into(),
            }),
            Ok(r) => ready.push(r),
            Err(e) => summary.failures.push(ImageFailure {
                image_id,
                stage: Stage::Narrate,
                reason: e.to_string(),
            }),
        }
    }

    let batches: Vec<&[ImageRecord]> = ready.chunks(settings.batch_size.max(1)).collect();
    let appender = Mutex::new(JsonlAppender::open(out)?);
    let workers = llm.endpoint().max_concurrency.max(1);
    let outcomes = run_bounded(&batches, workers, |batch| {
        let outcome = run_batch(batch, llm, template, &settings.rules);
        let mut w = appender.lock().expect("appender lock");
        let written: Result<(), DatasetError> =
            outcome.entries.iter().try_for_each(|e| w.append(e));
        (outcome, written)
    });
    drop(appender);
    for (outcome, written) in outcomes {
        written?;
        summary.written += outcome.entries.len();
        summary.triplets += outcome
            .entries
            .iter()
            .map(|e| e.relationships.len())
            .sum::<usize>();
        summary.rejected += outcome.rejected;
        summary.failures.extend(outcome.failures);
    }
    summary.failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));

    let corpus = finalize_corpus(out)?;
    summary.corpus_size = corpus.len();
    if let Some(path) = &settings.instruction_pairs {
        summary.instruction_pairs = Some(export_instruction_pairs(&corpus, template, path)?);
    }
    info!(
        written = summary.written,
        failed = summary.failures.len(),
        corpus = summary.corpus_size,
        "synthesis finished"
    );
    Ok(summary)
}

/// Rewrites the corpus sorted by image id, keeping the first entry per image.
pub fn finalize_corpus(path: &Path) -> Result<Vec<PseudoLabelEntry>, PipelineError> {
    let mut entries = read_pseudo_labels(path)?;
    let mut seen = HashSet::new();
    entries.retain(|e| seen.insert(e.image_id.clone()));
    entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let tmp = path.with_extension("jsonl.tmp");
    write_pseudo_labels(&entries, &tmp)?;
    fs::rename(&tmp, path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::fixtures::{img395890_record, IMG395890_RESPONSE};
    use crate::llm::mock::{FixedResponder, PairwiseResponder, ScriptedTransport};
    use crate::llm::{LlmEndpoint, ResponseCache};
    use crate::narrate::MockCaptioner;
    use std::sync::Arc;

    fn settings(dir: &Path) -> SynthSettings {
        SynthSettings {
            seed: 0,
            n_max_rois: 16,
            batch_size: 2,
            rules: crate::graph::default_rules(),
            narrate: NarrateOptions::default(),
            output_corpus: dir.join("corpus.jsonl"),
            instruction_pairs: Some(dir.join("pairs.jsonl")),
        }
    }

    #[test]
    fn img395890_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let llm = LlmClient::new(
            LlmEndpoint::default(),
            Box::new(FixedResponder::new(IMG395890_RESPONSE)),
        )
        .unwrap();
        let template = PromptTemplate::builtin("sgg-v1").unwrap();
        let s = settings(dir.path());
        let summary = synth(
            vec![img395890_record()],
            &MockCaptioner,
            &llm,
            &template,
            &s,
        )
        .unwrap();
        assert_eq!(summary.written, 1);
        assert_eq!(summary.triplets, 7);
        assert!(summary.failures.is_empty());
        assert_eq!(summary.instruction_pairs, Some(1));
        let corpus = read_pseudo_labels(&s.output_corpus).unwrap();
        assert_eq!(corpus[0].provenance.template_checksum, template.checksum());

        // resumed run does nothing new
        let again = synth(
            vec![img395890_record()],
            &MockCaptioner,
            &llm,
            &template,
            &s,
        )
        .unwrap();
        assert_eq!(
            (again.already_done, again.written, again.corpus_size),
            (1, 0, 1)
        );
    }

    #[test]
    fn llm_failure_marks_batch() {
        let dir = tempfile::tempdir().unwrap();
        let ep = LlmEndpoint {
            max_retries: 0,
            ..Default::default()
        };
        let llm = LlmClient::new(
            ep,
            Box::new(ScriptedTransport::new(vec![ScriptedTransport::status(400)])),
        )
        .unwrap();
        let template = PromptTemplate::builtin("sgg-v1").unwrap();
        let summary = synth(
            vec![img395890_record()],
            &MockCaptioner,
            &llm,
            &template,
            &settings(dir.path()),
        )
        .unwrap();
        assert_eq!(summary.written, 0);
        assert_eq!(summary.failures.len(), 1);
        assert_eq!(summary.failures[0].stage, Stage::Llm);
    }

    #[test]
    fn cached_rerun_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let template = PromptTemplate::builtin("sgg-v1").unwrap();
        let cache_dir = dir.path().join("cache");
        let run = |sub: &str| {
            let transport = Arc::new(PairwiseResponder);
            let llm = LlmClient::new(LlmEndpoint::default(), Box::new(transport))
                .unwrap()
                .with_cache(ResponseCache::open(&cache_dir).unwrap());
            let d = dir.path().join(sub);
            fs::create_dir_all(&d).unwrap();
            let s = settings(&d);
            synth(
                vec![img395890_record()],
                &MockCaptioner,
                &llm,
                &template,
                &s,
            )
            .unwrap();
            fs::read(&s.output_corpus).unwrap()
        };
        assert_eq!(run("a"), run("b"));
    }
}

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};
use sgsynth::config::load_config;
use sgsynth::dataset::{
    export_instruction_pairs, ingest_coco, predicate_stats, read_pseudo_labels, read_records,
    write_jsonl, write_records,
};
use sgsynth::eval::{read_grounded, recall_at_k, EvalOptions, MatchMode};
use sgsynth::graph::{default_rules, parse_response, validate, RejectReason};
use sgsynth::llm::mock::{FixedResponder, PairwiseResponder};
use sgsynth::llm::{ChatTransport, LlmClient, ResponseCache};
use sgsynth::narrate::{Captioner, HttpCaptioner, MockCaptioner};
use sgsynth::pipeline::{
    load_input_records, narrate_options, narrate_records, synth, SynthSettings,
};
use sgsynth::prompt::{build_prompt, PromptTemplate};
use sgsynth::roi::{image_seed, select_rois};
use sgsynth::ImageRecord;

use crate::{Command, TemplateArgs};

pub struct Outcome {
    pub summary: Value,
    /// Validation failures were found; maps to exit status 1.
    pub failures: bool,
}

fn ok(summary: Value) -> Result<Outcome> {
    Ok(Outcome {
        summary,
        failures: false,
    })
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::Ingest { annotations, out } => ingest(&annotations, &out),
        Command::SelectRois {
            records,
            out,
            seed,
            n_max,
        } => select(&records, &out, seed, n_max),
        Command::Narrate {
            config,
            out,
            mock_captioner,
        } => narrate(&config, &out, mock_captioner),
        Command::Prompt {
            records,
            out,
            batch_size,
            template,
        } => prompt(&records, &out, batch_size, &template),
        Command::Synth {
            config,
            mock_llm,
            mock_captioner,
        } => run_synth(&config, mock_llm.as_deref(), mock_captioner),
        Command::Validate {
            records,
            response,
            config,
            out,
        } => run_validate(&records, &response, config.as_deref(), out.as_deref()),
        Command::Stats { corpus, top, table } => stats(&corpus, top, table),
        Command::ExportInstructions {
            corpus,
            out,
            template,
        } => export(&corpus, &out, &template),
        Command::Eval {
            gt,
            pred,
            k,
            iou,
            match_mode,
            out,
        } => eval(&gt, &pred, &k, iou, &match_mode, out.as_deref()),
    }
}

/// Prepends `"command": name` to an object summary.
fn tagged(name: &str, value: Value) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), name.into());
    if let Value::Object(fields) = value {
        m.extend(fields);
    }
    Value::Object(m)
}

fn load_template(args: &TemplateArgs) -> Result<PromptTemplate> {
    let t = match &args.template_dir {
        Some(dir) => PromptTemplate::load(dir, &args.template_id)?,
        None => PromptTemplate::builtin(&args.template_id)?,
    };
    Ok(t)
}

fn ingest(annotations: &Path, out: &Path) -> Result<Outcome> {
    let output = ingest_coco(annotations)?;
    let usable: Vec<ImageRecord> = output.usable().cloned().collect();
    write_records(&usable, out)?;
    ok(json!({
        "command": "ingest",
        "images": output.records.len(),
        "written": usable.len(),
        "few_objects": output.few_objects.len(),
        "clamped_boxes": output.clamped_boxes,
        "dropped_boxes": output.dropped_boxes,
        "out": out.display().to_string(),
    }))
}

fn select(records: &Path, out: &Path, seed: u64, n_max: usize) -> Result<Outcome> {
    if n_max == 0 {
        bail!("--n-max must be >= 1");
    }
    let records = read_records(records)?;
    let mut total = 0;
    let lines: Vec<Value> = records
        .iter()
        .map(|r| {
            let pairs = select_rois(r.objects(), n_max, image_seed(seed, r.image_id()));
            total += pairs.len();
            json!({
                "image_id": r.image_id(),
                "pairs": pairs
                    .iter()
                    .map(|p| json!({"first": p.first.key(), "second": p.second.key(), "union": p.union}))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    write_jsonl(&lines, out)?;
    ok(
        json!({"command": "select-rois", "images": records.len(), "pairs": total, "out": out.display().to_string()}),
    )
}

fn make_captioner(cfg: &sgsynth::config::PipelineConfig, mock: bool) -> Result<Box<dyn Captioner>> {
    if mock {
        return Ok(Box::new(MockCaptioner));
    }
    Ok(Box::new(HttpCaptioner::new(cfg.captioner.endpoint())?))
}

fn narrate(config: &Path, out: &Path, mock_captioner: bool) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let opts = narrate_options(&cfg)?;
    let captioner = make_captioner(&cfg, mock_captioner)?;
    let records = load_input_records(&cfg)?;
    let total = records.len();
    let mut narrated = Vec::new();
    let mut failed = Vec::new();
    for (image_id, result) in
        narrate_records(records, captioner.as_ref(), cfg.seed, cfg.n_max_rois, &opts)
    {
        match result {
            Ok(r) => narrated.push(r),
            Err(e) => {
                tracing::warn!(image_id, error = %e, "narration failed");
                failed.push(json!({"image_id": image_id, "reason": e.to_string()}));
            }
        }
    }
    narrated.sort_by(|a, b| a.image_id().cmp(b.image_id()));
    write_records(&narrated, out)?;
    Ok(Outcome {
        failures: !failed.is_empty(),
        summary: json!({
            "command": "narrate",
            "images": total,
            "written": narrated.len(),
            "failed": failed,
            "out": out.display().to_string(),
        }),
    })
}

fn prompt(
    records: &Path,
    out: &Path,
    batch_size: usize,
    template: &TemplateArgs,
) -> Result<Outcome> {
    if batch_size == 0 {
        bail!("--batch-size must be >= 1");
    }
    let template = load_template(template)?;
    let records = read_records(records)?;
    let bundles = records
        .chunks(batch_size)
        .map(|batch| build_prompt(batch, &template, batch_size))
        .collect::<Result<Vec<_>, _>>()?;
    write_jsonl(&bundles, out)?;
    ok(json!({
        "command": "prompt",
        "images": records.len(),
        "prompts": bundles.len(),
        "template_id": template.id(),
        "template_checksum": template.checksum(),
        "out": out.display().to_string(),
    }))
}

fn run_synth(config: &Path, mock_llm: Option<&str>, mock_captioner: bool) -> Result<Outcome> {
    let cfg = load_config(config)?;
    let settings = SynthSettings::from_config(&cfg)?;
    let template = match &cfg.template.dir {
        Some(dir) => PromptTemplate::load(dir, &cfg.template.id)?,
        None => PromptTemplate::builtin(&cfg.template.id)?,
    };
    let endpoint = cfg.llm.endpoint();
    let mut llm = match mock_llm {
        None => LlmClient::http(endpoint)?,
        Some(spec) => {
            let transport: Box<dyn ChatTransport> = if spec == "auto" {
                Box::new(PairwiseResponder)
            } else {
                let text = fs::read_to_string(spec)
                    .with_context(|| format!("reading mock response {spec}"))?;
                Box::new(FixedResponder::new(text))
            };
            LlmClient::new(endpoint, transport)?
        }
    };
    if let Some(dir) = &cfg.paths.cache_dir {
        llm = llm.with_cache(ResponseCache::open(dir)?);
    }
    let captioner = make_captioner(&cfg, mock_captioner)?;
    let records = load_input_records(&cfg)?;
    let summary = synth(records, captioner.as_ref(), &llm, &template, &settings)?;
    let mut value = tagged("synth", serde_json::to_value(&summary)?);
    value["out"] = settings.output_corpus.display().to_string().into();
    Ok(Outcome {
        failures: !summary.failures.is_empty(),
        summary: value,
    })
}

fn run_validate(
    records: &Path,
    response: &Path,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<Outcome> {
    let rules = match config {
        Some(c) => load_config(c)?.rules(),
        None => default_rules(),
    };
    let records: HashMap<String, ImageRecord> = read_records(records)?
        .into_iter()
        .map(|r| (r.image_id().to_string(), r))
        .collect();
    let text =
        fs::read_to_string(response).with_context(|| format!("reading {}", response.display()))?;
    let graphs = parse_response(&text)?;
    let mut accepted = 0;
    let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
    let mut errors = Vec::new();
    let mut reports = Vec::new();
    for g in &graphs {
        let Some(record) = records.get(g.image_id.trim()) else {
            errors.push(json!({"image_id": g.image_id, "reason": "unknown image"}));
            continue;
        };
        match validate(g, record, &rules) {
            Ok(report) => {
                accepted += report.accepted.triplets.len();
                for (_, reason) in &report.rejected {
                    *reasons.entry(reason_name(*reason).into()).or_default() += 1;
                }
                reports.push(report);
            }
            Err(e) => errors.push(json!({"image_id": g.image_id, "reason": e.to_string()})),
        }
    }
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&reports)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    let rejected: usize = reasons.values().sum();
    Ok(Outcome {
        failures: rejected > 0 || !errors.is_empty(),
        summary: json!({
            "command": "validate",
            "graphs": graphs.len(),
            "accepted": accepted,
            "rejected": rejected,
            "reasons": reasons,
            "errors": errors,
        }),
    })
}

fn reason_name(r: RejectReason) -> &'static str {
    match r {
        RejectReason::UnknownObject => "unknown_object",
        RejectReason::SelfLoop => "self_loop",
        RejectReason::Duplicate => "duplicate",
        RejectReason::ExclusivityViolation => "exclusivity_violation",
        RejectReason::EmptyRelation => "empty_relation",
    }
}

fn stats(corpus: &Path, top: usize, table: bool) -> Result<Outcome> {
    let entries = read_pseudo_labels(corpus)?;
    let report = predicate_stats(&entries).report(top, entries.len());
    if table {
        eprint!("{}", report.render_table());
    }
    ok(tagged("stats", serde_json::to_value(&report)?))
}

fn export(corpus: &Path, out: &Path, template: &TemplateArgs) -> Result<Outcome> {
    let template = load_template(template)?;
    let entries = read_pseudo_labels(corpus)?;
    let n = export_instruction_pairs(&entries, &template, out)?;
    ok(json!({"command": "export-instructions", "pairs": n, "out": out.display().to_string()}))
}

fn eval(
    gt: &Path,
    pred: &Path,
    ks: &[usize],
    iou: f64,
    match_mode: &str,
    out: Option<&Path>,
) -> Result<Outcome> {
    let mode: MatchMode = match_mode.parse()?;
    let gts = read_grounded(gt)?;
    let preds = read_grounded(pred)?;
    let report = recall_at_k(
        &preds,
        &gts,
        ks,
        EvalOptions {
            iou_threshold: iou,
            mode,
        },
    )?;
    tracing::info!(table = %report.render_table(), "recall");
    if let Some(out) = out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    let mut summary = tagged("eval", Value::Object(report.summary()));
    summary["images"] = report.num_images.into();
    summary["gt_triplets"] = report.total_gt.into();
    ok(summary)
}

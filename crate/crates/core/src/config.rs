//! Pipeline configuration file.
//!
//! A JSON document; every field except `paths` has a default. Relative paths
//! are resolved against the config file's directory. Tokens may be supplied
//! through `SGSYNTH_LLM_TOKEN` / `SGSYNTH_CAPTIONER_TOKEN`, which take
//! precedence over the file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalOptions, MatchMode, DEFAULT_IOU_THRESHOLD, DEFAULT_KS};
use crate::graph::{default_rules, ExclusivityRule};
use crate::llm::{LlmEndpoint, MAX_RETRIES_LIMIT};
use crate::narrate::CaptionerEndpoint;
use crate::prompt::{DEFAULT_BATCH_CAP, DEFAULT_TEMPLATE_ID};
use crate::retry::RetryPolicy;
use crate::roi::DEFAULT_MAX_ROIS;

pub const LLM_TOKEN_ENV: &str = "SGSYNTH_LLM_TOKEN";
pub const CAPTIONER_TOKEN_ENV: &str = "SGSYNTH_CAPTIONER_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CaptionSource {
    /// Holistic caption from the captioning service.
    #[default]
    Service,
    /// Holistic caption from `paths.captions` (COCO Captions format).
    Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub base_url: String,
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub auth_token: Option<String>,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        let ep = CaptionerEndpoint::default();
        Self {
            base_url: ep.base_url,
            timeout_ms: ep.timeout.as_millis() as u64,
            max_concurrency: ep.max_concurrency,
            max_retries: ep.retry.max_retries,
            backoff_base_ms: ep.retry.backoff_base.as_millis() as u64,
            auth_token: None,
        }
    }
}

impl CaptionerConfig {
    pub fn endpoint(&self) -> CaptionerEndpoint {
        CaptionerEndpoint {
            base_url: self.base_url.clone(),
            timeout: Duration::from_millis(self.timeout_ms),
            max_concurrency: self.max_concurrency,
            auth_token: self.auth_token.clone(),
            retry: RetryPolicy {
                max_retries: self.max_retries,
                backoff_base: Duration::from_millis(self.backoff_base_ms),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub base_url: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub max_concurrency: usize,
    pub auth_token: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        let ep = LlmEndpoint::default();
        Self {
            base_url: ep.base_url,
            model_name: ep.model_name,
            temperature: ep.temperature,
            max_output_tokens: ep.max_output_tokens,
            timeout_ms: ep.timeout.as_millis() as u64,
            max_retries: ep.max_retries,
            backoff_base_ms: ep.backoff_base.as_millis() as u64,
            max_concurrency: ep.max_concurrency,
            auth_token: None,
        }
    }
}

impl LlmConfig {
    pub fn endpoint(&self) -> LlmEndpoint {
        LlmEndpoint {
            base_url: self.base_url.clone(),
            model_name: self.model_name.clone(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            timeout: Duration::from_millis(self.timeout_ms),
            max_retries: self.max_retries,
            backoff_base: Duration::from_millis(self.backoff_base_ms),
            max_concurrency: self.max_concurrency,
            auth_token: self.auth_token.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplateConfig {
    pub id: String,
    /// Directory holding `<id>.system.txt` / `<id>.user.txt`; built-in when absent.
    pub dir: Option<PathBuf>,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            id: DEFAULT_TEMPLATE_ID.into(),
            dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// COCO detection annotations.
    pub annotations: Option<PathBuf>,
    /// Image records (JSONL); used instead of `annotations` when set.
    pub records: Option<PathBuf>,
    /// COCO Captions file for `caption_source = "dataset"`.
    pub captions: Option<PathBuf>,
    /// Prefix joined with image file names in captioning requests.
    pub image_root: Option<String>,
    pub cache_dir: Option<PathBuf>,
    pub output_corpus: Option<PathBuf>,
    pub instruction_pairs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub iou_threshold: f64,
    pub match_mode: MatchMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            match_mode: MatchMode::Union,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> EvalOptions {
        EvalOptions {
            iou_threshold: self.iou_threshold,
            mode: self.match_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub n_max_rois: usize,
    pub batch_size: usize,
    pub caption_source: CaptionSource,
    pub captioner: CaptionerConfig,
    pub llm: LlmConfig,
    pub exclusivity_rules: Vec<ExclusivityRule>,
    pub template: TemplateConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_max_rois: DEFAULT_MAX_ROIS,
            batch_size: DEFAULT_BATCH_CAP,
            caption_source: CaptionSource::Service,
            captioner: CaptionerConfig::default(),
            llm: LlmConfig::default(),
            exclusivity_rules: default_rules(),
            template: TemplateConfig::default(),
            paths: PathsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    load_config_with_env(path, |k| std::env::var(k).ok())
}

pub fn load_config_with_env(
    path: &Path,
    env: impl Fn(&str) -> Option<String>,
) -> Result<PipelineConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(&text, base, env)
}

pub fn parse_config(
    text: &str,
    base_dir: &Path,
    env: impl Fn(&str) -> Option<String>,
) -> Result<PipelineConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let mut cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        invalid(&field, e.into_inner().to_string())
    })?;

    if let Some(token) = env(LLM_TOKEN_ENV).filter(|t| !t.is_empty()) {
        cfg.llm.auth_token = Some(token);
    }
    if let Some(token) = env(CAPTIONER_TOKEN_ENV).filter(|t| !t.is_empty()) {
        cfg.captioner.auth_token = Some(token);
    }
    cfg.resolve_paths(base_dir);
    cfg.validate()?;
    Ok(cfg)
}

impl PipelineConfig {
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let paths = &mut self.paths;
        for p in [
            &mut paths.annotations,
            &mut paths.records,
            &mut paths.captions,
            &mut paths.cache_dir,
            &mut paths.output_corpus,
            &mut paths.instruction_pairs,
            &mut self.template.dir,
        ] {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_max_rois == 0 {
            return Err(invalid("n_max_rois", "must be >= 1"));
        }
        if !(1..=64).contains(&self.batch_size) {
            return Err(invalid("batch_size", "must be in 1..=64"));
        }
        if self.captioner.max_concurrency == 0 {
            return Err(invalid("captioner.max_concurrency", "must be >= 1"));
        }
        if self.captioner.max_retries > MAX_RETRIES_LIMIT {
            return Err(invalid("captioner.max_retries", "must be <= 10"));
        }
        let llm = &self.llm;
        if !llm.temperature.is_finite() || llm.temperature < 0.0 {
            return Err(invalid("llm.temperature", "must be finite and >= 0"));
        }
        if llm.max_retries > MAX_RETRIES_LIMIT {
            return Err(invalid("llm.max_retries", "must be <= 10"));
        }
        if llm.max_concurrency == 0 {
            return Err(invalid("llm.max_concurrency", "must be >= 1"));
        }
        if llm.max_output_tokens == 0 {
            return Err(invalid("llm.max_output_tokens", "must be >= 1"));
        }
        if llm.model_name.trim().is_empty() {
            return Err(invalid("llm.model_name", "must be non-empty"));
        }
        for (i, rule) in self.exclusivity_rules.iter().enumerate() {
            if rule.max_partners == 0 || rule.predicate.trim().is_empty() {
                return Err(invalid(
                    &format!("exclusivity_rules[{i}]"),
                    "needs a predicate and max_partners >= 1",
                ));
            }
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(invalid(
                "eval.ks",
                "must be a non-empty list of positive integers",
            ));
        }
        if !(0.0..1.0).contains(&self.eval.iou_threshold) {
            return Err(invalid("eval.iou_threshold", "must lie in [0, 1)"));
        }
        if self.caption_source == CaptionSource::Dataset && self.paths.captions.is_none() {
            return Err(invalid(
                "paths.captions",
                "required when caption_source is \"dataset\"",
            ));
        }
        let inputs = [
            ("paths.annotations", &self.paths.annotations),
            ("paths.records", &self.paths.records),
            ("paths.captions", &self.paths.captions),
            ("template.dir", &self.template.dir),
        ];
        for (field, p) in inputs {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(invalid(field, format!("{} does not exist", p.display())));
                }
            }
        }
        let outputs = [
            ("paths.output_corpus", &self.paths.output_corpus),
            ("paths.instruction_pairs", &self.paths.instruction_pairs),
        ];
        for (field, p) in outputs {
            if let Some(parent) = p.as_ref().and_then(|p| p.parent()) {
                if !parent.as_os_str().is_empty() && !parent.is_dir() {
                    return Err(invalid(
                        field,
                        format!("directory {} does not exist", parent.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Rules normalized the same way as parsed predicates.
    pub fn rules(&self) -> Vec<ExclusivityRule> {
        self.exclusivity_rules
            .iter()
            .filter_map(|r| ExclusivityRule::new(&r.predicate, r.bound_role, r.max_partners))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config(
            r#"{"paths": {"output_corpus": "out.jsonl"}}"#,
            dir.path(),
            no_env,
        )
        .unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.n_max_rois, 16);
        assert_eq!(cfg.eval.ks, vec![20, 50, 100]);
        assert_eq!(cfg.llm.temperature, 0.0);
        assert_eq!(cfg.rules(), default_rules());
        assert_eq!(
            cfg.paths.output_corpus.unwrap(),
            dir.path().join("out.jsonl")
        );
    }

    #[test]
    fn range_checks_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        for (text, field) in [
            (r#"{"n_max_rois": 0}"#, "n_max_rois"),
            (r#"{"llm": {"max_retries": 11}}"#, "llm.max_retries"),
            (r#"{"eval": {"ks": []}}"#, "eval.ks"),
            (r#"{"batch_size": 0}"#, "batch_size"),
            (r#"{"llm": {"temperature": "hot"}}"#, "llm.temperature"),
            (r#"{"bogus": 1}"#, "bogus"),
            (
                r#"{"paths": {"annotations": "missing.json"}}"#,
                "paths.annotations",
            ),
            (r#"{"caption_source": "dataset"}"#, "paths.captions"),
        ] {
            match parse_config(text, dir.path(), no_env) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn env_token_wins() {
        let dir = tempfile::tempdir().unwrap();
        let env = |k: &str| (k == LLM_TOKEN_ENV).then(|| "from-env".to_string());
        let cfg = parse_config(r#"{"llm": {"auth_token": "from-file"}}"#, dir.path(), env).unwrap();
        assert_eq!(cfg.llm.auth_token.as_deref(), Some("from-env"));
        assert_eq!(cfg.llm.endpoint().auth_token.as_deref(), Some("from-env"));
        let cfg = parse_config(
            r#"{"llm": {"auth_token": "from-file"}}"#,
            dir.path(),
            no_env,
        )
        .unwrap();
        assert_eq!(cfg.llm.auth_token.as_deref(), Some("from-file"));
    }

    #[test]
    fn loads_from_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed": 9, "eval": {"match_mode": "per_box"}}"#).unwrap();
        let cfg = load_config_with_env(&path, no_env).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.eval.match_mode, MatchMode::PerBox);
        assert!(load_config(&dir.path().join("nope.json")).is_err());
    }
}

//! Run configuration.
//!
//! Config files are JSON. Lines whose first non-blank characters are `//`
//! are comments and are stripped before parsing, which is what lets
//! `init-config` write a self-documenting file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::critique::DEFAULT_WORD_CAP;
use crate::gateway::{RetryPolicy, SamplingParams, DEFAULT_MAX_IN_FLIGHT};
use crate::store::Budgets;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Io { path: String, message: String },
    #[error("config {path}, line {line} column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model: String,
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    pub api_key_env: Option<String>,
    /// Script table for scripted backends; the built-in offline responder
    /// is used when absent.
    pub script: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Http,
            model: String::new(),
            endpoint: None,
            api_key_env: None,
            script: None,
            retry: RetryPolicy::default(),
            timeout_secs: 600,
        }
    }
}

impl BackendConfig {
    fn http(model: &str, key_env: &str) -> Self {
        Self {
            model: model.into(),
            endpoint: Some("https://api.openai.com/v1".into()),
            api_key_env: Some(key_env.into()),
            ..Self::default()
        }
    }
}

/// Currency per one million tokens.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenPrice {
    pub prompt: f64,
    pub completion: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prices {
    pub student: TokenPrice,
    pub teacher: TokenPrice,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UsageRecording {
    pub training: bool,
    pub evaluation: bool,
}

impl Default for UsageRecording {
    fn default() -> Self {
        Self {
            training: true,
            evaluation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    /// Student trajectories per sample.
    #[serde(alias = "N", alias = "K")]
    pub group_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub budgets: Budgets,
    pub word_cap: usize,
    pub seed: u64,
    /// Evaluation repetitions per problem.
    pub k: usize,
    pub student: BackendConfig,
    pub teacher: BackendConfig,
    pub dataset: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub prompts_dir: Option<PathBuf>,
    pub usage_recording: UsageRecording,
    /// Extra attempts for a sample whose processing failed.
    pub sample_retries: usize,
    pub use_provider_n: bool,
    pub max_in_flight: usize,
    pub prices: Prices,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sampling = SamplingParams::default();
        Self {
            run_id: "run".into(),
            group_size: 5,
            epochs: 3,
            batch_size: 5,
            temperature: sampling.temperature,
            top_p: sampling.top_p,
            max_tokens: sampling.max_tokens,
            budgets: Budgets::default(),
            word_cap: DEFAULT_WORD_CAP,
            seed: 0,
            k: 5,
            student: BackendConfig::http("student-model", "TED_STUDENT_API_KEY"),
            teacher: BackendConfig::http("teacher-model", "TED_TEACHER_API_KEY"),
            dataset: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            prompts_dir: None,
            usage_recording: UsageRecording::default(),
            sample_retries: 1,
            use_provider_n: false,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            prices: Prices::default(),
        }
    }
}

/// Removes full-line `//` comments.
pub fn strip_comments(text: &str) -> String {
    text.lines()
        .map(|l| if l.trim_start().starts_with("//") { "" } else { l })
        .collect::<Vec<_>>()
        .join("\n")
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = serde_json::from_str(&strip_comments(text)).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.group_size == 0 {
            return bad("group_size must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.k == 0 {
            return bad("epochs, batch_size and k must be at least 1");
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad("top_p must lie in (0, 1]");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        let b = &self.budgets;
        if b.token_budget == 0 || b.item_budget == 0 || b.retain_top == 0 {
            return bad("budgets B, B_item and R must be positive");
        }
        if self.word_cap == 0 {
            return bad("word_cap must be positive");
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad("run_id must be a non-empty name without path separators");
        }
        let prices = [self.prices.student, self.prices.teacher];
        if prices.iter().any(|p| p.prompt < 0.0 || p.completion < 0.0) {
            return bad("prices must be nonnegative");
        }
        Ok(())
    }

    pub fn sampling(&self) -> SamplingParams {
        SamplingParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
        }
    }

    /// Replaces both backends with scripted ones (script paths are kept).
    pub fn force_offline(&mut self) {
        self.student.kind = BackendKind::Scripted;
        self.teacher.kind = BackendKind::Scripted;
    }

    /// The config as echoed into the event log. Only the fields that affect
    /// results are included, so relocating a run does not change its log.
    pub fn echo(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config always serializes");
        if let Value::Object(map) = &mut v {
            map.remove("checkpoint_dir");
        }
        v
    }

    /// Default config as JSON, with a comment above each field.
    pub fn commented_default() -> String {
        let notes: &[(&str, &str)] = &[
            ("run_id", "name of the checkpoint subdirectory"),
            ("group_size", "student trajectories sampled per problem"),
            ("epochs", "passes over the training set"),
            ("batch_size", "samples per checkpoint"),
            ("temperature", "sampling parameters for every model call"),
            (
                "budgets",
                "B: token budget of the experience block, B_item: item cap, R: items kept by utility",
            ),
            ("word_cap", "word limit for texts written during compression"),
            ("seed", "seeds the per-epoch shuffle"),
            ("k", "evaluation runs per problem"),
            (
                "student",
                "kind is \"http\" or \"scripted\"; the API key is read from api_key_env",
            ),
            (
                "checkpoint_dir",
                "checkpoints/{run_id}/ receives stores, state.json and events.jsonl",
            ),
            (
                "prompts_dir",
                "directory of template overrides ({kind}.txt); null uses the built-ins",
            ),
            (
                "usage_recording",
                "collect self-reported experience ids during training and evaluation",
            ),
            ("sample_retries", "extra attempts before a failing sample is skipped"),
            (
                "use_provider_n",
                "request all trajectories in one call with the n parameter",
            ),
            ("prices", "currency per 1M tokens, used for the cost report"),
        ];
        let body = serde_json::to_string_pretty(&Self::default()).expect("config always serializes");
        let mut out = String::new();
        for line in body.lines() {
            if let Some(key) = line.strip_prefix("  \"").and_then(|r| r.split('"').next()) {
                if let Some((_, note)) = notes.iter().find(|(k, _)| *k == key) {
                    out.push_str(&format!("  // {note}\n"));
                }
            }
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

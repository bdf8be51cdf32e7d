//! Uniform access to student and teacher models.
//!
//! Every model call goes through a [`Gateway`], which validates the request,
//! applies the retry policy, caps the number of in-flight requests, and
//! reports token usage. The transport is a [`ChatBackend`]: either the
//! OpenAI-compatible HTTP wire ([`HttpBackend`]) or a deterministic
//! [`ScriptedBackend`] used for offline runs and tests.

mod http;
mod ledger;
mod scripted;
pub mod wire;

use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use futures::future::join_all;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

pub use http::HttpBackend;
pub use ledger::{ModelRole, TokenCount, TokenLedger};
pub use scripted::{RuleMatch, ScriptRule, ScriptTable, ScriptedBackend, ScriptedReply};

/// Default number of concurrent requests per gateway.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

/// Rough token count used whenever a backend does not report usage:
/// one token per four characters, rounded up.
pub fn estimate_tokens(text: &str) -> u64 {
    let chars = text.chars().count() as u64;
    chars.div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

impl MessageRole {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageRole::System => "system",
            MessageRole::User => "user",
            MessageRole::Assistant => "assistant",
        }
    }
}

/// An image attached to a message. A source is either a URL or an inline
/// base64 payload; the enum makes carrying both impossible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ImageSource {
    Url { url: String },
    Base64 { media_type: String, data: String },
}

impl ImageSource {
    /// The value placed in the wire `image_url.url` field.
    pub fn wire_url(&self) -> String {
        match self {
            ImageSource::Url { url } => url.clone(),
            ImageSource::Base64 { media_type, data } => format!("data:{media_type};base64,{data}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ContentPart {
    Text { text: String },
    Image { image: ImageSource },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: MessageRole, text: impl Into<String>) -> Self {
        Self {
            role,
            parts: vec![ContentPart::Text { text: text.into() }],
        }
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::text(MessageRole::System, text)
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::text(MessageRole::User, text)
    }

    pub fn with_image(mut self, image: ImageSource) -> Self {
        self.parts.push(ContentPart::Image { image });
        self
    }

    /// Concatenation of all text parts, separated by newlines.
    pub fn text_content(&self) -> String {
        let texts: Vec<&str> = self
            .parts
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::Image { .. } => None,
            })
            .collect();
        texts.join("\n")
    }
}

/// Sampling parameters shared by every request of a given role.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.7,
            top_p: 1.0,
            max_tokens: 32768,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Completions requested in one call. Independent sampling keeps this at 1.
    pub n: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<ChatMessage>, params: &SamplingParams) -> Self {
        Self {
            model: model.into(),
            messages,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
            n: 1,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| GatewayError::InvalidRequest("message list is empty".into()))?;
        if first.role == MessageRole::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must have role system or user".into(),
            ));
        }
        if let Some(i) = self.messages.iter().position(|m| m.parts.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("message {i} has no content")));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if self.n == 0 {
            return Err(GatewayError::InvalidRequest("n must be positive".into()));
        }
        Ok(())
    }

    /// Text of the last user message, the primary key for scripted lookups.
    pub fn last_user_text(&self) -> String {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == MessageRole::User)
            .map(ChatMessage::text_content)
            .unwrap_or_default()
    }

    /// All message text joined in order.
    pub fn full_text(&self) -> String {
        let texts: Vec<String> = self.messages.iter().map(ChatMessage::text_content).collect();
        texts.join("\n")
    }

    pub fn estimated_prompt_tokens(&self) -> u64 {
        self.messages.iter().map(|m| estimate_tokens(&m.text_content())).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn total(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    pub usage: Usage,
    /// True when `usage` came from [`estimate_tokens`] rather than the backend.
    pub usage_estimated: bool,
    pub backend_id: String,
    /// Number of attempts the gateway needed, including the successful one.
    pub attempts: u32,
}

impl ChatResponse {
    pub fn first_text(&self) -> &str {
        self.completions.first().map(String::as_str).unwrap_or("")
    }
}

/// Failure of a single attempt against a backend.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed backend payload: {message}")]
    Protocol { message: String, body: String },
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("missing credential: environment variable {0} is not set")]
    Credential(String),
}

impl BackendError {
    /// Transport errors, 429 and 5xx are worth retrying; nothing else is.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend call failed after {attempts} attempt(s): {source}")]
    Backend { attempts: u32, source: BackendError },
    #[error("all {} sample slots failed: {}", causes.len(), format_causes(causes))]
    AllSlotsFailed { causes: Vec<(usize, String)> },
    #[error("backend configuration: {0}")]
    Config(String),
}

fn format_causes(causes: &[(usize, String)]) -> String {
    causes
        .iter()
        .map(|(slot, cause)| format!("[slot {slot}] {cause}"))
        .collect::<Vec<_>>()
        .join("; ")
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Backend { source, .. } if source.is_retryable())
    }
}

/// A transport capable of answering one chat request.
///
/// `slot` is the launch index within a parallel group; HTTP backends ignore
/// it, scripted backends may key on it.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    async fn send(&self, request: &ChatRequest, slot: usize) -> Result<ChatResponse, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_backoff_ms: 1000,
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1`, where `attempt` counts from 1.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

pub type SlotResult = Result<ChatResponse, GatewayError>;

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    limiter: Arc<Semaphore>,
    use_provider_n: bool,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.id())
            .field("retry", &self.retry)
            .field("use_provider_n", &self.use_provider_n)
            .finish()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            limiter: Arc::new(Semaphore::new(DEFAULT_MAX_IN_FLIGHT)),
            use_provider_n: false,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.limiter = Arc::new(Semaphore::new(cap.max(1)));
        self
    }

    /// Use the provider-side `n` parameter for multi-sample calls instead of
    /// independent requests.
    pub fn with_provider_n(mut self, enabled: bool) -> Self {
        self.use_provider_n = enabled;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub async fn complete(&self, request: &ChatRequest) -> SlotResult {
        self.complete_slot(request, 0).await
    }

    /// One request with retries. Usage on the returned response comes from
    /// the successful attempt only.
    pub async fn complete_slot(&self, request: &ChatRequest, slot: usize) -> SlotResult {
        request.validate()?;
        let max_attempts = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = {
                let _permit = self
                    .limiter
                    .acquire()
                    .await
                    .map_err(|e| GatewayError::Config(e.to_string()))?;
                self.backend.send(request, slot).await
            };
            match result {
                Ok(mut response) => {
                    response.attempts = attempt;
                    return Ok(response);
                }
                Err(err) if err.is_retryable() && attempt < max_attempts => {
                    tracing::warn!(backend = self.backend.id(), attempt, error = %err, "retrying");
                    tokio::time::sleep(self.retry.backoff(attempt)).await;
                }
                Err(source) => {
                    return Err(GatewayError::Backend {
                        attempts: attempt,
                        source,
                    })
                }
            }
        }
    }

    /// `n` samples of the same request, in launch order. Individual slot
    /// failures are reported in place; only a total failure is an error.
    pub async fn sample_parallel(&self, request: &ChatRequest, n: usize) -> Result<Vec<SlotResult>, GatewayError> {
        if n == 0 {
            return Err(GatewayError::InvalidRequest("sample count must be at least 1".into()));
        }
        let slots = if self.use_provider_n && n > 1 {
            self.sample_with_provider_n(request, n).await
        } else {
            join_all((0..n).map(|slot| self.complete_slot(request, slot))).await
        };
        if slots.iter().all(Result::is_err) {
            let causes = slots
                .into_iter()
                .enumerate()
                .filter_map(|(i, r)| r.err().map(|e| (i, e.to_string())))
                .collect();
            return Err(GatewayError::AllSlotsFailed { causes });
        }
        Ok(slots)
    }

    async fn sample_with_provider_n(&self, request: &ChatRequest, n: usize) -> Vec<SlotResult> {
        let mut batched = request.clone();
        batched.n = n as u32;
        match self.complete_slot(&batched, 0).await {
            Ok(response) => (0..n)
                .map(|slot| match response.completions.get(slot) {
                    Some(text) => Ok(ChatResponse {
                        completions: vec![text.clone()],
                        // the whole call's usage is booked on slot 0 so ledger sums stay exact
                        usage: if slot == 0 { response.usage } else { Usage::default() },
                        usage_estimated: response.usage_estimated,
                        backend_id: response.backend_id.clone(),
                        attempts: response.attempts,
                    }),
                    None => Err(GatewayError::Backend {
                        attempts: response.attempts,
                        source: BackendError::Protocol {
                            message: format!("expected {n} choices, got {}", response.completions.len()),
                            body: String::new(),
                        },
                    }),
                })
                .collect(),
            Err(e) => (0..n).map(|_| Err(e.clone())).collect(),
        }
    }
}

/// A gateway bound to one model name and its sampling parameters.
#[derive(Debug, Clone)]
pub struct ModelClient {
    pub gateway: Gateway,
    pub model: String,
    pub sampling: SamplingParams,
}

impl ModelClient {
    pub fn new(gateway: Gateway, model: impl Into<String>, sampling: SamplingParams) -> Self {
        Self {
            gateway,
            model: model.into(),
            sampling,
        }
    }

    pub fn request(&self, messages: Vec<ChatMessage>) -> ChatRequest {
        ChatRequest::new(self.model.clone(), messages, &self.sampling)
    }
}

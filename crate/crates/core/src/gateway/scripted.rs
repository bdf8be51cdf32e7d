//! Deterministic stand-in models.
//!
//! A script is an ordered rule table: the first rule whose matcher accepts
//! the request answers it, otherwise the default reply is used. Matching is
//! on the last user message (exact or substring), the full prompt text
//! (substring), the temperature, and the launch slot. Tests that need
//! computed replies can supply a pure function instead of a table.

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{estimate_tokens, BackendError, ChatBackend, ChatRequest, ChatResponse, GatewayError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Fail {
        error: String,
    },
    Text {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        usage: Option<Usage>,
    },
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedReply::Text {
            text: text.into(),
            usage: None,
        }
    }

    pub fn with_usage(text: impl Into<String>, prompt_tokens: u64, completion_tokens: u64) -> Self {
        ScriptedReply::Text {
            text: text.into(),
            usage: Some(Usage {
                prompt_tokens,
                completion_tokens,
            }),
        }
    }

    pub fn fail(error: impl Into<String>) -> Self {
        ScriptedReply::Fail { error: error.into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuleMatch {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_contains: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_contains: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot: Option<usize>,
}

impl RuleMatch {
    fn accepts(&self, request: &ChatRequest, slot: usize) -> bool {
        let user = request.last_user_text();
        self.user_text.as_ref().is_none_or(|t| *t == user)
            && self.user_contains.as_ref().is_none_or(|t| user.contains(t.as_str()))
            && self
                .prompt_contains
                .as_ref()
                .is_none_or(|t| request.full_text().contains(t.as_str()))
            && self.temperature.is_none_or(|t| t == request.temperature)
            && self.slot.is_none_or(|s| s == slot)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match", default)]
    pub when: RuleMatch,
    pub reply: ScriptedReply,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptTable {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ScriptedReply>,
}

impl ScriptTable {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading script {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("parsing script {}: {e}", path.display())))
    }

    pub fn lookup(&self, request: &ChatRequest, slot: usize) -> Option<&ScriptedReply> {
        self.rules
            .iter()
            .find(|r| r.when.accepts(request, slot))
            .map(|r| &r.reply)
            .or(self.default.as_ref())
    }
}

type ReplyFn = dyn Fn(&ChatRequest, usize) -> ScriptedReply + Send + Sync;

#[derive(Clone)]
enum Responder {
    Table(Arc<ScriptTable>),
    Func(Arc<ReplyFn>),
}

/// A backend whose answers are a pure function of (request, slot).
#[derive(Clone)]
pub struct ScriptedBackend {
    id: String,
    responder: Responder,
}

impl fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("id", &self.id)
            .finish_non_exhaustive()
    }
}

impl ScriptedBackend {
    pub fn from_table(id: impl Into<String>, table: ScriptTable) -> Self {
        Self {
            id: id.into(),
            responder: Responder::Table(Arc::new(table)),
        }
    }

    /// Every request gets the same reply.
    pub fn constant(id: impl Into<String>, reply: ScriptedReply) -> Self {
        Self::from_table(
            id,
            ScriptTable {
                rules: Vec::new(),
                default: Some(reply),
            },
        )
    }

    /// `f` must be pure for runs to stay deterministic.
    pub fn from_fn<F>(id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&ChatRequest, usize) -> ScriptedReply + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            responder: Responder::Func(Arc::new(f)),
        }
    }

    fn resolve(&self, request: &ChatRequest, slot: usize) -> Result<ScriptedReply, BackendError> {
        match &self.responder {
            Responder::Func(f) => Ok(f(request, slot)),
            Responder::Table(table) => table
                .lookup(request, slot)
                .cloned()
                .ok_or_else(|| BackendError::Scripted(format!("no scripted reply for slot {slot} and no default row"))),
        }
    }
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn send(&self, request: &ChatRequest, slot: usize) -> Result<ChatResponse, BackendError> {
        let count = request.n.max(1) as usize;
        let mut completions = Vec::with_capacity(count);
        let mut reported = Usage::default();
        let mut all_reported = true;
        for i in 0..count {
            match self.resolve(request, slot + i)? {
                ScriptedReply::Fail { error } => return Err(BackendError::Scripted(error)),
                ScriptedReply::Text { text, usage } => {
                    match usage {
                        Some(u) => {
                            reported.prompt_tokens += u.prompt_tokens;
                            reported.completion_tokens += u.completion_tokens;
                        }
                        None => all_reported = false,
                    }
                    completions.push(text);
                }
            }
        }
        let (usage, usage_estimated) = if all_reported {
            (reported, false)
        } else {
            (
                Usage {
                    prompt_tokens: request.estimated_prompt_tokens(),
                    completion_tokens: completions.iter().map(|c| estimate_tokens(c)).sum(),
                },
                true,
            )
        };
        Ok(ChatResponse {
            completions,
            usage,
            usage_estimated,
            backend_id: self.id.clone(),
            attempts: 1,
        })
    }
}

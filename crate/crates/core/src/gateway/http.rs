use std::time::Duration;

use async_trait::async_trait;

use super::wire::{parse_response_body, request_body};
use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    id: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new(id: impl Into<String>, endpoint: &str, api_key: Option<String>) -> Self {
        Self::with_timeout(id, endpoint, api_key, Duration::from_secs(600))
    }

    pub fn with_timeout(id: impl Into<String>, endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .unwrap_or_else(|_| reqwest::Client::new());
        Self {
            id: id.into(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key,
            client,
        }
    }

    /// Reads the key from the named environment variable. An unset variable
    /// is an error: credentials never live in config files.
    pub fn from_env(id: impl Into<String>, endpoint: &str, api_key_env: Option<&str>) -> Result<Self, BackendError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::Credential(var.to_string()))?),
            None => None,
        };
        Ok(Self::new(id, endpoint, api_key))
    }

    pub fn url(&self) -> String {
        format!("{}/chat/completions", self.endpoint)
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    async fn send(&self, request: &ChatRequest, _slot: usize) -> Result<ChatResponse, BackendError> {
        let mut builder = self.client.post(self.url()).json(&request_body(request));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = response.status();
        let body = response
            .text()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                status: status.as_u16(),
                body,
            });
        }
        parse_response_body(&body, request, &self.id)
    }
}

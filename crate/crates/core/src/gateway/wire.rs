//! JSON shapes of the OpenAI-compatible `/chat/completions` endpoint.

use serde_json::{json, Map, Value};

use super::{estimate_tokens, BackendError, ChatMessage, ChatRequest, ChatResponse, ContentPart, Usage};

fn message_content(message: &ChatMessage) -> Value {
    if let [ContentPart::Text { text }] = message.parts.as_slice() {
        return Value::String(text.clone());
    }
    let parts = message
        .parts
        .iter()
        .map(|part| match part {
            ContentPart::Text { text } => json!({"type": "text", "text": text}),
            ContentPart::Image { image } => json!({"type": "image_url", "image_url": {"url": image.wire_url()}}),
        })
        .collect();
    Value::Array(parts)
}

/// The POST body for a request. A message with a single text part is sent
/// with string content; anything else becomes an array of typed parts.
pub fn request_body(request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| json!({"role": m.role.as_str(), "content": message_content(m)}))
        .collect();
    json!({
        "model": request.model,
        "messages": messages,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "max_tokens": request.max_tokens,
        "n": request.n,
    })
}

/// Recursively sorts object keys so two documents compare byte-for-byte
/// regardless of the map implementation serde_json was built with.
pub fn canonicalize(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            let mut out = Map::new();
            for (k, v) in entries {
                out.insert(k.clone(), canonicalize(v));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonicalize).collect()),
        other => other.clone(),
    }
}

/// Pretty-printed canonical JSON with a trailing newline, the golden-file format.
pub fn canonical_string(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(&canonicalize(value)).expect("json values always serialize");
    s.push('\n');
    s
}

fn choice_text(choice: &Value) -> Option<String> {
    match choice.pointer("/message/content")? {
        Value::String(s) => Some(s.clone()),
        Value::Array(parts) => Some(
            parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect::<Vec<_>>()
                .join(""),
        ),
        _ => None,
    }
}

/// Parses a response body. Missing usage is filled in by estimation.
pub fn parse_response_body(body: &str, request: &ChatRequest, backend_id: &str) -> Result<ChatResponse, BackendError> {
    let protocol = |message: String| BackendError::Protocol {
        message,
        body: body.to_string(),
    };
    let value: Value = serde_json::from_str(body).map_err(|e| protocol(format!("invalid JSON: {e}")))?;
    let choices = value
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| protocol("missing `choices` array".into()))?;
    let completions = choices
        .iter()
        .enumerate()
        .map(|(i, c)| choice_text(c).ok_or_else(|| protocol(format!("choice {i} has no message content"))))
        .collect::<Result<Vec<_>, _>>()?;
    if completions.is_empty() {
        return Err(protocol("`choices` is empty".into()));
    }

    let reported = value.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    let (usage, usage_estimated) = match reported {
        Some(u) => (u, false),
        None => (
            Usage {
                prompt_tokens: request.estimated_prompt_tokens(),
                completion_tokens: completions.iter().map(|c| estimate_tokens(c)).sum(),
            },
            true,
        ),
    };
    Ok(ChatResponse {
        completions,
        usage,
        usage_estimated,
        backend_id: backend_id.to_string(),
        attempts: 1,
    })
}

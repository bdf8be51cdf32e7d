//! JSON Lines dataset ingestion.
//!
//! One object per line: `{"id", "question", "image"?, "answer", "metadata"?}`.
//! `image` may be a URL, a `data:` URL, a file path (relative to the dataset
//! file), or an object `{"url"}` / `{"path"}` / `{"base64", "media_type"}`.
//! File paths are read and inlined as base64 at load time.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use base64::Engine;
use serde::Deserialize;
use serde_json::Value;
use thiserror::Error;

use crate::gateway::ImageSource;
use crate::trajectory::Answer;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub image: Option<ImageSource>,
    pub gold: Answer,
    pub metadata: BTreeMap<String, Value>,
}

impl Sample {
    pub fn new(id: impl Into<String>, question: impl Into<String>, gold: &str) -> Self {
        Self {
            id: id.into(),
            question: question.into(),
            image: None,
            gold: Answer::new(gold),
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_image(mut self, image: ImageSource) -> Self {
        self.image = Some(image);
        self
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate sample id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset {0} contains no samples")]
    Empty(String),
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawImage {
    Text(String),
    Url { url: String },
    Path { path: String },
    Inline { base64: String, media_type: Option<String> },
}

#[derive(Deserialize)]
struct RawSample {
    id: Value,
    question: String,
    #[serde(default)]
    image: Option<RawImage>,
    answer: Value,
    #[serde(default)]
    metadata: BTreeMap<String, Value>,
}

fn scalar_to_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn media_type_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    }
}

fn read_image(path: &Path) -> Result<ImageSource, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("image {}: {e}", path.display()))?;
    Ok(ImageSource::Base64 {
        media_type: media_type_for(path).to_string(),
        data: base64::engine::general_purpose::STANDARD.encode(bytes),
    })
}

fn resolve_image(raw: RawImage, base_dir: &Path) -> Result<ImageSource, String> {
    match raw {
        RawImage::Url { url } => Ok(ImageSource::Url { url }),
        RawImage::Path { path } => read_image(&base_dir.join(path)),
        RawImage::Inline { base64, media_type } => Ok(ImageSource::Base64 {
            media_type: media_type.unwrap_or_else(|| "image/png".into()),
            data: base64,
        }),
        RawImage::Text(s) => {
            if let Some(rest) = s.strip_prefix("data:") {
                let (media_type, data) = rest
                    .split_once(";base64,")
                    .ok_or_else(|| "data URL is not base64-encoded".to_string())?;
                Ok(ImageSource::Base64 {
                    media_type: media_type.to_string(),
                    data: data.to_string(),
                })
            } else if s.starts_with("http://") || s.starts_with("https://") {
                Ok(ImageSource::Url { url: s })
            } else {
                let candidate = base_dir.join(&s);
                if candidate.is_file() {
                    read_image(&candidate)
                } else if base64::engine::general_purpose::STANDARD.decode(&s).is_ok() {
                    Ok(ImageSource::Base64 {
                        media_type: "image/png".into(),
                        data: s,
                    })
                } else {
                    Err(format!("image {s:?} is neither a URL, a readable file, nor base64"))
                }
            }
        }
    }
}

/// Parses JSONL text. Blank lines are skipped; image paths resolve against `base_dir`.
pub fn parse_jsonl(text: &str, base_dir: &Path) -> Result<Vec<Sample>, DatasetError> {
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DatasetError::Parse { line: line_no, message };
        let raw: RawSample = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let id = scalar_to_string(&raw.id).ok_or_else(|| parse_err("`id` must be a string or number".into()))?;
        let answer = scalar_to_string(&raw.answer).ok_or_else(|| parse_err("`answer` must be a scalar".into()))?;
        let gold = Answer::new(&answer);
        if gold.canonical_text.is_empty() {
            return Err(parse_err("`answer` is empty".into()));
        }
        if raw.question.trim().is_empty() {
            return Err(parse_err("`question` is empty".into()));
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { line: line_no, id });
        }
        let image = raw
            .image
            .map(|img| resolve_image(img, base_dir))
            .transpose()
            .map_err(parse_err)?;
        samples.push(Sample {
            id,
            question: raw.question,
            image,
            gold,
            metadata: raw.metadata,
        });
    }
    Ok(samples)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let samples = parse_jsonl(&text, base)?;
    if samples.is_empty() {
        return Err(DatasetError::Empty(path.display().to_string()));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lines_and_skips_blanks() {
        let text = r#"{"id": "a", "question": "1+1?", "answer": "2"}

{"id": 7, "question": "Pick", "answer": "b", "metadata": {"subject": "logic"}}
"#;
        let s = parse_jsonl(text, Path::new(".")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[1].id, "7");
        assert_eq!(s[1].gold.canonical_text, "B");
        assert_eq!(s[1].metadata["subject"], "logic");
    }

    #[test]
    fn image_forms() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("fig.jpg"), [1u8, 2, 3]).unwrap();
        let text = r#"{"id":"u","question":"q","answer":"A","image":"https://example.com/x.png"}
{"id":"p","question":"q","answer":"A","image":"fig.jpg"}
{"id":"d","question":"q","answer":"A","image":"data:image/gif;base64,R0lG"}
{"id":"o","question":"q","answer":"A","image":{"base64":"AAAA"}}"#;
        let s = parse_jsonl(text, dir.path()).unwrap();
        assert_eq!(
            s[0].image,
            Some(ImageSource::Url {
                url: "https://example.com/x.png".into()
            })
        );
        assert_eq!(
            s[1].image,
            Some(ImageSource::Base64 {
                media_type: "image/jpeg".into(),
                data: "AQID".into()
            })
        );
        assert!(matches!(&s[2].image, Some(ImageSource::Base64 { media_type, .. }) if media_type == "image/gif"));
        assert!(matches!(&s[3].image, Some(ImageSource::Base64 { data, .. }) if data == "AAAA"));
    }

    #[test]
    fn rejects_bad_input() {
        let dup =
            "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"A\"}\n{\"id\":\"a\",\"question\":\"q\",\"answer\":\"B\"}";
        assert!(matches!(
            parse_jsonl(dup, Path::new(".")),
            Err(DatasetError::DuplicateId { line: 2, .. })
        ));
        let empty_gold = r#"{"id":"a","question":"q","answer":"  "}"#;
        assert!(matches!(
            parse_jsonl(empty_gold, Path::new(".")),
            Err(DatasetError::Parse { line: 1, .. })
        ));
        assert!(parse_jsonl("not json", Path::new(".")).is_err());
    }

    #[test]
    fn missing_file_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_jsonl(&dir.path().join("nope.jsonl")),
            Err(DatasetError::Io { .. })
        ));
        let p = dir.path().join("empty.jsonl");
        std::fs::write(&p, "\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(DatasetError::Empty(_))));
    }
}

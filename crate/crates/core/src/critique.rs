//! Teacher judgment calls and the parser for their replies.
//!
//! The teacher is asked for a JSON array of `{"action", "id"/"ids", "text"}`
//! objects. Parsing never fails: anything unusable becomes a warning, and
//! every action that survives has been checked against the store snapshot
//! it will be applied to.

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{ChatResponse, GatewayError, ModelClient};
use crate::prompts::{CritiqueInput, PromptError, PromptLibrary};
use crate::store::{CompressionAction, ExperienceId, ExperienceStore, UpdateAction};

/// Default word limit for texts produced by compression.
pub const DEFAULT_WORD_CAP: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionEnvelope<A> {
    pub raw_response: String,
    pub parsed_actions: Vec<A>,
    pub parse_warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    Update,
    Compression { word_cap: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ActionBatch {
    Update(Vec<UpdateAction>),
    Compression(Vec<CompressionAction>),
}

impl ActionBatch {
    pub fn len(&self) -> usize {
        match self {
            ActionBatch::Update(a) => a.len(),
            ActionBatch::Compression(a) => a.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Error)]
pub enum CritiqueError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One action as written by the teacher, before validation.
#[derive(Debug, Default)]
struct RawEntry {
    keyword: String,
    ids: Vec<Result<ExperienceId, String>>,
    text: Option<String>,
}

fn parse_id_value(v: &Value) -> Result<ExperienceId, String> {
    match v {
        Value::String(s) => s.parse().map_err(|_| format!("bad id {s:?}")),
        Value::Number(n) => n.as_u64().map(ExperienceId).ok_or_else(|| format!("bad id {n}")),
        other => Err(format!("bad id {other}")),
    }
}

fn entry_from_json(v: &Value) -> Result<RawEntry, String> {
    let obj = v.as_object().ok_or_else(|| format!("entry is not an object: {v}"))?;
    let keyword = obj
        .get("action")
        .or_else(|| obj.get("operation"))
        .and_then(Value::as_str)
        .ok_or("entry has no \"action\" keyword")?
        .trim()
        .to_lowercase();
    let mut ids = Vec::new();
    if let Some(id) = obj.get("id") {
        ids.push(parse_id_value(id));
    }
    if let Some(Value::Array(list)) = obj.get("ids") {
        ids.extend(list.iter().map(parse_id_value));
    }
    let text = obj
        .get("text")
        .or_else(|| obj.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string);
    Ok(RawEntry { keyword, ids, text })
}

fn fenced_blocks(raw: &str) -> Vec<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"(?s)```[A-Za-z]*[ \t]*\n?(.*?)```").expect("valid regex"));
    re.captures_iter(raw)
        .map(|c| c.get(1).map_or("", |m| m.as_str()))
        .collect()
}

fn between(text: &str, open: char, close: char) -> Option<&str> {
    let start = text.find(open)?;
    let end = text.rfind(close)?;
    (end > start).then(|| &text[start..=end])
}

/// JSON entries found in the reply, or `None` when there is no JSON payload.
fn json_entries(raw: &str) -> Option<Vec<Value>> {
    let mut candidates: Vec<&str> = fenced_blocks(raw);
    candidates.push(raw);
    for candidate in candidates {
        let trimmed = candidate.trim();
        let attempts = [Some(trimmed), between(trimmed, '[', ']'), between(trimmed, '{', '}')];
        for text in attempts.into_iter().flatten() {
            match serde_json::from_str::<Value>(text) {
                Ok(Value::Array(items)) => return Some(items),
                Ok(Value::Object(mut obj)) => {
                    if let Some(Value::Array(items)) = obj.remove("actions") {
                        return Some(items);
                    }
                    return Some(vec![Value::Object(obj)]);
                }
                _ => {}
            }
        }
    }
    None
}

/// `ACTION: add | ID: E3 | TEXT: ...`, one action per line.
fn line_entries(raw: &str) -> Vec<RawEntry> {
    static RE: OnceLock<Regex> = OnceLock::new();
    static TEXT: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^(?i)\s*(action|ids?|text)\s*:\s*(.*?)\s*$").expect("valid regex"));
    let text_field = TEXT.get_or_init(|| Regex::new(r"(?i)\|\s*text\s*:").expect("valid regex"));
    let mut out = Vec::new();
    for line in raw.lines() {
        let line = line.trim().trim_start_matches(['-', '*']).trim();
        if !line.to_lowercase().starts_with("action") {
            continue;
        }
        let mut entry = RawEntry::default();
        // TEXT runs to the end of the line and may itself contain '|'
        let (head, text) = match text_field.find(line) {
            Some(m) => (&line[..m.start()], Some(line[m.end()..].trim())),
            None => (line, None),
        };
        entry.text = text.map(str::to_string);
        for field in head.split('|') {
            let Some(c) = re.captures(field) else { continue };
            let value = c.get(2).map_or("", |m| m.as_str());
            match c[1].to_lowercase().as_str() {
                "action" => entry.keyword = value.to_lowercase(),
                "text" => entry.text = Some(value.to_string()),
                _ => entry.ids.extend(
                    value
                        .split([',', ' '])
                        .map(|s| s.trim_matches(['[', ']', '"']))
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<ExperienceId>().map_err(|_| format!("bad id {s:?}"))),
                ),
            }
        }
        if !entry.keyword.is_empty() {
            out.push(entry);
        }
    }
    out
}

fn is_nan_reply(raw: &str) -> bool {
    let stripped: String = raw
        .chars()
        .filter(|c| !matches!(c, '`' | '"' | '\'' | '[' | ']' | '.'))
        .collect();
    let s = stripped.trim().to_lowercase();
    let s = s.strip_prefix("json").unwrap_or(&s).trim();
    matches!(s, "nan" | "none")
}

fn raw_entries(raw: &str, warnings: &mut Vec<String>) -> Vec<Result<RawEntry, String>> {
    if let Some(values) = json_entries(raw) {
        return values.iter().map(entry_from_json).collect();
    }
    if is_nan_reply(raw) {
        return vec![Ok(RawEntry {
            keyword: "nan".into(),
            ..RawEntry::default()
        })];
    }
    let lines = line_entries(raw);
    if lines.is_empty() {
        warnings.push("no parseable actions in teacher reply".into());
    } else {
        warnings.push("reply is not JSON; used the line-based fallback".into());
    }
    lines.into_iter().map(Ok).collect()
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn required_text(entry: &RawEntry) -> Result<String, String> {
    match entry.text.as_deref().map(str::trim) {
        Some(t) if !t.is_empty() => Ok(t.to_string()),
        _ => Err(format!("\"{}\" needs a non-empty text", entry.keyword)),
    }
}

fn ids_of(entry: &RawEntry) -> Result<Vec<ExperienceId>, String> {
    entry.ids.iter().cloned().collect()
}

fn single_id(entry: &RawEntry) -> Result<ExperienceId, String> {
    match ids_of(entry)?.as_slice() {
        [id] => Ok(*id),
        [] => Err(format!("\"{}\" needs an id", entry.keyword)),
        _ => Err(format!("\"{}\" takes exactly one id", entry.keyword)),
    }
}

fn to_update(entry: &RawEntry) -> Result<UpdateAction, String> {
    match entry.keyword.as_str() {
        "add" => Ok(UpdateAction::Add {
            text: required_text(entry)?,
        }),
        "modify" | "rewrite" | "update" => Ok(UpdateAction::Modify {
            id: single_id(entry)?,
            text: required_text(entry)?,
        }),
        "delete" | "remove" => Ok(UpdateAction::Delete { id: single_id(entry)? }),
        "nan" | "none" => Ok(UpdateAction::None),
        other => Err(format!("unknown update action {other:?}")),
    }
}

fn to_compression(entry: &RawEntry, word_cap: usize) -> Result<Option<CompressionAction>, String> {
    let capped = |text: String| {
        let n = word_count(&text);
        if n > word_cap {
            Err(format!("word cap: text has {n} words, limit is {word_cap}"))
        } else {
            Ok(text)
        }
    };
    let action = match entry.keyword.as_str() {
        "merge" => {
            let mut ids = ids_of(entry)?;
            let mut seen = HashSet::new();
            ids.retain(|id| seen.insert(*id));
            if ids.len() < 2 {
                return Err("\"merge\" needs at least two distinct ids".into());
            }
            CompressionAction::Merge {
                ids,
                text: capped(required_text(entry)?)?,
            }
        }
        "rewrite" | "modify" => CompressionAction::Rewrite {
            id: single_id(entry)?,
            text: capped(required_text(entry)?)?,
        },
        "delete" | "remove" => CompressionAction::Delete { id: single_id(entry)? },
        "retain" | "keep" => CompressionAction::Retain { id: single_id(entry)? },
        "nan" | "none" => return Ok(None),
        other => return Err(format!("unknown compression action {other:?}")),
    };
    Ok(Some(action))
}

/// Parses a teacher reply into actions valid against `snapshot`.
///
/// Update actions are checked by applying them, in order, to a scratch copy
/// of the snapshot, so the surviving batch always applies cleanly. Compression
/// actions must reference existing ids, each at most once per batch.
pub fn parse_actions(raw: &str, mode: ParseMode, snapshot: &ExperienceStore) -> (ActionBatch, Vec<String>) {
    let mut warnings = Vec::new();
    let entries = raw_entries(raw, &mut warnings);
    let mut warn = |i: usize, msg: String| warnings.push(format!("action {}: {msg}", i + 1));

    let batch = match mode {
        ParseMode::Update => {
            let mut scratch = snapshot.clone();
            let mut actions = Vec::new();
            for (i, entry) in entries.iter().enumerate() {
                let action = entry.as_ref().map_err(String::clone).and_then(to_update);
                match action {
                    Ok(action) => match scratch.apply_update(&action) {
                        Ok(()) => actions.push(action),
                        Err(e) => warn(i, format!("dropped: {e}")),
                    },
                    Err(e) => warn(i, format!("dropped: {e}")),
                }
            }
            ActionBatch::Update(actions)
        }
        ParseMode::Compression { word_cap } => {
            let mut referenced = HashSet::new();
            let mut actions = Vec::new();
            for (i, entry) in entries.iter().enumerate() {
                let action = match entry
                    .as_ref()
                    .map_err(String::clone)
                    .and_then(|e| to_compression(e, word_cap))
                {
                    Ok(Some(a)) => a,
                    Ok(None) => continue,
                    Err(e) => {
                        warn(i, format!("dropped: {e}"));
                        continue;
                    }
                };
                let ids = action.ids();
                if let Some(id) = ids.iter().find(|id| !snapshot.contains(**id)) {
                    warn(i, format!("dropped: unknown experience id {id}"));
                } else if let Some(id) = ids.iter().find(|id| referenced.contains(*id)) {
                    warn(i, format!("dropped: {id} already used by an earlier action"));
                } else {
                    referenced.extend(ids);
                    actions.push(action);
                }
            }
            ActionBatch::Compression(actions)
        }
    };
    if batch.is_empty() && !warnings.iter().any(|w| w.starts_with("no parseable")) && !is_nan_reply(raw) {
        warnings.push("no valid actions survived validation".into());
    }
    (batch, warnings)
}

pub fn parse_update_actions(raw: &str, snapshot: &ExperienceStore) -> ActionEnvelope<UpdateAction> {
    let (batch, parse_warnings) = parse_actions(raw, ParseMode::Update, snapshot);
    let ActionBatch::Update(parsed_actions) = batch else {
        unreachable!("update mode yields update actions")
    };
    ActionEnvelope {
        raw_response: raw.to_string(),
        parsed_actions,
        parse_warnings,
    }
}

pub fn parse_compression_actions(
    raw: &str,
    snapshot: &ExperienceStore,
    word_cap: usize,
) -> ActionEnvelope<CompressionAction> {
    let (batch, parse_warnings) = parse_actions(raw, ParseMode::Compression { word_cap }, snapshot);
    let ActionBatch::Compression(parsed_actions) = batch else {
        unreachable!("compression mode yields compression actions")
    };
    ActionEnvelope {
        raw_response: raw.to_string(),
        parsed_actions,
        parse_warnings,
    }
}

/// One teacher call over all of a sample's trajectories. The actions are
/// returned, not applied.
pub async fn critique_and_update(
    input: &CritiqueInput<'_>,
    teacher: &ModelClient,
    prompts: &PromptLibrary,
) -> Result<(ActionEnvelope<UpdateAction>, ChatResponse), CritiqueError> {
    let prompt = prompts.build_critique_prompt(input)?;
    let response = teacher.gateway.complete(&teacher.request(prompt.messages)).await?;
    let envelope = parse_update_actions(response.first_text(), input.store);
    Ok((envelope, response))
}

/// Asks the teacher to consolidate the store. The item cap in the prompt is
/// the smaller of the item budget and the retention count.
pub async fn compress_via_teacher(
    store: &ExperienceStore,
    teacher: &ModelClient,
    prompts: &PromptLibrary,
    word_cap: usize,
) -> Result<(ActionEnvelope<CompressionAction>, ChatResponse), CritiqueError> {
    let cap = store.budgets.item_budget.min(store.budgets.retain_top);
    let prompt = prompts.build_compress_prompt(store, cap, word_cap)?;
    let response = teacher.gateway.complete(&teacher.request(prompt.messages)).await?;
    let envelope = parse_compression_actions(response.first_text(), store, word_cap);
    Ok((envelope, response))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(n: usize) -> ExperienceStore {
        let mut s = ExperienceStore::default();
        for i in 0..n {
            s.apply_update(&UpdateAction::Add {
                text: format!("experience {i}"),
            })
            .unwrap();
        }
        s
    }

    fn updates(raw: &str, s: &ExperienceStore) -> (Vec<UpdateAction>, Vec<String>) {
        let env = parse_update_actions(raw, s);
        (env.parsed_actions, env.parse_warnings)
    }

    #[test]
    fn single_add_object() {
        let (a, w) = updates(
            r#"{"action":"add","text":"For optimization, push variables to constraints"}"#,
            &store(0),
        );
        assert_eq!(
            a,
            vec![UpdateAction::Add {
                text: "For optimization, push variables to constraints".into()
            }]
        );
        assert!(w.is_empty());
    }

    #[test]
    fn nan_reply_is_none() {
        for raw in ["nan", " NaN. ", "```\nnan\n```", r#"[{"action":"nan"}]"#] {
            assert_eq!(updates(raw, &store(1)).0, vec![UpdateAction::None], "{raw}");
        }
    }

    #[test]
    fn fenced_array_with_prose_and_dangling_id() {
        let raw = "Analysis first.\n```json\n[\n {\"action\": \"DELETE\", \"id\": \"E1\"},\n {\"action\": \"modify\", \"id\": \"E7\", \"text\": \"x\"},\n {\"action\": \"Add\", \"text\": \"check the units\"}\n]\n```\nDone.";
        let (a, w) = updates(raw, &store(2));
        assert_eq!(
            a,
            vec![
                UpdateAction::Delete { id: ExperienceId(1) },
                UpdateAction::Add {
                    text: "check the units".into()
                }
            ]
        );
        assert_eq!(w.len(), 1);
        assert!(w[0].contains("E7"), "{w:?}");
    }

    #[test]
    fn batch_is_validated_in_order() {
        let raw = r#"[{"action":"delete","id":"E1"},{"action":"modify","id":"E1","text":"y"}]"#;
        let (a, w) = updates(raw, &store(1));
        assert_eq!(a, vec![UpdateAction::Delete { id: ExperienceId(1) }]);
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn prose_only_yields_nothing() {
        let (a, w) = updates("I think the experiences are fine as they are.", &store(1));
        assert!(a.is_empty());
        assert_eq!(w, vec!["no parseable actions in teacher reply".to_string()]);
    }

    #[test]
    fn line_fallback() {
        let raw = "ACTION: add | TEXT: compare ratios | not differences\n- ACTION: delete | ID: E2\nACTION: modify | ID: E9 | TEXT: z";
        let (a, w) = updates(raw, &store(2));
        assert_eq!(
            a,
            vec![
                UpdateAction::Add {
                    text: "compare ratios | not differences".into()
                },
                UpdateAction::Delete { id: ExperienceId(2) }
            ]
        );
        assert!(w.iter().any(|w| w.contains("line-based")));
        assert!(w.iter().any(|w| w.contains("E9")));
    }

    #[test]
    fn numeric_and_bracketed_ids() {
        let raw = r#"[{"action":"delete","id":2},{"action":"modify","id":"[E1]","text":"t"}]"#;
        let (a, _) = updates(raw, &store(2));
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn compression_merge_and_word_cap() {
        let s = store(4);
        let long = vec!["word"; 40].join(" ");
        let raw = format!(
            r#"[{{"action":"merge","ids":["E1","E2"],"text":"one two three four five six seven eight nine ten"}},
               {{"action":"rewrite","id":"E3","text":"{long}"}},
               {{"action":"retain","id":"E4"}}]"#
        );
        let env = parse_compression_actions(&raw, &s, 32);
        assert_eq!(env.parsed_actions.len(), 2);
        assert!(matches!(&env.parsed_actions[0], CompressionAction::Merge { ids, .. } if ids.len() == 2));
        assert!(env.parse_warnings.iter().any(|w| w.contains("word cap")));
    }

    #[test]
    fn compression_rejects_double_references_and_small_merges() {
        let s = store(3);
        let raw = r#"[{"action":"merge","ids":["E1","E1"],"text":"a"},
                      {"action":"delete","id":"E2"},
                      {"action":"retain","id":"E2"},
                      {"action":"modify","id":"E3","text":"b"}]"#;
        let env = parse_compression_actions(raw, &s, 32);
        assert_eq!(
            env.parsed_actions,
            vec![
                CompressionAction::Delete { id: ExperienceId(2) },
                CompressionAction::Rewrite {
                    id: ExperienceId(3),
                    text: "b".into()
                }
            ]
        );
        assert_eq!(env.parse_warnings.len(), 2);
    }

    #[test]
    fn surviving_compression_batch_applies() {
        let mut s = store(5);
        let raw = r#"[{"action":"merge","ids":["E1","E2","E3"],"text":"merged"},{"action":"delete","id":"E9"}]"#;
        let env = parse_compression_actions(raw, &s, 32);
        s.apply_compression(&env.parsed_actions, 15).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn wrong_mode_keywords_are_dropped() {
        let s = store(2);
        let (a, w) = updates(r#"[{"action":"merge","ids":["E1","E2"],"text":"m"}]"#, &s);
        assert!(a.is_empty());
        assert!(w.iter().any(|w| w.contains("unknown update action")));
    }

    #[test]
    fn garbage_never_panics() {
        let s = store(2);
        for raw in [
            "",
            "[",
            "{\"action\":",
            "```json\n```",
            "[1, null, {}]",
            "ACTION:",
            "][",
        ] {
            let _ = parse_actions(raw, ParseMode::Update, &s);
            let _ = parse_actions(raw, ParseMode::Compression { word_cap: 32 }, &s);
        }
    }
}

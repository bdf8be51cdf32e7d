//! The experience store: the only state that changes during distillation.
//!
//! Items carry stable `E{n}` identifiers drawn from a monotone counter, so an
//! identifier is never reused after deletion. Two action families mutate the
//! store: per-sample [`UpdateAction`]s from teacher critique, and
//! [`CompressionAction`]s followed by utility-ranked top-R selection when a
//! budget is exceeded. Every mutation validates before touching state, so a
//! rejected action leaves the store exactly as it was.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::estimate_tokens;

pub const STORE_FORMAT_VERSION: u32 = 1;

/// Rendered in place of the item list when the store is empty.
pub const EMPTY_STORE_TEXT: &str = "(no experiences yet)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ExperienceId(pub u64);

impl fmt::Display for ExperienceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "E{}", self.0)
    }
}

impl FromStr for ExperienceId {
    type Err = StoreError;

    /// Accepts `E12`, `e12` and `[E12]`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().trim_start_matches('[').trim_end_matches(']').trim();
        t.strip_prefix(['E', 'e'])
            .filter(|digits| !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|digits| digits.parse().ok())
            .map(ExperienceId)
            .ok_or_else(|| StoreError::BadId(s.to_string()))
    }
}

impl Serialize for ExperienceId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ExperienceId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceItem {
    pub id: ExperienceId,
    pub text: String,
    pub usage_count: u64,
    pub created_step: u64,
    #[serde(default)]
    pub last_used_step: Option<u64>,
}

impl ExperienceItem {
    /// `ln(1 + usage_count)`.
    pub fn utility(&self) -> f64 {
        utility(self.usage_count)
    }

    /// The item's line inside prompts.
    pub fn line(&self) -> String {
        format!("[{}] {}", self.id, self.text)
    }

    pub fn token_length(&self) -> u64 {
        estimate_tokens(&self.line())
    }
}

pub fn utility(usage_count: u64) -> f64 {
    (usage_count as f64).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    /// Maximum serialized length of the store, in estimated tokens.
    #[serde(rename = "B")]
    pub token_budget: u64,
    /// Maximum number of items.
    #[serde(rename = "B_item")]
    pub item_budget: usize,
    /// Items kept by utility-ranked selection at compression time.
    #[serde(rename = "R")]
    pub retain_top: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            token_budget: 4000,
            item_budget: 15,
            retain_top: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum UpdateAction {
    Add { text: String },
    Modify { id: ExperienceId, text: String },
    Delete { id: ExperienceId },
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "lowercase")]
pub enum CompressionAction {
    Merge { ids: Vec<ExperienceId>, text: String },
    Rewrite { id: ExperienceId, text: String },
    Delete { id: ExperienceId },
    Retain { id: ExperienceId },
}

impl CompressionAction {
    pub fn ids(&self) -> Vec<ExperienceId> {
        match self {
            CompressionAction::Merge { ids, .. } => ids.clone(),
            CompressionAction::Rewrite { id, .. }
            | CompressionAction::Delete { id }
            | CompressionAction::Retain { id } => vec![*id],
        }
    }

    pub fn text(&self) -> Option<&str> {
        match self {
            CompressionAction::Merge { text, .. } | CompressionAction::Rewrite { text, .. } => Some(text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum StoreError {
    #[error("unknown experience id {0}")]
    UnknownId(ExperienceId),
    #[error("not an experience id: {0:?}")]
    BadId(String),
    #[error("experience text is empty")]
    EmptyText,
    #[error("merge needs at least two distinct ids, got {0}")]
    MergeTooSmall(usize),
    #[error("experience id {0} referenced by more than one compression action")]
    DuplicateReference(ExperienceId),
    #[error("step {requested} is behind the store's step counter {current}")]
    StepRegression { requested: u64, current: u64 },
    #[error("budget still exceeded after compression: {items} items (limit {item_budget}), {tokens} tokens (limit {token_budget})")]
    BudgetExceeded {
        items: usize,
        item_budget: usize,
        tokens: u64,
        token_budget: u64,
    },
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("corrupt store file {path} at line {line}, column {column}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported store format version {0}")]
    Version(u32),
}

/// Serialized form of a store as it appears inside a prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SerializedExperiences {
    pub text: String,
    pub ids: Vec<ExperienceId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UsageReport {
    pub incremented: Vec<ExperienceId>,
    pub unknown: Vec<ExperienceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressionOutcome {
    pub items_before: usize,
    pub items_after: usize,
    pub tokens_before: u64,
    pub tokens_after: u64,
    pub merged_into: Vec<ExperienceId>,
    /// Items dropped by top-R selection (not by explicit Delete).
    pub dropped_by_selection: Vec<ExperienceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperienceStore {
    pub version: u32,
    pub next_id: u64,
    pub step_counter: u64,
    pub budgets: Budgets,
    pub items: Vec<ExperienceItem>,
}

impl Default for ExperienceStore {
    fn default() -> Self {
        Self::new(Budgets::default())
    }
}

/// Whitespace runs, newlines included, collapse to one space so every item
/// stays on a single prompt line.
fn clean_text(text: &str) -> Result<String, StoreError> {
    let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ");
    if cleaned.is_empty() {
        Err(StoreError::EmptyText)
    } else {
        Ok(cleaned)
    }
}

impl ExperienceStore {
    pub fn new(budgets: Budgets) -> Self {
        Self {
            version: STORE_FORMAT_VERSION,
            next_id: 1,
            step_counter: 0,
            budgets,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ExperienceId) -> Option<&ExperienceItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn contains(&self, id: ExperienceId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> Vec<ExperienceId> {
        self.items.iter().map(|i| i.id).collect()
    }

    pub fn total_usage(&self) -> u64 {
        self.items.iter().map(|i| i.usage_count).sum()
    }

    fn position(&self, id: ExperienceId) -> Result<usize, StoreError> {
        self.items
            .iter()
            .position(|i| i.id == id)
            .ok_or(StoreError::UnknownId(id))
    }

    fn issue_id(&mut self) -> ExperienceId {
        let id = ExperienceId(self.next_id);
        self.next_id += 1;
        id
    }

    /// Moves the step counter forward. Steps never go backwards.
    pub fn advance_to(&mut self, step: u64) -> Result<(), StoreError> {
        if step < self.step_counter {
            return Err(StoreError::StepRegression {
                requested: step,
                current: self.step_counter,
            });
        }
        self.step_counter = step;
        Ok(())
    }

    pub fn apply_update(&mut self, action: &UpdateAction) -> Result<(), StoreError> {
        match action {
            UpdateAction::Add { text } => {
                let text = clean_text(text)?;
                let id = self.issue_id();
                self.items.push(ExperienceItem {
                    id,
                    text,
                    usage_count: 0,
                    created_step: self.step_counter,
                    last_used_step: None,
                });
            }
            UpdateAction::Modify { id, text } => {
                let pos = self.position(*id)?;
                self.items[pos].text = clean_text(text)?;
            }
            UpdateAction::Delete { id } => {
                let pos = self.position(*id)?;
                self.items.remove(pos);
            }
            UpdateAction::None => {}
        }
        Ok(())
    }

    /// Adds one to the usage count of each distinct known id. Unknown ids are
    /// skipped and reported.
    pub fn record_usage(&mut self, used: &[ExperienceId], step: u64) -> Result<UsageReport, StoreError> {
        self.advance_to(step)?;
        let mut seen = HashSet::new();
        let mut report = UsageReport::default();
        for &id in used {
            if !seen.insert(id) {
                continue;
            }
            match self.items.iter_mut().find(|i| i.id == id) {
                Some(item) => {
                    item.usage_count += 1;
                    item.last_used_step = Some(step);
                    report.incremented.push(id);
                }
                None => {
                    tracing::warn!(%id, "usage reported for an id not in the store");
                    report.unknown.push(id);
                }
            }
        }
        Ok(report)
    }

    /// Sum of per-item serialized lengths, in estimated tokens.
    pub fn token_length(&self) -> u64 {
        self.items.iter().map(ExperienceItem::token_length).sum()
    }

    pub fn needs_compression(&self) -> bool {
        self.token_length() > self.budgets.token_budget || self.items.len() > self.budgets.item_budget
    }

    pub fn within_budgets(&self) -> bool {
        !self.needs_compression()
    }

    /// Applies a compression batch, then keeps the `retain_top` items with the
    /// highest utility (ties go to the lower id). All-or-nothing: on error the
    /// store is unchanged.
    pub fn apply_compression(
        &mut self,
        actions: &[CompressionAction],
        retain_top: usize,
    ) -> Result<CompressionOutcome, StoreError> {
        let mut referenced = HashSet::new();
        for action in actions {
            let ids = action.ids();
            if let CompressionAction::Merge { ids, .. } = action {
                let distinct: BTreeSet<_> = ids.iter().collect();
                if distinct.len() < 2 {
                    return Err(StoreError::MergeTooSmall(distinct.len()));
                }
            }
            for id in ids {
                if !self.contains(id) {
                    return Err(StoreError::UnknownId(id));
                }
                if !referenced.insert(id) {
                    return Err(StoreError::DuplicateReference(id));
                }
            }
            if let Some(text) = action.text() {
                clean_text(text)?;
            }
        }

        let mut next = self.clone();
        let mut merged_into = Vec::new();
        for action in actions {
            match action {
                CompressionAction::Merge { ids, text } => {
                    let parts: Vec<ExperienceItem> =
                        next.items.iter().filter(|i| ids.contains(&i.id)).cloned().collect();
                    next.items.retain(|i| !ids.contains(&i.id));
                    let id = next.issue_id();
                    next.items.push(ExperienceItem {
                        id,
                        text: clean_text(text)?,
                        usage_count: parts.iter().map(|p| p.usage_count).sum(),
                        created_step: next.step_counter,
                        last_used_step: parts.iter().filter_map(|p| p.last_used_step).max(),
                    });
                    merged_into.push(id);
                }
                CompressionAction::Rewrite { id, text } => {
                    let pos = next.position(*id)?;
                    next.items[pos].text = clean_text(text)?;
                }
                CompressionAction::Delete { id } => {
                    let pos = next.position(*id)?;
                    next.items.remove(pos);
                }
                CompressionAction::Retain { .. } => {}
            }
        }

        let kept: HashSet<ExperienceId> = select_top(&next.items, retain_top).into_iter().collect();
        let dropped_by_selection: Vec<ExperienceId> = next
            .items
            .iter()
            .map(|i| i.id)
            .filter(|id| !kept.contains(id))
            .collect();
        next.items.retain(|i| kept.contains(&i.id));

        let tokens = next.token_length();
        if next.items.len() > next.budgets.item_budget || tokens > next.budgets.token_budget {
            return Err(StoreError::BudgetExceeded {
                items: next.items.len(),
                item_budget: next.budgets.item_budget,
                tokens,
                token_budget: next.budgets.token_budget,
            });
        }

        let outcome = CompressionOutcome {
            items_before: self.items.len(),
            items_after: next.items.len(),
            tokens_before: self.token_length(),
            tokens_after: tokens,
            merged_into,
            dropped_by_selection,
        };
        *self = next;
        Ok(outcome)
    }

    pub fn serialize(&self) -> SerializedExperiences {
        if self.items.is_empty() {
            return SerializedExperiences {
                text: EMPTY_STORE_TEXT.to_string(),
                ids: Vec::new(),
            };
        }
        let lines: Vec<String> = self.items.iter().map(ExperienceItem::line).collect();
        SerializedExperiences {
            text: lines.join("\n"),
            ids: self.ids(),
        }
    }

    /// Items sorted by utility, highest first, ties by lower id.
    pub fn ranked(&self) -> Vec<&ExperienceItem> {
        let mut items: Vec<&ExperienceItem> = self.items.iter().collect();
        items.sort_by(|a, b| b.usage_count.cmp(&a.usage_count).then(a.id.cmp(&b.id)));
        items
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("store always serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, StoreError> {
        let store: ExperienceStore = serde_json::from_str(text).map_err(|e| StoreError::Corrupt {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if store.version > STORE_FORMAT_VERSION {
            return Err(StoreError::Version(store.version));
        }
        Ok(store)
    }

    pub fn persist(&self, path: &Path) -> Result<(), StoreError> {
        let io = |e: std::io::Error| StoreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(io)?;
        }
        // write-then-rename so a crash never leaves a half-written store behind
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()).map_err(io)?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn restore(path: &Path) -> Result<Self, StoreError> {
        let text = std::fs::read_to_string(path).map_err(|e| StoreError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    /// SHA-256 of the persisted form.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

/// Ids of the `r` highest-utility items; ties go to the lower id.
pub fn select_top(items: &[ExperienceItem], r: usize) -> Vec<ExperienceId> {
    let mut ranked: Vec<&ExperienceItem> = items.iter().collect();
    // utility is strictly monotone in usage_count, so ranking on the count is exact
    ranked.sort_by(|a, b| b.usage_count.cmp(&a.usage_count).then(a.id.cmp(&b.id)));
    ranked.into_iter().take(r).map(|i| i.id).collect()
}

/// Parses the prompt form produced by [`ExperienceStore::serialize`].
pub fn parse_serialized(text: &str) -> Vec<(ExperienceId, String)> {
    if text.trim() == EMPTY_STORE_TEXT {
        return Vec::new();
    }
    text.lines()
        .filter_map(|line| {
            let rest = line.strip_prefix('[')?;
            let (id, body) = rest.split_once("] ")?;
            Some((id.parse().ok()?, body.to_string()))
        })
        .collect()
}

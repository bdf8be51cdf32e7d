//! From raw model output to structured, labeled trajectories.

use std::fmt;
use std::sync::OnceLock;

use num::{BigInt, BigRational, Zero};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Sample;
use crate::gateway::{ChatResponse, GatewayError, ModelClient};
use crate::prompts::{PromptError, PromptLibrary};

/// A normalized final answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub canonical_text: String,
    pub raw_span: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum AnswerKey {
    Number(BigRational),
    Text(String),
}

fn regex(cell: &'static OnceLock<Regex>, pattern: &str) -> &'static Regex {
    cell.get_or_init(|| Regex::new(pattern).expect("static regex"))
}

/// Trim, drop markdown emphasis and a trailing period, collapse whitespace,
/// case-fold; a lone choice letter A-E (optionally parenthesized) is uppercased.
pub fn normalize_answer(raw: &str) -> String {
    static CHOICE: OnceLock<Regex> = OnceLock::new();
    let trimmed = raw
        .trim()
        .trim_matches(|c: char| c == '*' || c == '`' || c.is_whitespace());
    let trimmed = trimmed.strip_suffix('.').unwrap_or(trimmed);
    let collapsed = trimmed.split_whitespace().collect::<Vec<_>>().join(" ");
    let folded = collapsed.to_lowercase();
    match regex(&CHOICE, r"^\(?([a-e])\)?$").captures(&folded) {
        Some(c) => c[1].to_uppercase(),
        None => folded,
    }
}

fn parse_number(text: &str) -> Option<BigRational> {
    static DECIMAL: OnceLock<Regex> = OnceLock::new();
    static FRACTION: OnceLock<Regex> = OnceLock::new();
    if let Some(c) = regex(&FRACTION, r"^([+-]?\d+)\s*/\s*(\d+)$").captures(text) {
        let num: BigInt = c[1].parse().ok()?;
        let den: BigInt = c[2].parse().ok()?;
        if den.is_zero() {
            return None;
        }
        return Some(BigRational::new(num, den));
    }
    let c = regex(&DECIMAL, r"^([+-]?)(\d*)(?:\.(\d+))?$").captures(text)?;
    let int_part = c.get(2).map_or("", |m| m.as_str());
    let frac_part = c.get(3).map_or("", |m| m.as_str());
    if int_part.is_empty() && frac_part.is_empty() {
        return None;
    }
    let digits: BigInt = format!("{}{int_part}{frac_part}", &c[1]).parse().ok()?;
    let scale = num::pow(BigInt::from(10), frac_part.len());
    Some(BigRational::new(digits, scale))
}

impl Answer {
    pub fn new(raw: &str) -> Self {
        Self {
            canonical_text: normalize_answer(raw),
            raw_span: raw.to_string(),
        }
    }

    fn key(&self) -> AnswerKey {
        match parse_number(&self.canonical_text) {
            Some(n) => AnswerKey::Number(n),
            None => AnswerKey::Text(self.canonical_text.clone()),
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_text)
    }
}

/// Equality after normalization; numeric answers compare as exact rationals,
/// so `0.5`, `1/2` and `.50` are the same answer.
pub fn answers_equal(a: &Answer, b: &Answer) -> bool {
    a.key() == b.key()
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("no answer marker found; output ends with: {tail:?}")]
    NoAnswer { tail: String },
}

fn tail_chars(text: &str, n: usize) -> String {
    let count = text.chars().count();
    text.chars().skip(count.saturating_sub(n)).collect()
}

/// Content after the last `Answer:` / `<Answer:>` / `<Answer>` marker, up to
/// the end of its line (or the next non-empty line if the marker ends a line).
pub fn extract_answer(full_text: &str) -> Result<Answer, TrajectoryError> {
    static MARKER: OnceLock<Regex> = OnceLock::new();
    let no_answer = || TrajectoryError::NoAnswer {
        tail: tail_chars(full_text, 200),
    };
    let last = regex(&MARKER, r"<Answer:?>\s*:?|Answer\s*:")
        .find_iter(full_text)
        .last()
        .ok_or_else(no_answer)?;
    let rest = &full_text[last.end()..];
    let mut lines = rest.lines();
    let first = lines.next().unwrap_or("");
    let span = if first.trim().is_empty() {
        lines.find(|l| !l.trim().is_empty()).unwrap_or("")
    } else {
        first
    };
    let span = span.split("Used:").next().unwrap_or("").trim();
    let answer = Answer::new(span);
    if answer.canonical_text.is_empty() {
        return Err(no_answer());
    }
    Ok(answer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTrajectory {
    pub full_text: String,
    pub source: Source,
    pub slot_index: usize,
}

impl RawTrajectory {
    pub fn new(full_text: impl Into<String>, source: Source, slot_index: usize) -> Self {
        Self {
            full_text: full_text.into(),
            source,
            slot_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub premises: String,
    pub steps: Vec<String>,
    pub conclusion: String,
    /// Extracted from the raw output; `None` when the model gave no answer.
    pub final_answer: Option<Answer>,
    pub source: Source,
    pub slot_index: usize,
    pub correct: Option<bool>,
    /// Condensation failed and the raw text stands in as a single step.
    pub degraded: bool,
}

impl Trajectory {
    pub fn degraded(raw: &RawTrajectory) -> Self {
        Self {
            premises: String::new(),
            steps: vec![raw.full_text.trim().to_string()],
            conclusion: String::new(),
            final_answer: extract_answer(&raw.full_text).ok(),
            source: raw.source,
            slot_index: raw.slot_index,
            correct: None,
            degraded: true,
        }
    }

    pub fn answer_text(&self) -> &str {
        self.final_answer
            .as_ref()
            .map_or("(no answer)", |a| a.canonical_text.as_str())
    }

    /// Premises, numbered steps, conclusion and final answer, one per line.
    pub fn render(&self) -> String {
        let mut out = Vec::new();
        if !self.premises.is_empty() {
            out.push(format!("Premises: {}", self.premises));
        }
        for (i, step) in self.steps.iter().enumerate() {
            out.push(format!("Step {}: {}", i + 1, step));
        }
        if !self.conclusion.is_empty() {
            out.push(format!("Conclusion: {}", self.conclusion));
        }
        out.push(format!("Final answer: {}", self.answer_text()));
        out.join("\n")
    }

    pub fn is_correct_for(&self, gold: &Answer) -> bool {
        self.final_answer.as_ref().is_some_and(|a| answers_equal(a, gold))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CondensedParts {
    pub premises: String,
    pub steps: Vec<String>,
    pub conclusion: String,
}

/// Reads a condensation reply: an optional `Premises:` line, numbered steps
/// (`1.`, `2)`, `Step 3:`), and an optional `Conclusion:` line. Unnumbered
/// lines continue the previous step. Returns `None` when no step is found.
pub fn parse_condensed(text: &str) -> Option<CondensedParts> {
    static STEP: OnceLock<Regex> = OnceLock::new();
    static LABEL: OnceLock<Regex> = OnceLock::new();
    let step_re = regex(&STEP, r"^(?i:step\s*)?\d+\s*[.):]\s*(.*)$");
    let label_re = regex(&LABEL, r"^(?i)\**(premises?|conclusion)\**\s*:\s*(.*)$");

    let mut parts = CondensedParts {
        premises: String::new(),
        steps: Vec::new(),
        conclusion: String::new(),
    };
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        if let Some(c) = label_re.captures(line) {
            let body = c[2].trim().to_string();
            if c[1].to_lowercase().starts_with("premise") {
                parts.premises = body;
            } else {
                parts.conclusion = body;
            }
        } else if let Some(c) = step_re.captures(line) {
            parts.steps.push(c[1].trim().to_string());
        } else if let Some(last) = parts.steps.last_mut() {
            last.push(' ');
            last.push_str(line);
        }
    }
    parts.steps.retain(|s| !s.is_empty());
    (!parts.steps.is_empty()).then_some(parts)
}

/// Builds a trajectory from a condensation reply. The final answer always
/// comes from the raw output, never from the condensed text.
pub fn from_condensed(raw: &RawTrajectory, reply: &str) -> Trajectory {
    match parse_condensed(reply) {
        Some(parts) => Trajectory {
            premises: parts.premises,
            steps: parts.steps,
            conclusion: parts.conclusion,
            final_answer: extract_answer(&raw.full_text).ok(),
            source: raw.source,
            slot_index: raw.slot_index,
            correct: None,
            degraded: false,
        },
        None => Trajectory::degraded(raw),
    }
}

#[derive(Debug, Error)]
pub enum CondenseError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Asks `client` (the model that produced the trajectory) to rewrite it as
/// numbered steps.
pub async fn condense(
    raw: &RawTrajectory,
    problem: &Sample,
    client: &ModelClient,
    prompts: &PromptLibrary,
) -> Result<(Trajectory, ChatResponse), CondenseError> {
    let prompt = prompts.build_condense_prompt(&raw.full_text, problem)?;
    let response = client.gateway.complete(&client.request(prompt.messages)).await?;
    let trajectory = from_condensed(raw, response.first_text());
    if trajectory.degraded {
        tracing::warn!(slot = raw.slot_index, "condensation reply unparseable; using raw text");
    }
    Ok((trajectory, response))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherVerdict {
    Valid,
    NegativeCase,
}

pub fn filter_teacher(teacher: &Trajectory, gold: &Answer) -> TeacherVerdict {
    debug_assert_eq!(teacher.source, Source::Teacher);
    if teacher.is_correct_for(gold) {
        TeacherVerdict::Valid
    } else {
        TeacherVerdict::NegativeCase
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub positives: Vec<Trajectory>,
    pub negatives: Vec<Trajectory>,
    /// Negatives removed by down-sampling, by slot index.
    pub dropped: Vec<usize>,
}

/// Labels trajectories against `gold` and down-samples the negatives so they
/// never outnumber the positives. With no positive at all, exactly one
/// negative is kept. Down-sampling keeps the lowest slot indices.
pub fn partition_balance(trajectories: Vec<Trajectory>, gold: &Answer) -> Partition {
    let mut partition = Partition::default();
    for mut t in trajectories {
        let correct = t.is_correct_for(gold);
        t.correct = Some(correct);
        if correct {
            partition.positives.push(t);
        } else {
            partition.negatives.push(t);
        }
    }
    partition.positives.sort_by_key(|t| t.slot_index);
    partition.negatives.sort_by_key(|t| t.slot_index);
    let keep = partition.positives.len().max(1).min(partition.negatives.len());
    partition.dropped = partition.negatives.drain(keep..).map(|t| t.slot_index).collect();
    partition
}

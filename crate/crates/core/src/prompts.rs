//! Prompt templates and the builders that fill them.
//!
//! A template is plain text split into chat messages by `[system]`,
//! `[user]` and `[assistant]` marker lines. `{name}` placeholders are
//! substituted in a single pass; braces that do not wrap an identifier
//! (JSON examples, for instance) are left alone. The built-in templates live
//! in `prompts/` and any of them can be replaced from a directory at runtime.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::Sample;
use crate::gateway::{ChatMessage, MessageRole};
use crate::store::{ExperienceId, ExperienceStore, SerializedExperiences};
use crate::trajectory::{TeacherVerdict, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    StudentSolve,
    TeacherSolve,
    TeacherCritique,
    TrajectoryCondense,
    ExperienceCompress,
}

impl PromptKind {
    pub const ALL: [PromptKind; 5] = [
        PromptKind::StudentSolve,
        PromptKind::TeacherSolve,
        PromptKind::TeacherCritique,
        PromptKind::TrajectoryCondense,
        PromptKind::ExperienceCompress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptKind::StudentSolve => "student_solve",
            PromptKind::TeacherSolve => "teacher_solve",
            PromptKind::TeacherCritique => "teacher_critique",
            PromptKind::TrajectoryCondense => "trajectory_condense",
            PromptKind::ExperienceCompress => "experience_compress",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.txt", self.name())
    }

    fn builtin_source(self) -> &'static str {
        match self {
            PromptKind::StudentSolve => include_str!("../prompts/student_solve.txt"),
            PromptKind::TeacherSolve => include_str!("../prompts/teacher_solve.txt"),
            PromptKind::TeacherCritique => include_str!("../prompts/teacher_critique.txt"),
            PromptKind::TrajectoryCondense => include_str!("../prompts/trajectory_condense.txt"),
            PromptKind::ExperienceCompress => include_str!("../prompts/experience_compress.txt"),
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("template {kind}: unresolved placeholder {{{name}}}")]
    UnresolvedPlaceholder { kind: PromptKind, name: String },
    #[error("template {kind}: {message}")]
    Malformed { kind: PromptKind, message: String },
    #[error("{kind} prompt: {what} is empty")]
    EmptyInput { kind: PromptKind, what: &'static str },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub source: String,
    sections: Vec<(MessageRole, String)>,
}

impl PromptTemplate {
    pub fn parse(kind: PromptKind, source: &str) -> Result<Self, PromptError> {
        let mut sections: Vec<(MessageRole, String)> = Vec::new();
        let mut preamble = String::new();
        for line in source.lines() {
            let role = match line.trim() {
                "[system]" => Some(MessageRole::System),
                "[user]" => Some(MessageRole::User),
                "[assistant]" => Some(MessageRole::Assistant),
                _ => None,
            };
            match (role, sections.last_mut()) {
                (Some(role), _) => sections.push((role, String::new())),
                (None, Some((_, body))) => {
                    body.push_str(line);
                    body.push('\n');
                }
                (None, None) => {
                    preamble.push_str(line);
                    preamble.push('\n');
                }
            }
        }
        if sections.is_empty() {
            sections.push((MessageRole::User, preamble));
        } else if !preamble.trim().is_empty() {
            return Err(PromptError::Malformed {
                kind,
                message: "text before the first section marker".into(),
            });
        }
        for (_, body) in &mut sections {
            *body = body.trim_matches('\n').to_string();
        }
        if sections.iter().any(|(_, b)| b.trim().is_empty()) {
            return Err(PromptError::Malformed {
                kind,
                message: "empty section".into(),
            });
        }
        if sections[0].0 == MessageRole::Assistant {
            return Err(PromptError::Malformed {
                kind,
                message: "first section must be [system] or [user]".into(),
            });
        }
        Ok(Self {
            kind,
            source: source.to_string(),
            sections,
        })
    }

    pub fn placeholders(&self) -> BTreeSet<String> {
        self.sections
            .iter()
            .flat_map(|(_, body)| placeholder_re().captures_iter(body).map(|c| c[1].to_string()))
            .collect()
    }

    /// Substitutes every placeholder. Values are inserted verbatim and are
    /// not themselves scanned for placeholders.
    pub fn render(&self, bindings: &BTreeMap<&str, String>) -> Result<Vec<ChatMessage>, PromptError> {
        if let Some(name) = self
            .placeholders()
            .into_iter()
            .find(|n| !bindings.contains_key(n.as_str()))
        {
            return Err(PromptError::UnresolvedPlaceholder { kind: self.kind, name });
        }
        Ok(self
            .sections
            .iter()
            .map(|(role, body)| {
                let text = placeholder_re().replace_all(body, |c: &Captures| bindings[&c[1]].clone());
                ChatMessage::text(*role, text.into_owned())
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPrompt {
    pub kind: PromptKind,
    pub messages: Vec<ChatMessage>,
    /// Experience ids written into the prompt, in order.
    pub experience_ids_included: Vec<ExperienceId>,
}

/// One template per kind.
#[derive(Debug, Clone)]
pub struct PromptLibrary {
    templates: BTreeMap<PromptKind, PromptTemplate>,
}

impl Default for PromptLibrary {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptLibrary {
    pub fn builtin() -> Self {
        let templates = PromptKind::ALL
            .iter()
            .map(|&k| {
                let t = PromptTemplate::parse(k, k.builtin_source()).expect("built-in templates are well formed");
                (k, t)
            })
            .collect();
        Self { templates }
    }

    /// Built-in templates, with any `{kind}.txt` found in `dir` taking precedence.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut lib = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                continue;
            }
            let source = std::fs::read_to_string(&path).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            lib.templates.insert(kind, PromptTemplate::parse(kind, &source)?);
        }
        Ok(lib)
    }

    pub fn template(&self, kind: PromptKind) -> &PromptTemplate {
        &self.templates[&kind]
    }

    /// SHA-256 over every template's name and source.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (kind, t) in &self.templates {
            hasher.update(kind.name().as_bytes());
            hasher.update([0u8]);
            hasher.update(t.source.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    fn render(
        &self,
        kind: PromptKind,
        bindings: BTreeMap<&str, String>,
        image_from: Option<&Sample>,
        experience_ids_included: Vec<ExperienceId>,
    ) -> Result<RenderedPrompt, PromptError> {
        let mut messages = self.template(kind).render(&bindings)?;
        if let Some(image) = image_from.and_then(|s| s.image.clone()) {
            if let Some(last_user) = messages.iter_mut().rev().find(|m| m.role == MessageRole::User) {
                *last_user = last_user.clone().with_image(image);
            }
        }
        Ok(RenderedPrompt {
            kind,
            messages,
            experience_ids_included,
        })
    }

    /// The student's context: instructions, then the experience block, then the problem.
    pub fn build_student_prompt(
        &self,
        problem: &Sample,
        experiences: &SerializedExperiences,
    ) -> Result<RenderedPrompt, PromptError> {
        let kind = PromptKind::StudentSolve;
        require(kind, &problem.question, "problem text")?;
        let bindings = BTreeMap::from([
            ("experiences", experiences.text.clone()),
            ("problem", problem.question.clone()),
        ]);
        self.render(kind, bindings, Some(problem), experiences.ids.clone())
    }

    pub fn build_teacher_solve_prompt(&self, problem: &Sample) -> Result<RenderedPrompt, PromptError> {
        let kind = PromptKind::TeacherSolve;
        require(kind, &problem.question, "problem text")?;
        let bindings = BTreeMap::from([("problem", problem.question.clone())]);
        self.render(kind, bindings, Some(problem), Vec::new())
    }

    pub fn build_critique_prompt(&self, input: &CritiqueInput<'_>) -> Result<RenderedPrompt, PromptError> {
        let kind = PromptKind::TeacherCritique;
        if input.positives.is_empty() && input.negatives.is_empty() {
            return Err(PromptError::EmptyInput {
                kind,
                what: "student trajectory set",
            });
        }
        let students: Vec<String> = input
            .positives
            .iter()
            .map(|t| (t, "POSITIVE (reward = 1)"))
            .chain(input.negatives.iter().map(|t| (t, "NEGATIVE (reward = 0)")))
            .enumerate()
            .map(|(i, (t, label))| format!("Student trajectory {}: {}\n{}", i + 1, label, t.render()))
            .collect();
        let teacher_header = match input.teacher_verdict {
            TeacherVerdict::Valid => "Teacher trajectory (reaches the ground-truth answer):".to_string(),
            TeacherVerdict::NegativeCase => "Teacher trajectory: NEGATIVE CASE (its answer does not match the \
                 ground truth; treat it as an example of reasoning to avoid):"
                .to_string(),
        };
        let serialized = input.store.serialize();
        let bindings = BTreeMap::from([
            ("problem", input.problem.question.clone()),
            ("gold", input.problem.gold.canonical_text.clone()),
            (
                "teacher_trajectories",
                format!("{teacher_header}\n{}", input.teacher.render()),
            ),
            ("student_trajectories", students.join("\n\n")),
            ("experiences", serialized.text),
        ]);
        self.render(kind, bindings, Some(input.problem), serialized.ids)
    }

    pub fn build_condense_prompt(&self, raw_trajectory: &str, problem: &Sample) -> Result<RenderedPrompt, PromptError> {
        let kind = PromptKind::TrajectoryCondense;
        require(kind, raw_trajectory, "rollout")?;
        let bindings = BTreeMap::from([
            ("problem", problem.question.clone()),
            ("rollouts", raw_trajectory.to_string()),
        ]);
        self.render(kind, bindings, None, Vec::new())
    }

    pub fn build_compress_prompt(
        &self,
        store: &ExperienceStore,
        item_cap: usize,
        word_cap: usize,
    ) -> Result<RenderedPrompt, PromptError> {
        let kind = PromptKind::ExperienceCompress;
        if store.is_empty() {
            return Err(PromptError::EmptyInput {
                kind,
                what: "experience store",
            });
        }
        let listing: Vec<String> = store
            .items
            .iter()
            .map(|i| format!("[{}] (used {} times) {}", i.id, i.usage_count, i.text))
            .collect();
        let bindings = BTreeMap::from([
            ("item_count", store.len().to_string()),
            ("item_cap", item_cap.to_string()),
            ("word_cap", word_cap.to_string()),
            ("experiences", listing.join("\n")),
        ]);
        self.render(kind, bindings, None, store.ids())
    }
}

fn require(kind: PromptKind, text: &str, what: &'static str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        Err(PromptError::EmptyInput { kind, what })
    } else {
        Ok(())
    }
}

/// Everything the teacher sees when critiquing one sample.
#[derive(Debug, Clone, Copy)]
pub struct CritiqueInput<'a> {
    pub problem: &'a Sample,
    pub positives: &'a [Trajectory],
    pub negatives: &'a [Trajectory],
    pub teacher: &'a Trajectory,
    pub teacher_verdict: TeacherVerdict,
    pub store: &'a ExperienceStore,
}
